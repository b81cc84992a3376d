#include <gtest/gtest.h>

#include <cmath>
#include <fstream>

#include "clim/config.hpp"
#include "clim/reporting.hpp"
#include "test_util.hpp"

namespace clim {
namespace {

using testing::TempDir;

SweepRow row(const std::string& strategy, std::uint64_t seed, double linear) {
  SweepRow r;
  r.strategy = strategy;
  r.mixing = "cutmix";
  r.resolutions = "32,24";
  r.alpha = 2;
  r.k = 40;
  r.seed = seed;
  r.metrics["linear"] = linear;
  r.source = strategy + std::to_string(seed);
  return r;
}

TEST(Summarize, ClosedForms) {
  const Stat one = summarize({0.7});
  EXPECT_EQ(one.mean, 0.7);
  EXPECT_EQ(one.stddev, 0.0);
  const Stat five = summarize({1, 2, 3, 4, 5});
  EXPECT_DOUBLE_EQ(five.mean, 3.0);
  EXPECT_DOUBLE_EQ(five.stddev, std::sqrt(2.5));
  EXPECT_EQ(five.count, 5);
}

TEST(Aggregate, GroupsBySeedlessConfig) {
  std::vector<std::string> warnings;
  std::vector<SweepRow> runs;
  for (int s = 1; s <= 5; ++s) runs.push_back(row("clim", std::uint64_t(s), double(s)));
  runs.push_back(row("instance", 1, 0.5));
  const Table t = aggregate(runs, warnings);
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_TRUE(warnings.empty());
  EXPECT_DOUBLE_EQ(t.rows[0].metrics.at("linear").mean, 3.0);
  EXPECT_DOUBLE_EQ(t.rows[0].metrics.at("linear").stddev, std::sqrt(2.5));
  EXPECT_EQ(t.rows[1].metrics.at("linear").stddev, 0.0);
  EXPECT_EQ(t.rows[1].seeds.size(), 1u);
}

TEST(Aggregate, DuplicateSeedsWarned) {
  std::vector<std::string> warnings;
  const Table t = aggregate({row("clim", 1, 0.5), row("clim", 1, 0.9)}, warnings);
  ASSERT_EQ(t.rows.size(), 1u);
  EXPECT_EQ(t.rows[0].seeds.size(), 1u);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Aggregate, PermutationInvariant) {
  std::vector<SweepRow> runs;
  Rng rng(1);
  for (int s = 0; s < 12; ++s) runs.push_back(row(s % 3 == 0 ? "clim" : s % 3 == 1 ? "knn" : "random",
                                                  std::uint64_t(s), rng.uniform()));
  std::vector<std::string> w1, w2;
  const std::string a = format_table(aggregate(runs, w1));
  std::reverse(runs.begin(), runs.end());
  std::swap(runs[2], runs[7]);
  EXPECT_EQ(format_table(aggregate(runs, w2)), a);
}

TEST(Compare, OrderingAndTies) {
  std::vector<std::string> w;
  const Table single = aggregate({row("clim", 1, 0.8)}, w);
  const auto r1 = compare_strategies(single);
  ASSERT_EQ(r1.size(), 1u);
  EXPECT_FALSE(r1[0].tied_with_next);

  const Table tied = aggregate({row("knn", 1, 0.6), row("kmeans", 1, 0.6), row("clim", 1, 0.7)}, w);
  const auto r2 = compare_strategies(tied);
  ASSERT_EQ(r2.size(), 3u);
  EXPECT_EQ(r2[0].label.substr(0, 4), "clim");
  EXPECT_TRUE(r2[1].tied_with_next);
  EXPECT_NE(format_ranking(r2).find("tie"), std::string::npos);

  const Table strict = aggregate({row("a", 1, 0.9), row("b", 1, 0.8), row("c", 1, 0.7)}, w);
  const auto r3 = compare_strategies(strict);
  for (std::size_t i = 0; i + 1 < r3.size(); ++i) EXPECT_GT(r3[i].delta, 0.0);
}

void write_run(const std::filesystem::path& dir, const std::string& strategy, std::uint64_t seed,
               const std::string& eval) {
  std::filesystem::create_directories(dir);
  RunConfig c;
  c.train.strategy = parse_strategy(strategy);
  c.train.seed = seed;
  save_config(c, dir / "config.json");
  std::ofstream(dir / "eval.tsv") << eval;
}

TEST(ReadRun, ParsesAndSkipsMalformedLines) {
  TempDir dir;
  write_run(dir / "a", "knn", 3, "linear\t0.5\t0\nlinear\t0.7\t1\nlinear\t0.6\tmean\nknn\tbad\t0\njunk\nintra_sim\t0.4\t0\n");
  std::vector<std::string> warnings;
  const SweepRow r = read_run(dir / "a", warnings);
  EXPECT_EQ(r.strategy, "knn");
  EXPECT_EQ(r.seed, 3u);
  EXPECT_EQ(r.resolutions, "32,24");
  EXPECT_DOUBLE_EQ(r.metrics.at("linear"), 0.6);
  EXPECT_DOUBLE_EQ(r.metrics.at("intra_sim"), 0.4);
  EXPECT_EQ(r.metrics.count("knn"), 0u);
  EXPECT_EQ(warnings.size(), 2u);
}

TEST(ReadRun, AggregatesDirectories) {
  TempDir dir;
  write_run(dir / "r1", "clim", 1, "linear\t0.8\t0\n");
  write_run(dir / "r2", "clim", 2, "linear\t0.6\t0\n");
  write_run(dir / "r3", "instance", 1, "linear\t0.5\t0\n");
  std::vector<std::string> w;
  const Table t = aggregate_dirs({dir / "r1", dir / "r2", dir / "r3"}, w);
  ASSERT_EQ(t.rows.size(), 2u);
  const std::string text = format_table(t);
  EXPECT_NE(text.find("0.7000"), std::string::npos);
  EXPECT_NE(text.find("linear_mean\tlinear_std"), std::string::npos);
  EXPECT_THROW(read_run(dir / "missing", w), IoError);
}

}  // namespace
}  // namespace clim

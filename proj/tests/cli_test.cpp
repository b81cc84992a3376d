#include <gtest/gtest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "clim/dataset.hpp"
#include "test_util.hpp"

namespace clim {
namespace {

using testing::TempDir;

struct CmdResult {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr folded into the captured output.
CmdResult clim(const std::string& args) {
  const std::string cmd = std::string(CLIM_BIN) + " " + args + " 2>&1";
  CmdResult r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  std::array<char, 4096> buf{};
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);)
    if (!l.empty()) out.push_back(l);
  return out;
}

std::string q(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

const char* kTinyConfig = R"({
  "augment": {"resolutions": [12, 8]},
  "contrastive": {"queue_capacity": 64},
  "neighborhood": {"clusters": 3, "knn_k": 5, "positives": 3, "refresh_every": 1},
  "train": {"epochs": 2, "batch_size": 8, "warmup_epochs": 1,
            "encoder": {"input_side": 12, "hidden": 32, "feat": 16, "mlp_hidden": 16, "embed": 8}},
  "eval": {"epochs": 10, "knn_k": 5}
})";

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    data_ = dir_ / "d.clim";
    ASSERT_EQ(clim("gen-data --classes 3 --per-class 10 --side 12 --seed 4 --out " + q(data_)).code, 0);
    std::ofstream(dir_ / "cfg.json") << kTinyConfig;
  }
  CmdResult pretrain(const std::string& out, const std::string& extra = "") {
    return clim("pretrain --quiet --config " + q(dir_ / "cfg.json") + " --data " + q(data_) + " --out " +
                q(dir_ / out) + " " + extra);
  }
  TempDir dir_;
  std::filesystem::path data_;
};

TEST_F(Cli, GenDataIsByteReproducible) {
  ASSERT_EQ(clim("gen-data --classes 3 --per-class 10 --side 12 --seed 4 --out " + q(dir_ / "e.clim")).code, 0);
  EXPECT_EQ(slurp(data_), slurp(dir_ / "e.clim"));
  const Dataset ds = load_tensor_file(data_);
  EXPECT_EQ(ds.size(), 30u);
}

TEST_F(Cli, GenDataErrors) {
  const CmdResult bad = clim("gen-data --classes 0 --out " + q(dir_ / "x.clim"));
  EXPECT_EQ(bad.code, 1);
  EXPECT_EQ(lines_of(bad.out).size(), 1u);
  EXPECT_EQ(clim("gen-data --out /nonexistent_dir_for_clim/x.clim").code, 2);
  EXPECT_EQ(clim("gen-data").code, 1);
  EXPECT_EQ(clim("gen-data --classes many --out x").code, 1);
}

TEST_F(Cli, DefaultGenDataFeedsPretrain) {
  ASSERT_EQ(clim("gen-data --per-class 4 --out " + q(dir_ / "def.clim")).code, 0);
  const CmdResult r = clim("pretrain --quiet --config " + q(dir_ / "cfg.json") + " --data " + q(dir_ / "def.clim") +
                     " --epochs 1 --resolutions 16 --out " + q(dir_ / "def"));
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(std::filesystem::exists(dir_ / "def" / "ckpt_epoch1.clim"));
}

TEST_F(Cli, HelpListsFlagsWithDefaults) {
  const CmdResult gen = clim("gen-data --help");
  EXPECT_EQ(gen.code, 0);
  for (const char* flag : {"--classes", "--per-class", "--side", "--latent", "--channels", "--stddev", "--seed", "--out"})
    EXPECT_NE(gen.out.find(flag), std::string::npos) << flag;
  EXPECT_NE(gen.out.find("[10]"), std::string::npos);
  for (const char* cmd : {"pretrain", "eval", "select", "augment", "report"}) {
    const CmdResult r = clim(std::string(cmd) + " --help");
    EXPECT_EQ(r.code, 0) << cmd;
    EXPECT_NE(r.out.find("--"), std::string::npos);
  }
  EXPECT_NE(clim("select --help").out.find("[auto]"), std::string::npos);
}

TEST_F(Cli, PretrainIsReproducibleAndHonoursOverrides) {
  ASSERT_EQ(pretrain("a").code, 0);
  ASSERT_EQ(pretrain("b").code, 0);
  EXPECT_EQ(slurp(dir_ / "a" / "metrics.tsv"), slurp(dir_ / "b" / "metrics.tsv"));
  EXPECT_EQ(slurp(dir_ / "a" / "ckpt_epoch2.clim"), slurp(dir_ / "b" / "ckpt_epoch2.clim"));
  EXPECT_EQ(lines_of(slurp(dir_ / "a" / "metrics.tsv")).size(), 1u + 2 * 3);

  ASSERT_EQ(pretrain("base", "--strategy instance --mixing none --seed 5").code, 0);
  const std::string cfg = slurp(dir_ / "base" / "config.json");
  EXPECT_NE(cfg.find("\"instance\""), std::string::npos);
  EXPECT_NE(cfg.find("\"none\""), std::string::npos);
  EXPECT_NE(slurp(dir_ / "base" / "metrics.tsv"), slurp(dir_ / "a" / "metrics.tsv"));
}

TEST_F(Cli, PretrainZeroEpochsWritesInitialCheckpoint) {
  ASSERT_EQ(pretrain("z", "--epochs 0").code, 0);
  EXPECT_TRUE(std::filesystem::exists(dir_ / "z" / "ckpt_epoch0.clim"));
  EXPECT_EQ(lines_of(slurp(dir_ / "z" / "metrics.tsv")).size(), 1u);
}

TEST_F(Cli, PretrainErrors) {
  EXPECT_EQ(clim("pretrain --quiet --config " + q(dir_ / "cfg.json") + " --data " + q(dir_ / "missing.clim") +
                 " --out " + q(dir_ / "m")).code,
            2);
  std::ofstream(dir_ / "bad.json") << R"({"train": {"epoch": 1}})";
  const CmdResult bad = clim("pretrain --config " + q(dir_ / "bad.json") + " --data " + q(data_) + " --out " + q(dir_ / "m"));
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.out.find("train.epoch"), std::string::npos);
  EXPECT_EQ(pretrain("m", "--strategy nearest").code, 1);
}

TEST_F(Cli, EvalLinesAndErrors) {
  ASSERT_EQ(pretrain("a").code, 0);
  const std::string ck = q(dir_ / "a" / "ckpt_epoch2.clim");
  const CmdResult intra = clim("eval --ckpt " + ck + " --data " + q(data_) + " --metric intra-sim");
  ASSERT_EQ(intra.code, 0) << intra.out;
  const auto il = lines_of(intra.out);
  ASSERT_EQ(il.size(), 1u);
  EXPECT_EQ(il[0].substr(0, 10), "intra_sim\t");
  EXPECT_EQ(il[0].substr(il[0].size() - 2), "\t0");

  const CmdResult multi = clim("eval --ckpt " + ck + " --data " + q(data_) + " --metric linear --seeds 5 --config " +
                         q(dir_ / "cfg.json") + " --append " + q(dir_ / "a" / "eval.tsv"));
  ASSERT_EQ(multi.code, 0) << multi.out;
  const auto ml = lines_of(multi.out);
  ASSERT_EQ(ml.size(), 6u);
  EXPECT_EQ(ml.back().substr(ml.back().size() - 5), "\tmean");
  EXPECT_EQ(lines_of(slurp(dir_ / "a" / "eval.tsv")).size(), 5u);

  for (const char* metric : {"knn", "finetune --fraction 0.5"}) {
    const CmdResult r = clim("eval --ckpt " + ck + " --data " + q(data_) + " --config " + q(dir_ / "cfg.json") +
                       " --metric " + metric);
    EXPECT_EQ(r.code, 0) << r.out;
  }

  Dataset unlabeled = load_tensor_file(data_);
  unlabeled.labels.reset();
  unlabeled.class_count.reset();
  save_tensor_file(unlabeled, dir_ / "u.clim");
  const CmdResult nolabels = clim("eval --ckpt " + ck + " --data " + q(dir_ / "u.clim") + " --metric linear");
  EXPECT_EQ(nolabels.code, 1);
  EXPECT_NE(nolabels.out.find("labels required"), std::string::npos);
  EXPECT_EQ(clim("eval --ckpt " + q(dir_ / "none.clim") + " --data " + q(data_)).code, 2);
  EXPECT_EQ(clim("eval --ckpt " + ck + " --data " + q(data_) + " --metric top5").code, 1);
}

TEST_F(Cli, SelectOutputParsesAndFindsDuplicates) {
  // Zero spread: every class is ten copies of one image.
  const auto dup = dir_ / "dup.clim";
  ASSERT_EQ(clim("gen-data --classes 3 --per-class 10 --side 12 --stddev 0 --out " + q(dup)).code, 0);
  ASSERT_EQ(pretrain("z", "--epochs 0").code, 0);
  const std::string ck = q(dir_ / "z" / "ckpt_epoch0.clim");
  const CmdResult r = clim("select --ckpt " + ck + " --data " + q(dup) + " --anchor 4 --k 1 --clusters 3");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto l = lines_of(r.out);
  EXPECT_EQ(l[0], "anchor\t4");
  const auto o2 = std::find(l.begin(), l.end(), "omega2: 1");
  ASSERT_NE(o2, l.end());
  EXPECT_EQ((o2 + 1)->substr(0, 2), "0\t");  // lowest-index duplicate at distance 0

  std::ofstream(dir_ / "sel.txt") << r.out;
  const std::string cmd = std::string("python3 ") + SELECT_REPORT + " " + q(dir_ / "sel.txt") + " > " +
                          q(dir_ / "sel.json");
  EXPECT_EQ(std::system(cmd.c_str()), 0);
  EXPECT_NE(slurp(dir_ / "sel.json").find("\"anchor\": 4"), std::string::npos);

  const CmdResult full = clim("select --ckpt " + ck + " --data " + q(data_) + " --anchor 7 --k 10");
  ASSERT_EQ(full.code, 0);
  std::ofstream(dir_ / "sel2.txt") << full.out;
  EXPECT_EQ(std::system((std::string("python3 ") + SELECT_REPORT + " " + q(dir_ / "sel2.txt") + " > /dev/null").c_str()), 0);

  EXPECT_EQ(clim("select --ckpt " + ck + " --data " + q(data_) + " --anchor 30").code, 1);
  EXPECT_EQ(clim("select --ckpt " + ck + " --data " + q(data_) + " --clusters none").code, 1);
}

TEST_F(Cli, AugmentManifestMatchesPixels) {
  // Black anchor and white positive: the mixed box is the set of lit pixels.
  const auto pd = dir_ / "pair";
  std::filesystem::create_directories(pd);
  save_ppm(Image(20, 20, 3, 0.0f), pd / "a.ppm");
  save_ppm(Image(20, 20, 3, 1.0f), pd / "b.ppm");
  for (int seed = 0; seed < 8; ++seed) {
    const auto out = dir_ / ("v" + std::to_string(seed));
    const CmdResult r = clim("augment --data " + q(pd) + " --anchor 0 --positive 1 --resolutions 32,24 --seed " +
                       std::to_string(seed) + " --out " + q(out));
    ASSERT_EQ(r.code, 0) << r.out;
    const auto manifest = lines_of(slurp(out / "manifest.txt"));
    ASSERT_EQ(manifest.size(), 2u);
    for (const auto& line : manifest) {
      std::istringstream in(line);
      int anchor, positive, res;
      double lam;
      std::string bbox;
      std::uint64_t s;
      in >> anchor >> positive >> res >> lam >> bbox >> s;
      EXPECT_EQ(anchor, 0);
      EXPECT_EQ(positive, 1);
      EXPECT_EQ(s, std::uint64_t(seed));
      const Image view = load_ppm(out / ("view_r" + std::to_string(res) + ".ppm"));
      ASSERT_EQ(view.height, res);
      int lit = 0;
      for (int y = 0; y < res; ++y)
        for (int x = 0; x < res; ++x) lit += view.at(y, x, 0) > 0.0f;
      EXPECT_NEAR(lam, 1.0 - double(lit) / (res * res), 1e-6) << line;
    }
  }
}

TEST_F(Cli, AugmentIsReproducibleAndSelfMixIsPlain) {
  const std::string base = "augment --data " + q(data_) + " --anchor 3 --positive 9 --seed 7 --out ";
  ASSERT_EQ(clim(base + q(dir_ / "x")).code, 0);
  ASSERT_EQ(clim(base + q(dir_ / "y")).code, 0);
  for (const char* f : {"view_r32.ppm", "view_r24.ppm", "manifest.txt"})
    EXPECT_EQ(slurp(dir_ / "x" / f), slurp(dir_ / "y" / f)) << f;

  ASSERT_EQ(clim("augment --data " + q(data_) + " --anchor 3 --positive 3 --seed 7 --out " + q(dir_ / "s")).code, 0);
  EXPECT_EQ(slurp(dir_ / "s" / "view_r32.ppm"), slurp(dir_ / "s" / "anchor_r32.ppm"));
  EXPECT_EQ(clim("augment --data " + q(data_) + " --anchor 30 --positive 0 --out " + q(dir_ / "e")).code, 1);
}

TEST_F(Cli, ReportAggregatesRuns) {
  for (const char* seed : {"1", "2"}) {
    const std::string out = std::string("r") + seed;
    ASSERT_EQ(pretrain(out, std::string("--epochs 1 --seed ") + seed).code, 0);
    ASSERT_EQ(clim("eval --ckpt " + q(dir_ / out / "ckpt_epoch1.clim") + " --data " + q(data_) + " --config " +
                   q(dir_ / "cfg.json") + " --append " + q(dir_ / out / "eval.tsv"))
                  .code,
              0);
  }
  const CmdResult r = clim("report --runs " + q(dir_ / "r1") + " " + q(dir_ / "r2"));
  ASSERT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("linear_mean"), std::string::npos);
  EXPECT_NE(r.out.find("clim\tcutmix\t12,8"), std::string::npos);
  EXPECT_NE(r.out.find("\t2\t"), std::string::npos);  // two seeds in one row
  EXPECT_EQ(clim("report --runs " + q(dir_ / "nothing")).code, 2);
}

}  // namespace
}  // namespace clim

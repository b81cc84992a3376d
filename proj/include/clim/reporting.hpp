#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace clim {

/// One finished run: its sweep coordinates and final metrics.
struct SweepRow {
  std::string strategy;
  std::string mixing;
  std::string resolutions;  // e.g. "32,24"
  double alpha = 0;
  int m = 0;  // clusters, 0 = auto
  int k = 0;  // kNN size
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;  // linear, knn, intra_sim, ...
  std::string source;                     // run directory, for messages

  /// Everything except the seed; runs sharing it are averaged.
  std::string config_key() const;
};

/// Reads <dir>/config.json and <dir>/eval.tsv. Metric lines are
/// `name<TAB>value<TAB>seed`; lines that do not parse are skipped with a
/// warning, as are `mean` summary lines. Several lines of one metric are averaged.
SweepRow read_run(const std::filesystem::path& dir, std::vector<std::string>& warnings);

struct Stat {
  double mean = 0;
  double stddev = 0;  // sample standard deviation, 0 for a single value
  int count = 0;
};
Stat summarize(const std::vector<double>& values);

struct TableRow {
  SweepRow config;  // seed and metrics of the first run, for the coordinates only
  std::vector<std::uint64_t> seeds;
  std::map<std::string, Stat> metrics;
};

struct Table {
  std::vector<TableRow> rows;  // sorted by config_key
};

/// Groups by config, dedupes repeated seeds (warning) and summarizes. The result
/// does not depend on the input order.
Table aggregate(std::vector<SweepRow> runs, std::vector<std::string>& warnings);
Table aggregate_dirs(const std::vector<std::filesystem::path>& dirs, std::vector<std::string>& warnings);

std::string format_table(const Table& table);

struct RankedStrategy {
  std::string label;  // strategy+mixing+resolutions
  double mean = 0;
  double delta = 0;   // mean minus the next entry's mean, 0 for the last
  bool tied_with_next = false;
};

/// Rows sorted by mean of `metric`, best first, with the gap to the next row.
std::vector<RankedStrategy> compare_strategies(const Table& table, const std::string& metric = "linear");
std::string format_ranking(const std::vector<RankedStrategy>& ranking, const std::string& metric = "linear");

}  // namespace clim

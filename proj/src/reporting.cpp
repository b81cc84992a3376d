#include "clim/reporting.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "clim/config.hpp"
#include "clim/error.hpp"

namespace clim {

std::string SweepRow::config_key() const {
  std::ostringstream s;
  s << strategy << '|' << mixing << '|' << resolutions << '|' << alpha << '|' << m << '|' << k;
  return s.str();
}

SweepRow read_run(const std::filesystem::path& dir, std::vector<std::string>& warnings) {
  const RunConfig cfg = load_config(dir / "config.json");
  SweepRow row;
  row.source = dir.string();
  row.strategy = to_string(cfg.train.strategy);
  row.mixing = to_string(cfg.train.mixing);
  for (std::size_t i = 0; i < cfg.train.augment.resolutions.size(); ++i) {
    if (i) row.resolutions += ',';
    row.resolutions += std::to_string(cfg.train.augment.resolutions[i]);
  }
  row.alpha = cfg.train.augment.alpha;
  row.m = cfg.train.neighborhood.clusters;
  row.k = cfg.train.neighborhood.knn_k;
  row.seed = cfg.train.seed;

  const auto path = dir / "eval.tsv";
  std::ifstream in(path);
  if (!in) throw IoError(IoErrc::open_failed, "cannot open " + path.string());
  std::map<std::string, std::vector<double>> values;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name, value_text, seed_text, extra;
    if (!(ls >> name >> value_text >> seed_text) || (ls >> extra)) {
      warnings.push_back(path.string() + ":" + std::to_string(lineno) + ": malformed metric line skipped");
      continue;
    }
    if (name == "mean" || value_text == "mean" || seed_text == "mean") continue;
    try {
      std::size_t used = 0;
      const double v = std::stod(value_text, &used);
      if (used != value_text.size() || !std::isfinite(v)) throw std::invalid_argument("trailing");
      values[name].push_back(v);
    } catch (const std::exception&) {
      warnings.push_back(path.string() + ":" + std::to_string(lineno) + ": malformed metric line skipped");
    }
  }
  for (const auto& [name, vs] : values) row.metrics[name] = summarize(vs).mean;
  return row;
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  s.count = int(values.size());
  if (values.empty()) return s;
  double sum = 0;
  for (double v : values) sum += v;
  s.mean = sum / double(values.size());
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / double(values.size() - 1));
  }
  return s;
}

Table aggregate(std::vector<SweepRow> runs, std::vector<std::string>& warnings) {
  std::sort(runs.begin(), runs.end(), [](const SweepRow& a, const SweepRow& b) {
    const auto ka = a.config_key(), kb = b.config_key();
    if (ka != kb) return ka < kb;
    if (a.seed != b.seed) return a.seed < b.seed;
    return a.source < b.source;
  });
  Table table;
  for (std::size_t i = 0; i < runs.size();) {
    std::size_t j = i;
    const std::string key = runs[i].config_key();
    TableRow row;
    row.config = runs[i];
    std::map<std::string, std::vector<double>> vals;
    for (; j < runs.size() && runs[j].config_key() == key; ++j) {
      if (!row.seeds.empty() && row.seeds.back() == runs[j].seed) {
        warnings.push_back("duplicate seed " + std::to_string(runs[j].seed) + " for " + key + ": ignoring " +
                           runs[j].source);
        continue;
      }
      row.seeds.push_back(runs[j].seed);
      for (const auto& [name, v] : runs[j].metrics) vals[name].push_back(v);
    }
    for (const auto& [name, vs] : vals) row.metrics[name] = summarize(vs);
    table.rows.push_back(std::move(row));
    i = j;
  }
  return table;
}

Table aggregate_dirs(const std::vector<std::filesystem::path>& dirs, std::vector<std::string>& warnings) {
  std::vector<SweepRow> runs;
  for (const auto& d : dirs) runs.push_back(read_run(d, warnings));
  return aggregate(std::move(runs), warnings);
}

namespace {
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string label_of(const SweepRow& r) { return r.strategy + "+" + r.mixing + "@" + r.resolutions; }
}  // namespace

std::string format_table(const Table& table) {
  std::vector<std::string> names;
  for (const auto& r : table.rows)
    for (const auto& [n, _] : r.metrics)
      if (std::find(names.begin(), names.end(), n) == names.end()) names.push_back(n);
  std::sort(names.begin(), names.end());
  std::ostringstream out;
  out << "strategy\tmixing\tresolutions\talpha\tm\tk\tseeds";
  for (const auto& n : names) out << '\t' << n << "_mean\t" << n << "_std";
  out << '\n';
  for (const auto& r : table.rows) {
    const auto& c = r.config;
    out << c.strategy << '\t' << c.mixing << '\t' << c.resolutions << '\t' << c.alpha << '\t' << c.m << '\t' << c.k
        << '\t' << r.seeds.size();
    for (const auto& n : names) {
      const auto it = r.metrics.find(n);
      if (it == r.metrics.end()) out << "\t-\t-";
      else out << '\t' << fmt(it->second.mean) << '\t' << fmt(it->second.stddev);
    }
    out << '\n';
  }
  return out.str();
}

std::vector<RankedStrategy> compare_strategies(const Table& table, const std::string& metric) {
  std::vector<RankedStrategy> out;
  for (const auto& r : table.rows) {
    const auto it = r.metrics.find(metric);
    if (it == r.metrics.end()) continue;
    out.push_back({label_of(r.config), it->second.mean, 0.0, false});
  }
  std::stable_sort(out.begin(), out.end(), [](const RankedStrategy& a, const RankedStrategy& b) {
    if (a.mean != b.mean) return a.mean > b.mean;
    return a.label < b.label;
  });
  for (std::size_t i = 0; i + 1 < out.size(); ++i) {
    out[i].delta = out[i].mean - out[i + 1].mean;
    out[i].tied_with_next = out[i].delta == 0.0;
  }
  return out;
}

std::string format_ranking(const std::vector<RankedStrategy>& ranking, const std::string& metric) {
  std::ostringstream out;
  out << "rank\tconfig\t" << metric << "_mean\tdelta_to_next\n";
  for (std::size_t i = 0; i < ranking.size(); ++i) {
    const auto& r = ranking[i];
    out << i + 1 << '\t' << r.label << '\t' << fmt(r.mean) << '\t';
    if (i + 1 == ranking.size()) out << "-";
    else out << fmt(r.delta) << (r.tied_with_next ? "\ttie" : "");
    out << '\n';
  }
  return out.str();
}

}  // namespace clim

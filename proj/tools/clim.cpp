#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "clim/augmentation.hpp"
#include "clim/checkpoint.hpp"
#include "clim/config.hpp"
#include "clim/dataset.hpp"
#include "clim/error.hpp"
#include "clim/evaluation.hpp"
#include "clim/neighborhood.hpp"
#include "clim/reporting.hpp"
#include "clim/trainer.hpp"

namespace fs = std::filesystem;
using namespace clim;

namespace {

std::vector<int> parse_int_list(const std::string& text, const char* flag) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ValidationError(std::string(flag) + " expects comma-separated integers, got '" + text + "'");
    }
  }
  if (out.empty()) throw ValidationError(std::string(flag) + " must not be empty");
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

Dataset require_data(const std::string& path) {
  if (!fs::exists(path)) throw IoError(IoErrc::open_failed, "data not found: " + path);
  return load_dataset(path, {});
}

// -- gen-data ---------------------------------------------------------------

struct GenArgs {
  SyntheticSpec spec;
  std::string out;
};

void run_gen(const GenArgs& a) {
  if (a.spec.class_count < 1) throw ValidationError("--classes must be >= 1");
  if (a.spec.per_class < 1) throw ValidationError("--per-class must be >= 1");
  if (a.spec.image_side < 1) throw ValidationError("--side must be >= 1");
  if (a.spec.latent_dim < 1) throw ValidationError("--latent must be >= 1");
  if (a.spec.channels < 1) throw ValidationError("--channels must be >= 1");
  if (!(a.spec.blob_stddev >= 0)) throw ValidationError("--stddev must be >= 0");
  save_tensor_file(generate_synthetic(a.spec), a.out);
}

// -- pretrain ---------------------------------------------------------------

struct PretrainArgs {
  std::string config, data, out, strategy, mixing, resolutions;
  int epochs = -1, workers = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool quiet = false;
};

void run_pretrain(const PretrainArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_config(a.config);
  if (!a.data.empty()) cfg.data_path = a.data;
  if (!a.strategy.empty()) cfg.train.strategy = parse_strategy(a.strategy);
  if (!a.mixing.empty()) cfg.train.mixing = parse_mixing(a.mixing);
  if (!a.resolutions.empty()) cfg.train.augment.resolutions = parse_int_list(a.resolutions, "--resolutions");
  if (a.epochs >= 0) cfg.train.epochs = a.epochs;
  if (a.workers > 0) cfg.train.workers = a.workers;
  if (a.seed_set) cfg.train.seed = a.seed;
  cfg.eval.view_side = cfg.train.canonical_side();
  cfg.validate();
  const Dataset ds = cfg.data_path.empty() ? generate_synthetic(cfg.synthetic) : require_data(cfg.data_path);
  fs::create_directories(a.out);
  save_config(cfg, fs::path(a.out) / "config.json");
  PretrainOptions opts;
  opts.out_dir = a.out;
  if (!a.quiet) {
    opts.on_step = [](const StepMetrics& m) {
      if (m.step % 50 == 0) std::cerr << format_metrics(m) << "\n";
    };
  }
  pretrain(ds, cfg.train, opts);
}

// -- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, metric = "linear", config, append;
  double fraction = 1.0;
  int seeds = 1, k = 0;
  std::uint64_t seed = 0;
};

void run_eval(const EvalArgs& a) {
  if (!fs::exists(a.ckpt)) throw IoError(IoErrc::open_failed, "checkpoint not found: " + a.ckpt);
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const Dataset ds = require_data(a.data);
  if (!ds.has_labels()) throw ValidationError("labels required for --metric " + a.metric);
  if (a.seeds < 1) throw ValidationError("--seeds must be >= 1");
  RunConfig rc = a.config.empty() ? RunConfig{} : load_config(a.config);
  ProbeConfig pc = rc.eval;
  pc.view_side = ckpt.view_side;
  pc.label_fraction = a.fraction;
  const int k = a.k > 0 ? a.k : rc.eval_knn_k;
  std::string name;
  if (a.metric == "linear" || a.metric == "knn" || a.metric == "finetune") name = a.metric;
  else if (a.metric == "intra-sim") name = "intra_sim";
  else throw ValidationError("--metric must be linear, knn, finetune or intra-sim");

  std::ofstream append;
  if (!a.append.empty()) {
    append.open(a.append, std::ios::app);
    if (!append) throw IoError(IoErrc::open_failed, "cannot append to " + a.append);
  }
  double sum = 0;
  for (int i = 0; i < a.seeds; ++i) {
    pc.seed = a.seed + std::uint64_t(i);
    double v = 0;
    if (name == "linear") v = linear_probe(ckpt.params, ds, pc);
    else if (name == "knn") v = knn_probe(ckpt.params, ds, k, pc);
    else if (name == "finetune") v = finetune_fraction(ckpt.params, ds, pc);
    else v = intra_class_similarity(ckpt.params, ds, pc.view_side).mean;
    sum += v;
    const std::string line = name + "\t" + fmt(v) + "\t" + std::to_string(pc.seed);
    std::cout << line << "\n";
    if (append.is_open()) append << line << "\n";
  }
  if (a.seeds > 1) std::cout << name << "\t" << fmt(sum / a.seeds) << "\tmean\n";
}

// -- select -----------------------------------------------------------------

struct SelectArgs {
  std::string ckpt, data, clusters = "auto";
  int anchor = 0, k = 40;
  std::uint64_t seed = 0;
};

void run_select(const SelectArgs& a) {
  const Checkpoint ckpt = load_checkpoint(a.ckpt);
  const Dataset ds = require_data(a.data);
  const int n = int(ds.size());
  if (a.anchor < 0 || a.anchor >= n) {
    throw ValidationError("--anchor " + std::to_string(a.anchor) + " out of range [0, " + std::to_string(n) + ")");
  }
  if (a.k < 1 || a.k >= n) throw ValidationError("--k must satisfy 1 <= k < n");
  NeighborhoodConfig nc;
  if (a.clusters != "auto") {
    try {
      nc.clusters = std::stoi(a.clusters);
    } catch (const std::exception&) {
      throw ValidationError("--clusters must be 'auto' or a positive integer");
    }
    if (nc.clusters < 1) throw ValidationError("--clusters must be 'auto' or a positive integer");
  }
  const EmbeddingBank bank = compute_bank(ckpt.params, ds, ckpt.view_side, 0);
  Rng rng = Rng(a.seed).split("kmeans");
  const ClusterModel model = kmeans_fit(rng, bank, std::min(nc.resolved_clusters(n), n), nc.max_iters, nc.tol);
  const SelectionResult sel = select_positives(bank, model, a.anchor, a.k);
  const auto center = model.centers.row(model.assignments[std::size_t(a.anchor)]);
  auto member = [&](int i) {
    std::cout << i << '\t' << fmt(l2_distance(bank.vectors.row(a.anchor), bank.vectors.row(i))) << '\t'
              << fmt(std::sqrt(squared_distance(bank.vectors.row(i), center))) << '\n';
  };
  std::cout << "anchor\t" << a.anchor << '\n';
  std::cout << "cluster\t" << model.assignments[std::size_t(a.anchor)] << '\n';
  std::cout << "anchor_center_distance\t" << fmt(sel.anchor_center_distance) << '\n';
  std::cout << "omega1: " << sel.omega1.size() << '\n';
  for (int i : sel.omega1) member(i);
  std::cout << "omega2: " << sel.omega2.size() << '\n';
  for (const auto& nb : sel.omega2) member(nb.index);
  std::cout << "omega_p: " << sel.omega_p.size() << '\n';
  for (int i : sel.omega_p) member(i);
}

// -- augment ----------------------------------------------------------------

struct AugmentArgs {
  std::string data, out, resolutions = "32,24", mixing = "cutmix";
  int anchor = 0, positive = 0;
  std::uint64_t seed = 0;
};

void run_augment(const AugmentArgs& a) {
  const Dataset ds = require_data(a.data);
  const int n = int(ds.size());
  for (int idx : {a.anchor, a.positive}) {
    if (idx < 0 || idx >= n) {
      throw ValidationError("index " + std::to_string(idx) + " out of range [0, " + std::to_string(n) + ")");
    }
  }
  AugConfig cfg;
  cfg.resolutions = parse_int_list(a.resolutions, "--resolutions");
  cfg.validate();
  const Mixing mixing = parse_mixing(a.mixing);
  Rng rng(a.seed);
  const Image& anchor = ds.images[std::size_t(a.anchor)];
  const Image& positive = ds.images[std::size_t(a.positive)];
  const ViewSet vs = make_views(rng, anchor, positive, cfg, mixing);
  fs::create_directories(a.out);
  std::ofstream manifest(fs::path(a.out) / "manifest.txt");
  if (!manifest) throw IoError(IoErrc::open_failed, "cannot write manifest in " + a.out);
  for (const auto& v : vs.views) {
    const std::string r = std::to_string(v.resolution);
    save_ppm(v.image, fs::path(a.out) / ("view_r" + r + ".ppm"));
    // Unmixed renders of both sources through the same plan, for inspection.
    save_ppm(render_plan(anchor, vs.plan, v.resolution), fs::path(a.out) / ("anchor_r" + r + ".ppm"));
    save_ppm(render_plan(positive, vs.plan, v.resolution), fs::path(a.out) / ("positive_r" + r + ".ppm"));
    manifest << a.anchor << ' ' << a.positive << ' ' << v.resolution << ' ' << fmt(v.lambda_realized) << ' '
             << v.mask.x0 << ',' << v.mask.y0 << ',' << v.mask.x1 << ',' << v.mask.y1 << ' ' << a.seed << '\n';
  }
  if (!manifest) throw IoError(IoErrc::write_failed, "manifest in " + a.out);
}

// -- report -----------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> runs;
  std::string metric = "linear";
};

void run_report(const ReportArgs& a) {
  std::vector<fs::path> dirs(a.runs.begin(), a.runs.end());
  std::vector<std::string> warnings;
  const Table table = aggregate_dirs(dirs, warnings);
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  std::cout << format_table(table) << "\n" << format_ranking(compare_strategies(table, a.metric), a.metric);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clim: neighbourhood-selected contrastive pretraining on small image sets"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Write a synthetic labeled dataset");
  g->add_option("--classes", gen.spec.class_count, "Number of classes");
  g->add_option("--per-class", gen.spec.per_class, "Images per class");
  g->add_option("--side", gen.spec.image_side, "Image side in pixels");
  g->add_option("--latent", gen.spec.latent_dim, "Latent dimension");
  g->add_option("--channels", gen.spec.channels, "Colour channels");
  g->add_option("--stddev", gen.spec.blob_stddev, "Within-class latent stddev");
  g->add_option("--seed", gen.spec.seed, "Generator seed");
  g->add_option("--out", gen.out, "Output tensor file")->required();

  PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "Contrastive pretraining");
  p->add_option("--config", pre.config, "JSON run config");
  p->add_option("--data", pre.data, "Tensor file or PPM directory (default: config data section)");
  p->add_option("--out", pre.out, "Run directory")->required();
  p->add_option("--strategy", pre.strategy, "Override: clim|instance|random|knn|kmeans|knn_and_kmeans|center_wise");
  p->add_option("--mixing", pre.mixing, "Override: cutmix|mixup|none");
  p->add_option("--resolutions", pre.resolutions, "Override, e.g. 32,24");
  p->add_option("--epochs", pre.epochs, "Override epoch count (-1 keeps the config)");
  p->add_option("--workers", pre.workers, "Override worker threads (0 keeps the config)");
  auto* seed_opt = p->add_option("--seed", pre.seed, "Override training seed");
  p->add_flag("--quiet", pre.quiet, "No progress lines on stderr");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Labeled tensor file or PPM directory")->required();
  e->add_option("--metric", ev.metric, "linear|knn|finetune|intra-sim");
  e->add_option("--fraction", ev.fraction, "Label fraction for finetune");
  e->add_option("--seeds", ev.seeds, "Number of evaluation seeds");
  e->add_option("--seed", ev.seed, "First evaluation seed");
  e->add_option("--k", ev.k, "k for the kNN probe (0 = config value)");
  e->add_option("--config", ev.config, "JSON run config (eval section)");
  e->add_option("--append", ev.append, "Also append metric lines to this file");

  SelectArgs sel;
  auto* s = app.add_subcommand("select", "Show the positive-selection sets for one anchor");
  s->add_option("--ckpt", sel.ckpt, "Checkpoint file")->required();
  s->add_option("--data", sel.data, "Tensor file or PPM directory")->required();
  s->add_option("--anchor", sel.anchor, "Anchor index");
  s->add_option("--k", sel.k, "kNN size");
  s->add_option("--clusters", sel.clusters, "Cluster count or 'auto'");
  s->add_option("--seed", sel.seed, "k-means seed");

  AugmentArgs aug;
  auto* a = app.add_subcommand("augment", "Write mixed multi-resolution views of one pair");
  a->add_option("--data", aug.data, "Tensor file or PPM directory")->required();
  a->add_option("--anchor", aug.anchor, "Anchor index");
  a->add_option("--positive", aug.positive, "Positive index");
  a->add_option("--resolutions", aug.resolutions, "Comma-separated sides");
  a->add_option("--mixing", aug.mixing, "cutmix|mixup|none");
  a->add_option("--seed", aug.seed, "Augmentation seed");
  a->add_option("--out", aug.out, "Output directory")->required();

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "Aggregate run directories into tables");
  r->add_option("--runs", rep.runs, "Run directories")->required()->default_str("");
  r->add_option("--metric", rep.metric, "Metric used for the ranking");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    if (err.get_exit_code() == 0) return app.exit(err);
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  }

  try {
    if (g->parsed()) run_gen(gen);
    else if (p->parsed()) {
      pre.seed_set = seed_opt->count() > 0;
      run_pretrain(pre);
    } else if (e->parsed()) run_eval(ev);
    else if (s->parsed()) run_select(sel);
    else if (a->parsed()) run_augment(aug);
    else if (r->parsed()) run_report(rep);
  } catch (const ValidationError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 1;
  } catch (const IoError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  } catch (const NumericError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 3;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return 2;
  }
  return 0;
}

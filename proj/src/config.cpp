#include "clim/config.hpp"

#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"

#include "clim/error.hpp"

namespace clim {

using nlohmann::json;

namespace {

// One JSON object being read; remembers which keys were consumed so that
// leftovers can be reported.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(name_of("") + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  Section child(const char* key) {
    seen_.insert(key);
    return Section(j_.at(key), name_of(key));
  }

  void get(const char* key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) fail(key, "an integer");
      const auto x = v->get<std::int64_t>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) fail(key, "a 32-bit integer");
      out = int(x);
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned()) fail(key, "a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) fail(key, "a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(key, "a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) fail(key, "a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::vector<int>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(key, "an array of integers");
      std::vector<int> r;
      for (const auto& e : *v) {
        if (!e.is_number_integer()) fail(key, "an array of integers");
        r.push_back(e.get<int>());
      }
      out = std::move(r);
    }
  }

  void finish() const {
    for (const auto& [k, _] : j_.items()) {
      if (!seen_.count(k)) throw ValidationError("unknown config key '" + name_of(k) + "'");
    }
  }

 private:
  std::string name_of(const std::string& key) const {
    if (path_.empty()) return key.empty() ? "config" : key;
    return key.empty() ? path_ : path_ + "." + key;
  }
  const json* take(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  [[noreturn]] void fail(const char* key, const char* expected) const {
    throw ValidationError("config key '" + name_of(key) + "' must be " + expected);
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_data(Section s, RunConfig& c) {
  s.get("path", c.data_path);
  if (s.has("synthetic")) {
    Section y = s.child("synthetic");
    auto& d = c.synthetic;
    y.get("class_count", d.class_count);
    y.get("per_class", d.per_class);
    y.get("latent_dim", d.latent_dim);
    y.get("image_side", d.image_side);
    y.get("channels", d.channels);
    y.get("blob_stddev", d.blob_stddev);
    y.get("seed", d.seed);
    y.finish();
  }
  s.finish();
}

void read_augment(Section s, AugConfig& a) {
  s.get("crop_scale_min", a.crop_scale_min);
  s.get("crop_scale_max", a.crop_scale_max);
  s.get("aspect_min", a.aspect_min);
  s.get("aspect_max", a.aspect_max);
  s.get("flip_prob", a.flip_prob);
  s.get("brightness", a.brightness);
  s.get("contrast", a.contrast);
  s.get("saturation", a.saturation);
  s.get("grayscale_prob", a.grayscale_prob);
  s.get("blur_prob", a.blur_prob);
  s.get("blur_radius_min", a.blur_radius_min);
  s.get("blur_radius_max", a.blur_radius_max);
  s.get("resolutions", a.resolutions);
  s.get("alpha", a.alpha);
  s.get("mixup_alpha", a.mixup_alpha);
  s.finish();
}

void read_encoder(Section s, EncoderDims& e) {
  std::string stem = e.stem == StemKind::mlp ? "mlp" : "conv";
  s.get("stem", stem);
  if (stem == "mlp") e.stem = StemKind::mlp;
  else if (stem == "conv") e.stem = StemKind::conv;
  else throw ValidationError("config key 'train.encoder.stem' must be \"mlp\" or \"conv\"");
  s.get("input_side", e.input_side);
  s.get("conv_channels", e.conv_channels);
  s.get("hidden", e.hidden);
  s.get("feat", e.feat);
  s.get("mlp_hidden", e.mlp_hidden);
  s.get("embed", e.embed);
  s.finish();
}

void read_train(Section s, TrainConfig& t) {
  s.get("epochs", t.epochs);
  s.get("batch_size", t.batch_size);
  s.get("lr0", t.lr0);
  s.get("sgd_momentum", t.sgd_momentum);
  s.get("weight_decay", t.weight_decay);
  s.get("key_momentum", t.key_momentum);
  s.get("warmup_epochs", t.warmup_epochs);
  std::string strategy = to_string(t.strategy), mixing = to_string(t.mixing), key_view = to_string(t.key_view);
  s.get("strategy", strategy);
  s.get("mixing", mixing);
  s.get("key_view", key_view);
  t.strategy = parse_strategy(strategy);
  t.mixing = parse_mixing(mixing);
  t.key_view = parse_key_view(key_view);
  s.get("queue_all_resolutions", t.queue_all_resolutions);
  std::string queue_init = to_string(t.queue_init);
  s.get("queue_init", queue_init);
  t.queue_init = parse_queue_init(queue_init);
  s.get("seed", t.seed);
  s.get("workers", t.workers);
  s.get("checkpoint_every", t.checkpoint_every);
  if (s.has("encoder")) read_encoder(s.child("encoder"), t.encoder);
  s.finish();
}

void read_eval(Section s, RunConfig& c) {
  auto& e = c.eval;
  s.get("epochs", e.epochs);
  s.get("lr", e.lr);
  s.get("lr_backbone", e.lr_backbone);
  s.get("momentum", e.momentum);
  s.get("weight_decay", e.weight_decay);
  s.get("batch_size", e.batch_size);
  s.get("label_fraction", e.label_fraction);
  s.get("test_fraction", e.test_fraction);
  s.get("seed", e.seed);
  s.get("knn_k", c.eval_knn_k);
  s.finish();
}

}  // namespace

void RunConfig::validate() const {
  train.validate();
  ProbeConfig e = eval;
  e.view_side = train.canonical_side();
  e.validate();
  if (eval_knn_k < 1) throw ValidationError("eval.knn_k must be >= 1");
  if (data_path.empty()) {
    if (synthetic.class_count < 1 || synthetic.per_class < 1 || synthetic.latent_dim < 1 || synthetic.image_side < 1 ||
        synthetic.channels < 1 || !(synthetic.blob_stddev >= 0)) {
      throw ValidationError("data.synthetic fields must be positive");
    }
  }
}

RunConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section root(j, "");
  if (root.has("data")) read_data(root.child("data"), c);
  if (root.has("augment")) read_augment(root.child("augment"), c.train.augment);
  if (root.has("contrastive")) {
    Section s = root.child("contrastive");
    s.get("tau", c.train.contrastive.tau);
    s.get("queue_capacity", c.train.contrastive.queue_capacity);
    s.finish();
  }
  if (root.has("neighborhood")) {
    Section s = root.child("neighborhood");
    auto& n = c.train.neighborhood;
    s.get("clusters", n.clusters);
    s.get("knn_k", n.knn_k);
    s.get("positives", n.positives);
    s.get("refresh_every", n.refresh_every);
    s.get("max_iters", n.max_iters);
    s.get("tol", n.tol);
    s.finish();
  }
  if (root.has("train")) read_train(root.child("train"), c.train);
  if (root.has("eval")) read_eval(root.child("eval"), c);
  root.finish();
  c.eval.view_side = c.train.canonical_side();
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(IoErrc::open_failed, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_json(const RunConfig& c) {
  const auto& t = c.train;
  const auto& a = t.augment;
  const auto& e = t.encoder;
  const auto& s = c.synthetic;
  json j;
  j["data"] = {{"path", c.data_path},
               {"synthetic",
                {{"class_count", s.class_count},
                 {"per_class", s.per_class},
                 {"latent_dim", s.latent_dim},
                 {"image_side", s.image_side},
                 {"channels", s.channels},
                 {"blob_stddev", s.blob_stddev},
                 {"seed", s.seed}}}};
  j["augment"] = {{"crop_scale_min", a.crop_scale_min}, {"crop_scale_max", a.crop_scale_max},
                  {"aspect_min", a.aspect_min},         {"aspect_max", a.aspect_max},
                  {"flip_prob", a.flip_prob},           {"brightness", a.brightness},
                  {"contrast", a.contrast},             {"saturation", a.saturation},
                  {"grayscale_prob", a.grayscale_prob}, {"blur_prob", a.blur_prob},
                  {"blur_radius_min", a.blur_radius_min}, {"blur_radius_max", a.blur_radius_max},
                  {"resolutions", a.resolutions},       {"alpha", a.alpha},
                  {"mixup_alpha", a.mixup_alpha}};
  j["contrastive"] = {{"tau", t.contrastive.tau}, {"queue_capacity", t.contrastive.queue_capacity}};
  const auto& n = t.neighborhood;
  j["neighborhood"] = {{"clusters", n.clusters},           {"knn_k", n.knn_k},         {"positives", n.positives},
                       {"refresh_every", n.refresh_every}, {"max_iters", n.max_iters}, {"tol", n.tol}};
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"lr0", t.lr0},
                {"sgd_momentum", t.sgd_momentum},
                {"weight_decay", t.weight_decay},
                {"key_momentum", t.key_momentum},
                {"warmup_epochs", t.warmup_epochs},
                {"strategy", to_string(t.strategy)},
                {"mixing", to_string(t.mixing)},
                {"key_view", to_string(t.key_view)},
                {"queue_all_resolutions", t.queue_all_resolutions},
                {"queue_init", to_string(t.queue_init)},
                {"seed", t.seed},
                {"workers", t.workers},
                {"checkpoint_every", t.checkpoint_every},
                {"encoder",
                 {{"stem", e.stem == StemKind::mlp ? "mlp" : "conv"},
                  {"input_side", e.input_side},
                  {"conv_channels", e.conv_channels},
                  {"hidden", e.hidden},
                  {"feat", e.feat},
                  {"mlp_hidden", e.mlp_hidden},
                  {"embed", e.embed}}}};
  const auto& p = c.eval;
  j["eval"] = {{"epochs", p.epochs},
               {"lr", p.lr},
               {"lr_backbone", p.lr_backbone},
               {"momentum", p.momentum},
               {"weight_decay", p.weight_decay},
               {"batch_size", p.batch_size},
               {"label_fraction", p.label_fraction},
               {"test_fraction", p.test_fraction},
               {"seed", p.seed},
               {"knn_k", c.eval_knn_k}};
  return j.dump(2) + "\n";
}

void save_config(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError(IoErrc::open_failed, "cannot write " + path.string());
  out << to_json(cfg);
  if (!out) throw IoError(IoErrc::write_failed, path.string());
}

Dataset load_dataset(const std::string& path, const SyntheticSpec& fallback) {
  if (path.empty()) return generate_synthetic(fallback);
  if (std::filesystem::is_directory(path)) return load_ppm_dir(path);
  return load_tensor_file(path);
}

}  // namespace clim

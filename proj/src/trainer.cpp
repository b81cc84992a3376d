#include "clim/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <thread>

#include "clim/checkpoint.hpp"
#include "clim/error.hpp"
#include "clim/evaluation.hpp"

namespace clim {

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::clim: return "clim";
    case Strategy::instance: return "instance";
    case Strategy::random: return "random";
    case Strategy::knn: return "knn";
    case Strategy::kmeans: return "kmeans";
    case Strategy::knn_and_kmeans: return "knn_and_kmeans";
    case Strategy::center_wise: return "center_wise";
  }
  return "?";
}

const char* to_string(Mixing m) {
  switch (m) {
    case Mixing::cutmix: return "cutmix";
    case Mixing::mixup: return "mixup";
    case Mixing::none: return "none";
  }
  return "?";
}

const char* to_string(KeyView k) { return k == KeyView::augmented ? "augmented" : "clean"; }

Strategy parse_strategy(const std::string& s) {
  for (Strategy v : {Strategy::clim, Strategy::instance, Strategy::random, Strategy::knn, Strategy::kmeans,
                     Strategy::knn_and_kmeans, Strategy::center_wise}) {
    if (s == to_string(v)) return v;
  }
  if (s == "knn+kmeans") return Strategy::knn_and_kmeans;
  throw ValidationError("unknown strategy '" + s +
                        "' (expected clim, instance, random, knn, kmeans, knn_and_kmeans or center_wise)");
}

Mixing parse_mixing(const std::string& s) {
  for (Mixing v : {Mixing::cutmix, Mixing::mixup, Mixing::none}) {
    if (s == to_string(v)) return v;
  }
  throw ValidationError("unknown mixing '" + s + "' (expected cutmix, mixup or none)");
}

KeyView parse_key_view(const std::string& s) {
  if (s == "augmented") return KeyView::augmented;
  if (s == "clean") return KeyView::clean;
  throw ValidationError("unknown key view '" + s + "' (expected augmented or clean)");
}

const char* to_string(QueueInit q) { return q == QueueInit::data ? "data" : "random"; }

QueueInit parse_queue_init(const std::string& s) {
  if (s == "data") return QueueInit::data;
  if (s == "random") return QueueInit::random;
  throw ValidationError("unknown queue init '" + s + "' (expected data or random)");
}

bool uses_neighborhood(Strategy s) { return s != Strategy::instance && s != Strategy::random; }

void TrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("train.epochs must be >= 0");
  if (batch_size < 1) throw ValidationError("train.batch_size must be >= 1");
  if (!(lr0 >= 0) || !std::isfinite(lr0)) throw ValidationError("train.lr0 must be finite and >= 0");
  if (!(sgd_momentum >= 0 && sgd_momentum < 1)) throw ValidationError("train.sgd_momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) throw ValidationError("train.weight_decay must be >= 0");
  if (!(key_momentum >= 0 && key_momentum < 1)) throw ValidationError("train.key_momentum must be in [0, 1)");
  if (workers < 1) throw ValidationError("train.workers must be >= 1");
  if (checkpoint_every < 0) throw ValidationError("train.checkpoint_every must be >= 0");
  encoder.validate();
  augment.validate();
  contrastive.validate();
  neighborhood.validate();
  if (contrastive.queue_capacity < 1) throw ValidationError("contrastive.queue_capacity must be >= 1");
}

double cosine_lr(double lr0, double epoch, double total) {
  if (total <= 0) return lr0;
  const double t = std::clamp(epoch / total, 0.0, 1.0);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename Scalar>
void sgd_step(EncoderParams<Scalar>& params, const ParamGrads<Scalar>& grads, ParamGrads<Scalar>& velocity, double lr,
              double momentum, double weight_decay) {
  if (!params.same_shape(grads) || !params.same_shape(velocity)) {
    throw ValidationError("sgd_step: params, grads and velocity must have the same shapes");
  }
  const Scalar m = Scalar(momentum), wd = Scalar(weight_decay), eta = Scalar(lr);
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    velocity.weights[l] = m * velocity.weights[l] + (grads.weights[l] + wd * params.weights[l]);
    params.weights[l] -= eta * velocity.weights[l];
    velocity.biases[l] = m * velocity.biases[l] + (grads.biases[l] + wd * params.biases[l]);
    params.biases[l] -= eta * velocity.biases[l];
  }
  ++params.version;
}

template void sgd_step<float>(EncoderParams<float>&, const ParamGrads<float>&, ParamGrads<float>&, double, double,
                              double);
template void sgd_step<double>(EncoderParams<double>&, const ParamGrads<double>&, ParamGrads<double>&, double, double,
                               double);

namespace {

bool same_params(const ParamsD& a, const ParamsD& b) {
  return a.dims == b.dims && a.weights == b.weights && a.biases == b.biases;
}

// Runs f(i) for i in [0, n) on `workers` threads. Each index is handled by
// exactly one thread and writes only its own slot, so results do not depend on
// the worker count.
template <typename F>
void parallel_for(int n, int workers, F&& f) {
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> threads;
  threads.reserve(std::size_t(workers));
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (int i = w; i < n; i += workers) f(i);
      } catch (...) {
        errors[std::size_t(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Per-anchor inputs for one step.
struct AnchorViews {
  int positive = 0;
  std::vector<Image> queries;
  std::vector<double> lambdas;
  std::vector<Image> anchor_keys;  // empty when the positive keys double as anchor keys
  std::vector<Image> pos_keys;
  Image enqueue_key;  // only used for mixing none with a distinct positive
  bool extra_enqueue = false;
};

std::vector<Image> key_views(Rng& rng, const Image& img, const TrainConfig& cfg) {
  std::vector<Image> out;
  const auto& res = cfg.augment.resolutions;
  if (cfg.key_view == KeyView::clean) {
    for (int r : res) out.push_back(rerender(img, full_crop(img.height, img.width, r), r));
    return out;
  }
  const AugmentPlan plan = sample_plan(rng, img.height, img.width, cfg.augment, res.front());
  for (int r : res) out.push_back(render_plan(img, plan, r));
  return out;
}

}  // namespace

bool TrainState::operator==(const TrainState& o) const {
  return step == o.step && epoch == o.epoch && same_params(params, o.params) && same_params(key.params, o.key.params) &&
         key.momentum == o.key.momentum && queue == o.queue && same_params(velocity, o.velocity) && rng == o.rng &&
         has_neighborhood == o.has_neighborhood && pools == o.pools && selected_sizes == o.selected_sizes &&
         neighborhood.bank.vectors == o.neighborhood.bank.vectors &&
         neighborhood.model.assignments == o.neighborhood.model.assignments;
}

TrainState init_state(const Dataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (ds.empty()) throw ValidationError("pretrain: dataset is empty");
  EncoderDims dims = cfg.encoder;
  dims.channels = ds.channels();
  dims.validate();
  TrainState s;
  s.rng = Rng(cfg.seed);
  Rng init = s.rng.split("init");
  s.params = init_params<double>(init, dims);
  s.key = make_key_encoder(s.params, cfg.key_momentum);
  Rng qrng = s.rng.split("queue");
  const int cap = cfg.contrastive.queue_capacity;
  if (cfg.queue_init == QueueInit::random) {
    s.queue = NegativeQueue<double>::random(cap, dims.embed, qrng);
  } else {
    MatrixXd keys(dims.embed, cap);
    const int side = cfg.canonical_side();
    constexpr int kChunk = 256;
    std::vector<Image> views;
    for (int start = 0; start < cap; start += kChunk) {
      const int end = std::min(cap, start + kChunk);
      views.clear();
      for (int j = start; j < end; ++j) {
        const Image& img = ds.images[std::size_t(qrng.uniform_int(0, std::int64_t(ds.size()) - 1))];
        const AugmentPlan plan = sample_plan(qrng, img.height, img.width, cfg.augment, side);
        views.push_back(render_plan(img, plan, side));
      }
      keys.middleCols(start, end - start) = forward<double>(s.key.params, views).embeddings;
    }
    s.queue = NegativeQueue<double>::primed(keys);
  }
  s.velocity = zeros_like(s.params);
  return s;
}

std::string format_metrics(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld\t%d\t%.8g\t%.8g\t%d\t%.6g", static_cast<long long>(m.step), m.epoch, m.lr,
                m.loss, m.queue_size, m.mean_omega_p);
  return buf;
}

Strategy strategy_for_epoch(const TrainConfig& cfg, int epoch) {
  return epoch < cfg.resolved_warmup() ? Strategy::instance : cfg.strategy;
}

void rebuild_pools(TrainState& state, const Dataset& ds, const TrainConfig& cfg, Strategy strategy, int refresh_index) {
  const int n = int(ds.size());
  if (n < 2) throw ValidationError("neighborhood strategies need at least two samples");
  NeighborhoodConfig ncfg = cfg.neighborhood;
  ncfg.refresh_every = 1;
  refresh(state.neighborhood, state.key.params, ds, refresh_index, ncfg, state.rng.split("kmeans"),
          cfg.canonical_side());
  state.has_neighborhood = true;
  const int k = std::min(cfg.neighborhood.knn_k, n - 1);
  state.pools.assign(std::size_t(n), {});
  state.selected_sizes.assign(std::size_t(n), 0);
  const Rng pool_rng = state.rng.split("pools").split(std::uint64_t(refresh_index));
  parallel_for(n, cfg.workers, [&](int a) {
    SelectionResult sel = select_positives(state.neighborhood.bank, state.neighborhood.model, a, k);
    std::vector<int> set;
    switch (strategy) {
      case Strategy::knn:
        for (const auto& nb : sel.omega2) set.push_back(nb.index);
        break;
      case Strategy::kmeans:
        for (int i : sel.omega1)
          if (i != a) set.push_back(i);
        break;
      case Strategy::knn_and_kmeans:
        for (const auto& nb : sel.omega2)
          if (std::binary_search(sel.omega1.begin(), sel.omega1.end(), nb.index)) set.push_back(nb.index);
        break;
      default:
        set = sel.omega_p;
        break;
    }
    state.selected_sizes[std::size_t(a)] = int(set.size());
    sel.omega_p = std::move(set);
    Rng r = pool_rng.split(std::uint64_t(a));
    state.pools[std::size_t(a)] = sample_positives(r, sel, cfg.neighborhood.positives, k);
  });
}

StepMetrics train_step(TrainState& state, const Dataset& ds, const TrainConfig& cfg, std::span<const int> anchors,
                       double lr, Strategy strategy) {
  const int B = int(anchors.size());
  if (B == 0) throw ValidationError("train_step: empty batch");
  const int n = int(ds.size());
  const int R = int(cfg.augment.resolutions.size());
  if (uses_neighborhood(strategy) && int(state.pools.size()) != n) {
    throw ValidationError("train_step: positive pools not built for this strategy");
  }
  const Rng step_rng = state.rng.split("step").split(std::uint64_t(state.step));

  std::vector<AnchorViews> work(static_cast<std::size_t>(B));
  double omega_sum = 0;
  for (int i = 0; i < B; ++i) {
    const int a = anchors[std::size_t(i)];
    if (a < 0 || a >= n) throw ValidationError("train_step: anchor index out of range");
    if (uses_neighborhood(strategy)) omega_sum += state.selected_sizes[std::size_t(a)];
  }

  parallel_for(B, cfg.workers, [&](int i) {
    const int a = anchors[std::size_t(i)];
    Rng rng = step_rng.split(std::uint64_t(i));
    AnchorViews& w = work[std::size_t(i)];
    switch (strategy) {
      case Strategy::instance: w.positive = a; break;
      case Strategy::random: {
        if (n < 2) {
          w.positive = a;
          break;
        }
        const int r = int(rng.uniform_int(0, n - 2));
        w.positive = r >= a ? r + 1 : r;
        break;
      }
      default: {
        const auto& pool = state.pools[std::size_t(a)];
        w.positive = pool[std::size_t(rng.uniform_int(0, std::int64_t(pool.size()) - 1))];
        break;
      }
    }
    const Image& anchor = ds.images[std::size_t(a)];
    const Image& pos = ds.images[std::size_t(w.positive)];
    ViewSet vs = make_views(rng, anchor, pos, cfg.augment, cfg.mixing);
    for (auto& v : vs.views) {
      w.queries.push_back(std::move(v.image));
      // With no mixing the query is the anchor view and the whole loss goes to
      // the positive key.
      w.lambdas.push_back(cfg.mixing == Mixing::none ? 0.0 : v.lambda_realized);
    }
    w.pos_keys = key_views(rng, pos, cfg);
    if (w.positive != a) {
      if (cfg.mixing != Mixing::none) {
        w.anchor_keys = key_views(rng, anchor, cfg);
      } else {
        std::vector<Image> k = key_views(rng, anchor, cfg);
        w.enqueue_key = std::move(k.front());
        w.extra_enqueue = true;
      }
    }
  });

  // Gather query and key images in a fixed order.
  std::vector<Image> qimgs;
  qimgs.reserve(std::size_t(B * R));
  std::vector<Image> kimgs;
  std::vector<std::vector<int>> akey_idx(static_cast<std::size_t>(B)), pkey_idx(static_cast<std::size_t>(B));
  std::vector<int> extra_idx(std::size_t(B), -1);
  for (int i = 0; i < B; ++i) {
    auto& w = work[std::size_t(i)];
    for (auto& q : w.queries) qimgs.push_back(std::move(q));
    for (auto& k : w.pos_keys) {
      pkey_idx[std::size_t(i)].push_back(int(kimgs.size()));
      kimgs.push_back(std::move(k));
    }
    if (!w.anchor_keys.empty()) {
      for (auto& k : w.anchor_keys) {
        akey_idx[std::size_t(i)].push_back(int(kimgs.size()));
        kimgs.push_back(std::move(k));
      }
    } else {
      akey_idx[std::size_t(i)] = pkey_idx[std::size_t(i)];
    }
    if (w.extra_enqueue) {
      extra_idx[std::size_t(i)] = int(kimgs.size());
      kimgs.push_back(std::move(w.enqueue_key));
    }
  }

  const MatrixXd keys = forward<double>(state.key.params, kimgs).embeddings;
  auto fwd = forward<double>(state.params, qimgs);

  const double tau = cfg.contrastive.tau;
  const double pair_scale = 1.0 / double(R * R);
  MatrixXd grad_q = MatrixXd::Zero(fwd.embeddings.rows(), fwd.embeddings.cols());
  std::vector<double> losses(static_cast<std::size_t>(B));
  parallel_for(B, cfg.workers, [&](int i) {
    std::vector<VectorXd> q, ka, kp;
    for (int r = 0; r < R; ++r) {
      q.emplace_back(fwd.embeddings.col(i * R + r));
      ka.emplace_back(keys.col(akey_idx[std::size_t(i)][std::size_t(r)]));
      kp.emplace_back(keys.col(pkey_idx[std::size_t(i)][std::size_t(r)]));
    }
    const auto lg = multi_res_loss<double>(q, work[std::size_t(i)].lambdas, ka, kp, state.queue, tau);
    losses[std::size_t(i)] = lg.loss * pair_scale;
    for (int r = 0; r < R; ++r) grad_q.col(i * R + r) = lg.grads[std::size_t(r)] * (pair_scale / double(B));
  });

  double loss = 0;
  for (double l : losses) loss += l;
  loss /= double(B);
  if (!std::isfinite(loss)) {
    std::ostringstream msg;
    msg << "non-finite loss at step " << state.step << " (epoch " << state.epoch << ", lr " << lr << ")";
    throw NumericError(msg.str());
  }

  const ParamGrads<double> grads = backward<double>(state.params, fwd.acts, grad_q);
  if (!grads.all_finite()) throw NumericError("non-finite gradient at step " + std::to_string(state.step));
  sgd_step(state.params, grads, state.velocity, lr, cfg.sgd_momentum, cfg.weight_decay);
  momentum_update(state.key, state.params);

  // Canonical-resolution anchor keys enter the queue in batch order.
  std::vector<VectorXd> push;
  for (int i = 0; i < B; ++i) {
    const int rmax = cfg.queue_all_resolutions ? R : 1;
    if (extra_idx[std::size_t(i)] >= 0) {
      push.emplace_back(keys.col(extra_idx[std::size_t(i)]));
      continue;
    }
    for (int r = 0; r < rmax; ++r) push.emplace_back(keys.col(akey_idx[std::size_t(i)][std::size_t(r)]));
  }
  state.queue.enqueue(std::span<const VectorXd>(push));

  StepMetrics m;
  m.step = state.step;
  m.epoch = state.epoch;
  m.lr = lr;
  m.loss = loss;
  m.queue_size = state.queue.enqueued();
  m.mean_omega_p = uses_neighborhood(strategy) ? omega_sum / double(B) : 0.0;
  ++state.step;
  return m;
}

PretrainResult pretrain(const Dataset& ds, const TrainConfig& cfg, const PretrainOptions& opts) {
  TrainState state = init_state(ds, cfg);
  const int n = int(ds.size());
  const int bs = std::min(cfg.batch_size, n);
  const int steps_per_epoch = n / bs;
  const int warmup = cfg.resolved_warmup();
  const int refresh_every = cfg.neighborhood.refresh_every;
  const bool labeled = ds.has_labels() && ds.class_count.has_value();

  std::ofstream metrics_out, epochs_out;
  if (opts.out_dir) {
    std::filesystem::create_directories(*opts.out_dir);
    metrics_out.open(*opts.out_dir / "metrics.tsv");
    epochs_out.open(*opts.out_dir / "epochs.tsv");
    if (!metrics_out || !epochs_out) throw IoError(IoErrc::open_failed, "cannot write logs in " + opts.out_dir->string());
    metrics_out << "step\tepoch\tlr\tloss\tqueue_size\tmean_omega_p\n";
    epochs_out << "epoch\tstrategy\tmean_loss\tintra_sim\n";
  }

  PretrainResult result;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    state.epoch = epoch;
    const Strategy strat = strategy_for_epoch(cfg, epoch);
    if (uses_neighborhood(strat) && (epoch - warmup) % refresh_every == 0) {
      rebuild_pools(state, ds, cfg, strat, (epoch - warmup) / refresh_every);
    }
    for (int i = 0; i < n; ++i) order[std::size_t(i)] = i;
    Rng perm = state.rng.split("epoch").split(std::uint64_t(epoch));
    for (int i = n - 1; i > 0; --i) std::swap(order[std::size_t(i)], order[std::size_t(perm.uniform_int(0, i))]);

    double loss_sum = 0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      const double lr = cosine_lr(cfg.lr0, epoch + double(s) / steps_per_epoch, cfg.epochs);
      const std::span<const int> batch(order.data() + std::size_t(s) * std::size_t(bs), std::size_t(bs));
      const StepMetrics m = train_step(state, ds, cfg, batch, lr, strat);
      loss_sum += m.loss;
      result.log.push_back(m);
      if (metrics_out.is_open()) metrics_out << format_metrics(m) << "\n";
      if (opts.on_step) opts.on_step(m);
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.mean_loss = loss_sum / steps_per_epoch;
    const bool last = epoch + 1 == cfg.epochs;
    if (opts.track_intra_sim && labeled && ((epoch + 1) % refresh_every == 0 || last)) {
      em.intra_sim = intra_class_similarity(state.params, ds, cfg.canonical_side()).mean;
    }
    result.epochs.push_back(em);
    if (epochs_out.is_open()) {
      epochs_out << epoch << '\t' << to_string(strat) << '\t' << em.mean_loss << '\t';
      if (em.intra_sim) epochs_out << *em.intra_sim;
      else epochs_out << "-";
      epochs_out << "\n";
      epochs_out.flush();
      metrics_out.flush();
    }
    if (opts.out_dir && (last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0))) {
      save_checkpoint({state.params, cfg.canonical_side()},
                      *opts.out_dir / ("ckpt_epoch" + std::to_string(epoch + 1) + ".clim"));
    }
  }
  if (opts.out_dir && cfg.epochs == 0) {
    save_checkpoint({state.params, cfg.canonical_side()}, *opts.out_dir / "ckpt_epoch0.clim");
  }
  result.params = state.params;
  return result;
}

}  // namespace clim

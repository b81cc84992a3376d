#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "clim/augmentation.hpp"
#include "clim/contrastive.hpp"
#include "clim/dataset.hpp"
#include "clim/encoder.hpp"
#include "clim/neighborhood.hpp"

namespace clim {

/// How an anchor's positive is chosen. `clim` and `center_wise` both use the
/// center-wise local rule; `instance` uses the anchor itself.
enum class Strategy { clim, instance, random, knn, kmeans, knn_and_kmeans, center_wise };

/// What the key encoder sees: an independently augmented view, or the clean
/// full image at the key resolution.
enum class KeyView { augmented, clean };

/// Initial queue contents: key-encoder embeddings of augmented views of
/// randomly drawn samples, or random unit vectors.
enum class QueueInit { data, random };

const char* to_string(Strategy s);
const char* to_string(Mixing m);
const char* to_string(KeyView k);
const char* to_string(QueueInit q);
Strategy parse_strategy(const std::string& s);
Mixing parse_mixing(const std::string& s);
KeyView parse_key_view(const std::string& s);
QueueInit parse_queue_init(const std::string& s);

bool uses_neighborhood(Strategy s);

struct TrainConfig {
  int epochs = 60;
  int batch_size = 64;
  double lr0 = 0.06;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  double key_momentum = 0.99;
  int warmup_epochs = -1;  // -1 = 20% of epochs
  Strategy strategy = Strategy::clim;
  Mixing mixing = Mixing::cutmix;
  KeyView key_view = KeyView::augmented;
  bool queue_all_resolutions = false;
  QueueInit queue_init = QueueInit::data;
  std::uint64_t seed = 0;
  int workers = 1;
  int checkpoint_every = 0;  // 0 = final checkpoint only
  EncoderDims encoder;
  AugConfig augment;
  ContrastiveConfig contrastive;
  NeighborhoodConfig neighborhood;

  int resolved_warmup() const { return warmup_epochs >= 0 ? std::min(warmup_epochs, epochs) : epochs / 5; }
  /// Canonical resolution: the first entry of augment.resolutions (0 if none).
  int canonical_side() const { return augment.resolutions.empty() ? 0 : augment.resolutions.front(); }
  void validate() const;
};

/// lr0 * 0.5 * (1 + cos(pi * epoch / total))
double cosine_lr(double lr0, double epoch, double total);

/// v <- momentum * v + (grad + weight_decay * theta); theta <- theta - lr * v
template <typename Scalar>
void sgd_step(EncoderParams<Scalar>& params, const ParamGrads<Scalar>& grads, ParamGrads<Scalar>& velocity, double lr,
              double momentum, double weight_decay);

struct TrainState {
  std::int64_t step = 0;
  int epoch = 0;
  ParamsD params;
  KeyEncoder<double> key;
  NegativeQueue<double> queue{1, 1};
  ParamGrads<double> velocity;
  Rng rng;
  Neighborhood neighborhood;
  bool has_neighborhood = false;
  /// Candidate positives per anchor, rebuilt at each refresh.
  std::vector<std::vector<int>> pools;
  /// Size of the strategy's selected set per anchor (|Omega_p| for center-wise).
  std::vector<int> selected_sizes;

  bool operator==(const TrainState& o) const;
};

TrainState init_state(const Dataset& ds, const TrainConfig& cfg);

struct StepMetrics {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  int queue_size = 0;
  double mean_omega_p = 0;
};

/// Formats one metrics-log line: step epoch lr loss queue_size mean_omega_p.
std::string format_metrics(const StepMetrics& m);

/// Effective strategy for an epoch (instance during warmup).
Strategy strategy_for_epoch(const TrainConfig& cfg, int epoch);

/// Rebuilds the bank, clusters and per-anchor positive pools from the key encoder.
void rebuild_pools(TrainState& state, const Dataset& ds, const TrainConfig& cfg, Strategy strategy, int refresh_index);

/// One optimisation step on the given anchors. lr is the learning rate to use.
StepMetrics train_step(TrainState& state, const Dataset& ds, const TrainConfig& cfg, std::span<const int> anchors,
                       double lr, Strategy strategy);

struct EpochMetrics {
  int epoch = 0;
  double mean_loss = 0;
  std::optional<double> intra_sim;
};

struct PretrainResult {
  ParamsD params;
  std::vector<StepMetrics> log;
  std::vector<EpochMetrics> epochs;
};

struct PretrainOptions {
  std::optional<std::filesystem::path> out_dir;  // checkpoints + logs when set
  bool track_intra_sim = true;
  std::function<void(const StepMetrics&)> on_step;
};

PretrainResult pretrain(const Dataset& ds, const TrainConfig& cfg, const PretrainOptions& opts = {});

}  // namespace clim

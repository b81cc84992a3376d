#pragma once

#include <vector>

#include "clim/dataset.hpp"
#include "clim/encoder.hpp"
#include "clim/numerics.hpp"

namespace clim {

/// n x d embeddings, row i belongs to dataset position i.
struct EmbeddingBank {
  MatrixXd vectors;
  int epoch_stamp = -1;

  int size() const { return int(vectors.rows()); }
  int dim() const { return int(vectors.cols()); }
};

struct ClusterModel {
  MatrixXd centers;              // m x d
  std::vector<int> assignments;  // per sample, index into centers
  double inertia = 0;            // sum of squared distances to assigned centers
  std::vector<double> inertia_history;  // after each assignment step
  int iterations = 0;
  int epoch_stamp = -1;

  int cluster_count() const { return int(centers.rows()); }
  auto center_of(int sample) const { return centers.row(assignments[std::size_t(sample)]); }
};

/// Lloyd's algorithm with k-means++ seeding. Stops after max_iters, when the
/// assignments stop changing, or when the relative inertia improvement drops
/// below tol. Empty clusters are re-seeded at the point farthest from its centre.
ClusterModel kmeans_fit(Rng& rng, const EmbeddingBank& bank, int m, int max_iters = 100, double tol = 1e-6);

struct Neighbor {
  int index = 0;
  double distance = 0;
};

/// Exact brute-force search: the k nearest rows to the anchor (anchor itself
/// excluded), ascending by L2 distance, ties to the lower index.
std::vector<Neighbor> knn_search_with_distances(const EmbeddingBank& bank, int anchor, int k);
std::vector<int> knn_search(const EmbeddingBank& bank, int anchor, int k);

struct SelectionResult {
  int anchor = 0;
  std::vector<int> omega1;  // same cluster as the anchor (anchor included), ascending
  std::vector<Neighbor> omega2;  // kNN, ascending by distance
  std::vector<int> omega_p;      // cluster peers in the kNN set no farther from the centre than the anchor
  std::vector<int> chosen;       // filled by the trainer from sample_positives
  double anchor_center_distance = 0;
};

/// Throws NumericError when the model was fitted on a different bank epoch.
SelectionResult select_positives(const EmbeddingBank& bank, const ClusterModel& model, int anchor, int k);

/// P positives: a uniform sample of omega_p when it is large enough,
/// otherwise all of omega_p topped up with the nearest remaining kNN members,
/// then padded by resampling the kNN set with replacement.
std::vector<int> sample_positives(Rng& rng, const SelectionResult& sel, int P, int k);

struct NeighborhoodConfig {
  int clusters = 0;  // 0 = max(2, n / 128)
  int knn_k = 40;
  int positives = 10;
  int refresh_every = 5;
  int max_iters = 100;
  double tol = 1e-6;

  int resolved_clusters(int n) const { return clusters > 0 ? clusters : std::max(2, n / 128); }
  void validate() const;
};

/// Embeds every image with the given encoder after a deterministic full-image
/// resize to `side` (no stochastic augmentation).
EmbeddingBank compute_bank(const ParamsD& params, const Dataset& ds, int side, int epoch_stamp);

struct Neighborhood {
  EmbeddingBank bank;
  ClusterModel model;
};

/// On refresh epochs (epoch % refresh_every == 0) recomputes the bank with the
/// given (key) encoder, refits k-means with a child of `rng` labelled by the
/// epoch, and returns true. Otherwise leaves `state` untouched.
bool refresh(Neighborhood& state, const ParamsD& params, const Dataset& ds, int epoch, const NeighborhoodConfig& cfg,
             const Rng& rng, int side);

}  // namespace clim

#include "clim/neighborhood.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "clim/augmentation.hpp"
#include "clim/error.hpp"

namespace clim {

void NeighborhoodConfig::validate() const {
  if (clusters < 0) throw ValidationError("neighborhood.clusters must be >= 0 (0 = auto)");
  if (knn_k < 1) throw ValidationError("neighborhood.knn_k must be >= 1");
  if (positives < 1) throw ValidationError("neighborhood.positives must be >= 1");
  if (refresh_every < 1) throw ValidationError("neighborhood.refresh_every must be >= 1");
  if (max_iters < 1) throw ValidationError("neighborhood.max_iters must be >= 1");
  if (!(tol >= 0)) throw ValidationError("neighborhood.tol must be >= 0");
}

namespace {

// Nearest center, ties to the lower center index.
std::pair<int, double> nearest_center(const MatrixXd& centers, const EmbeddingBank& bank, int i) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < centers.rows(); ++c) {
    const double d = squared_distance(bank.vectors.row(i), centers.row(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return {best, best_d};
}

MatrixXd kmeanspp_seed(Rng& rng, const EmbeddingBank& bank, int m) {
  const int n = bank.size();
  MatrixXd centers(m, bank.dim());
  std::vector<double> d2(std::size_t(n), std::numeric_limits<double>::infinity());
  int chosen = int(rng.uniform_int(0, n - 1));
  for (int c = 0; c < m; ++c) {
    centers.row(c) = bank.vectors.row(chosen);
    double total = 0;
    for (int i = 0; i < n; ++i) {
      d2[std::size_t(i)] = std::min(d2[std::size_t(i)], squared_distance(bank.vectors.row(i), centers.row(c)));
      total += d2[std::size_t(i)];
    }
    if (c + 1 == m) break;
    if (total <= 0) {
      // All remaining mass is zero: take the lowest-index point not yet used as a centre.
      chosen = (chosen + 1) % n;
      continue;
    }
    double target = rng.uniform() * total;
    chosen = n - 1;
    for (int i = 0; i < n; ++i) {
      target -= d2[std::size_t(i)];
      if (target < 0 && d2[std::size_t(i)] > 0) {
        chosen = i;
        break;
      }
    }
  }
  return centers;
}

}  // namespace

ClusterModel kmeans_fit(Rng& rng, const EmbeddingBank& bank, int m, int max_iters, double tol) {
  const int n = bank.size();
  if (m < 1) throw ValidationError("kmeans_fit: m must be >= 1");
  if (m > n) throw ValidationError("kmeans_fit: m (" + std::to_string(m) + ") exceeds n (" + std::to_string(n) + ")");
  if (max_iters < 1) throw ValidationError("kmeans_fit: max_iters must be >= 1");

  ClusterModel model;
  model.epoch_stamp = bank.epoch_stamp;
  model.centers = kmeanspp_seed(rng, bank, m);
  model.assignments.assign(std::size_t(n), -1);
  std::vector<double> dist(static_cast<std::size_t>(n));

  for (int iter = 0; iter < max_iters; ++iter) {
    // Assignment step.
    bool changed = false;
    double inertia = 0;
    for (int i = 0; i < n; ++i) {
      const auto [c, d] = nearest_center(model.centers, bank, i);
      if (model.assignments[std::size_t(i)] != c) changed = true;
      model.assignments[std::size_t(i)] = c;
      dist[std::size_t(i)] = d;
      inertia += d;
    }
    if (!model.inertia_history.empty()) {
      const double prev = model.inertia_history.back();
      // Lloyd steps never increase the objective; allow only rounding noise.
      if (inertia > prev + 1e-12 * std::max(1.0, prev)) {
        throw NumericError("kmeans_fit: inertia increased (" + std::to_string(prev) + " -> " +
                           std::to_string(inertia) + ")");
      }
    }
    model.inertia_history.push_back(inertia);
    model.inertia = inertia;
    model.iterations = iter + 1;
    if (iter > 0) {
      const double prev = model.inertia_history[model.inertia_history.size() - 2];
      if (!changed || prev - inertia <= tol * std::max(prev, std::numeric_limits<double>::min())) break;
    }
    if (iter + 1 == max_iters) break;

    // Update step.
    MatrixXd sums = MatrixXd::Zero(m, bank.dim());
    std::vector<int> counts(std::size_t(m), 0);
    for (int i = 0; i < n; ++i) {
      sums.row(model.assignments[std::size_t(i)]) += bank.vectors.row(i);
      ++counts[std::size_t(model.assignments[std::size_t(i)])];
    }
    std::vector<bool> taken(std::size_t(n), false);
    std::vector<int> remaining = counts;
    for (int c = 0; c < m; ++c) {
      if (counts[std::size_t(c)] > 0) {
        model.centers.row(c) = sums.row(c) / double(counts[std::size_t(c)]);
        continue;
      }
      // Empty cluster: move it onto the point farthest from its own centre.
      int far = -1;
      for (int i = 0; i < n; ++i) {
        if (taken[std::size_t(i)] || remaining[std::size_t(model.assignments[std::size_t(i)])] <= 1) continue;
        if (far < 0 || dist[std::size_t(i)] > dist[std::size_t(far)]) far = i;
      }
      if (far >= 0) {
        taken[std::size_t(far)] = true;
        model.centers.row(c) = bank.vectors.row(far);
        --remaining[std::size_t(model.assignments[std::size_t(far)])];
      }
    }
  }

  // Final consistency: every point sits at its nearest centre.
  double inertia = 0;
  for (int i = 0; i < n; ++i) {
    const auto [c, d] = nearest_center(model.centers, bank, i);
    if (c != model.assignments[std::size_t(i)]) {
      model.assignments[std::size_t(i)] = c;
    }
    inertia += d;
  }
  if (inertia > model.inertia + 1e-12 * std::max(1.0, model.inertia)) {
    throw NumericError("kmeans_fit: inertia increased in final assignment");
  }
  if (inertia != model.inertia) model.inertia_history.push_back(inertia);
  model.inertia = inertia;
  return model;
}

std::vector<Neighbor> knn_search_with_distances(const EmbeddingBank& bank, int anchor, int k) {
  const int n = bank.size();
  if (anchor < 0 || anchor >= n) throw ValidationError("knn_search: anchor out of range");
  if (k < 1 || k >= n) throw ValidationError("knn_search: k must satisfy 1 <= k < n");
  std::vector<std::pair<double, int>> all;
  all.reserve(std::size_t(n - 1));
  for (int i = 0; i < n; ++i) {
    if (i == anchor) continue;
    all.emplace_back(squared_distance(bank.vectors.row(anchor), bank.vectors.row(i)), i);
  }
  std::partial_sort(all.begin(), all.begin() + k, all.end());
  std::vector<Neighbor> out(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) out[std::size_t(j)] = {all[std::size_t(j)].second, std::sqrt(all[std::size_t(j)].first)};
  return out;
}

std::vector<int> knn_search(const EmbeddingBank& bank, int anchor, int k) {
  const auto nn = knn_search_with_distances(bank, anchor, k);
  std::vector<int> out;
  out.reserve(nn.size());
  for (const auto& x : nn) out.push_back(x.index);
  return out;
}

SelectionResult select_positives(const EmbeddingBank& bank, const ClusterModel& model, int anchor, int k) {
  if (model.epoch_stamp != bank.epoch_stamp) {
    throw NumericError("select_positives: cluster model is stale (fitted at epoch " +
                       std::to_string(model.epoch_stamp) + ", bank at epoch " + std::to_string(bank.epoch_stamp) + ")");
  }
  if (int(model.assignments.size()) != bank.size()) throw ValidationError("select_positives: model/bank size mismatch");
  SelectionResult sel;
  sel.anchor = anchor;
  sel.omega2 = knn_search_with_distances(bank, anchor, k);
  const int cluster = model.assignments[std::size_t(anchor)];
  for (int i = 0; i < bank.size(); ++i) {
    if (model.assignments[std::size_t(i)] == cluster) sel.omega1.push_back(i);
  }
  const auto center = model.centers.row(cluster);
  const double anchor_d2 = squared_distance(bank.vectors.row(anchor), center);
  sel.anchor_center_distance = std::sqrt(anchor_d2);
  for (const auto& nb : sel.omega2) {
    if (model.assignments[std::size_t(nb.index)] != cluster) continue;
    if (squared_distance(bank.vectors.row(nb.index), center) <= anchor_d2) sel.omega_p.push_back(nb.index);
  }
  return sel;
}

std::vector<int> sample_positives(Rng& rng, const SelectionResult& sel, int P, int k) {
  if (P < 1) throw ValidationError("sample_positives: P must be >= 1");
  if (sel.omega2.empty()) throw ValidationError("sample_positives: kNN set is empty");
  const std::size_t want = std::size_t(P);
  std::vector<int> out;
  out.reserve(want);
  if (sel.omega_p.size() >= want) {
    std::vector<int> pool = sel.omega_p;
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < want; ++i) {
      const auto j = std::size_t(rng.uniform_int(std::int64_t(i), std::int64_t(pool.size() - 1)));
      std::swap(pool[i], pool[j]);
    }
    out.assign(pool.begin(), pool.begin() + std::ptrdiff_t(want));
    return out;
  }
  out = sel.omega_p;
  const std::size_t limit = std::min(sel.omega2.size(), std::size_t(std::max(k, 1)));
  for (std::size_t j = 0; j < limit && out.size() < want; ++j) {
    const int idx = sel.omega2[j].index;
    if (std::find(sel.omega_p.begin(), sel.omega_p.end(), idx) == sel.omega_p.end()) out.push_back(idx);
  }
  while (out.size() < want) {
    out.push_back(sel.omega2[std::size_t(rng.uniform_int(0, std::int64_t(limit) - 1))].index);
  }
  return out;
}

EmbeddingBank compute_bank(const ParamsD& params, const Dataset& ds, int side, int epoch_stamp) {
  EmbeddingBank bank;
  bank.epoch_stamp = epoch_stamp;
  bank.vectors.resize(Eigen::Index(ds.size()), params.dims.embed);
  constexpr std::size_t kChunk = 256;
  std::vector<Image> views;
  for (std::size_t start = 0; start < ds.size(); start += kChunk) {
    const std::size_t end = std::min(ds.size(), start + kChunk);
    views.clear();
    for (std::size_t i = start; i < end; ++i) {
      const Image& img = ds.images[i];
      views.push_back(rerender(img, full_crop(img.height, img.width, side), side));
    }
    const auto fwd = forward<double>(params, views);
    bank.vectors.middleRows(Eigen::Index(start), Eigen::Index(end - start)) = fwd.embeddings.transpose();
  }
  return bank;
}

bool refresh(Neighborhood& state, const ParamsD& params, const Dataset& ds, int epoch, const NeighborhoodConfig& cfg,
             const Rng& rng, int side) {
  cfg.validate();
  if (epoch % cfg.refresh_every != 0) return false;
  EmbeddingBank bank = compute_bank(params, ds, side, epoch);
  Rng child = rng.split(std::uint64_t(epoch));
  ClusterModel model = kmeans_fit(child, bank, std::min(cfg.resolved_clusters(bank.size()), bank.size()),
                                  cfg.max_iters, cfg.tol);
  state.bank = std::move(bank);
  state.model = std::move(model);
  return true;
}

}  // namespace clim

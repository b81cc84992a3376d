#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "clim/numerics.hpp"

namespace clim {

/// FIFO ring buffer of unit-norm key embeddings (stored as columns).
template <typename Scalar>
class NegativeQueue {
 public:
  NegativeQueue(int capacity, int dim);

  /// Queue pre-filled with capacity random unit keys; these do not count as
  /// enqueued keys.
  static NegativeQueue random(int capacity, int dim, Rng& rng);

  /// Queue pre-filled with the given unit columns (dim x capacity); like
  /// random(), these do not count as enqueued keys.
  static NegativeQueue primed(const Mat<Scalar>& keys);

  /// Appends columns in order, evicting the oldest entries beyond capacity.
  void enqueue(const Mat<Scalar>& keys);
  void enqueue(std::span<const Vec<Scalar>> keys);

  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  int size() const { return size_; }
  bool empty() const { return size_ == 0; }
  /// Keys pushed through enqueue(), capped at capacity.
  int enqueued() const { return enqueued_ < std::uint64_t(capacity_) ? int(enqueued_) : capacity_; }
  std::uint64_t enqueued_total() const { return enqueued_; }

  /// Stored keys, one column each, in storage order (dim x size).
  auto keys() const { return storage_.leftCols(size_); }
  /// Stored keys oldest first.
  Mat<Scalar> contents() const;

  bool operator==(const NegativeQueue& o) const {
    return capacity_ == o.capacity_ && dim_ == o.dim_ && size_ == o.size_ && head_ == o.head_ &&
           enqueued_ == o.enqueued_ && storage_ == o.storage_;
  }

 private:
  int capacity_;
  int dim_;
  int size_ = 0;
  int head_ = 0;
  std::uint64_t enqueued_ = 0;
  Mat<Scalar> storage_;
};

struct ContrastiveConfig {
  double tau = 0.2;
  int queue_capacity = 4096;
  void validate() const;
};

template <typename Scalar>
struct LossGrad {
  Scalar loss = 0;
  Vec<Scalar> grad;  // d loss / d q, keys held constant
};

/// -log( exp(q.k+/tau) / (exp(q.k+/tau) + sum_j exp(q.k-_j/tau)) )
template <typename Scalar>
LossGrad<Scalar> nce_loss(const Vec<Scalar>& q, const Vec<Scalar>& k_pos, const NegativeQueue<Scalar>& queue,
                          Scalar tau);

/// lam * nce(q, k_anchor) + (1 - lam) * nce(q, k_pos)
template <typename Scalar>
LossGrad<Scalar> mixed_nce_loss(const Vec<Scalar>& q_mix, const Vec<Scalar>& k_anchor, const Vec<Scalar>& k_pos,
                                Scalar lam, const NegativeQueue<Scalar>& queue, Scalar tau);

template <typename Scalar>
struct MultiResLoss {
  Scalar loss = 0;
  std::vector<Vec<Scalar>> grads;  // one per query view
};

/// Sum over all ordered (r, r') of mixed_nce_loss(q[r], k_anchor[r'], k_pos[r'], lam[r]).
/// lam[r] is the realized mixing weight of the query view at resolution r.
template <typename Scalar>
MultiResLoss<Scalar> multi_res_loss(std::span<const Vec<Scalar>> queries, std::span<const Scalar> lambdas,
                                    std::span<const Vec<Scalar>> anchor_keys, std::span<const Vec<Scalar>> pos_keys,
                                    const NegativeQueue<Scalar>& queue, Scalar tau);

/// Tolerance on |1 - ||v||| accepted for query and key inputs.
inline constexpr double kUnitNormTolerance = 1e-4;

}  // namespace clim

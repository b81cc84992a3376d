#include "clim/contrastive.hpp"

#include <cmath>

namespace clim {

void ContrastiveConfig::validate() const {
  if (!(tau > 0)) throw ValidationError("contrastive.tau must be positive");
  if (queue_capacity <= 0) throw ValidationError("contrastive.queue_capacity must be positive");
}

template <typename Scalar>
NegativeQueue<Scalar>::NegativeQueue(int capacity, int dim)
    : capacity_(capacity), dim_(dim), storage_(Mat<Scalar>::Zero(dim > 0 ? dim : 0, capacity > 0 ? capacity : 0)) {
  if (capacity <= 0 || dim <= 0) throw ValidationError("NegativeQueue: capacity and dim must be positive");
}

template <typename Scalar>
NegativeQueue<Scalar> NegativeQueue<Scalar>::random(int capacity, int dim, Rng& rng) {
  NegativeQueue q(capacity, dim);
  for (int j = 0; j < capacity; ++j) {
    Vec<double> v(dim);
    do {
      for (int i = 0; i < dim; ++i) v(i) = rng.normal();
    } while (v.norm() == 0.0);
    q.storage_.col(j) = (v / v.norm()).template cast<Scalar>();
  }
  q.size_ = capacity;
  q.head_ = 0;
  return q;
}

template <typename Scalar>
NegativeQueue<Scalar> NegativeQueue<Scalar>::primed(const Mat<Scalar>& keys) {
  NegativeQueue q(int(keys.cols()), int(keys.rows()));
  for (Eigen::Index j = 0; j < keys.cols(); ++j) {
    if (std::abs(double(keys.col(j).norm()) - 1.0) > kUnitNormTolerance) {
      throw ValidationError("NegativeQueue::primed: key " + std::to_string(j) + " is not unit norm");
    }
  }
  q.storage_ = keys;
  q.size_ = q.capacity_;
  return q;
}

namespace {
template <typename Derived>
void check_unit(const Eigen::MatrixBase<Derived>& v, const char* what) {
  const double n = double(v.norm());
  if (!std::isfinite(n) || std::abs(n - 1.0) > kUnitNormTolerance) {
    throw ValidationError(std::string(what) + ": expected a unit-norm vector (norm " + std::to_string(n) + ")");
  }
}
}  // namespace

template <typename Scalar>
void NegativeQueue<Scalar>::enqueue(const Mat<Scalar>& keys) {
  if (keys.cols() == 0) return;
  if (keys.rows() != dim_) throw ValidationError("NegativeQueue::enqueue: key dimension mismatch");
  for (Eigen::Index j = 0; j < keys.cols(); ++j) check_unit(keys.col(j), "NegativeQueue::enqueue");
  for (Eigen::Index j = 0; j < keys.cols(); ++j) {
    storage_.col(head_) = keys.col(j);
    head_ = (head_ + 1) % capacity_;
    if (size_ < capacity_) ++size_;
    ++enqueued_;
  }
}

template <typename Scalar>
void NegativeQueue<Scalar>::enqueue(std::span<const Vec<Scalar>> keys) {
  if (keys.empty()) return;
  Mat<Scalar> m(dim_, Eigen::Index(keys.size()));
  for (std::size_t j = 0; j < keys.size(); ++j) {
    if (keys[j].size() != dim_) throw ValidationError("NegativeQueue::enqueue: key dimension mismatch");
    m.col(Eigen::Index(j)) = keys[j];
  }
  enqueue(m);
}

template <typename Scalar>
Mat<Scalar> NegativeQueue<Scalar>::contents() const {
  Mat<Scalar> out(dim_, size_);
  // When not yet full the buffer was filled from column 0 onwards.
  const int start = size_ < capacity_ ? 0 : head_;
  for (int j = 0; j < size_; ++j) out.col(j) = storage_.col((start + j) % capacity_);
  return out;
}

// ---------------------------------------------------------------------------
// Losses. Every public loss goes through weighted_nce so that degenerate
// configurations reduce to each other bit-for-bit.
// ---------------------------------------------------------------------------

namespace {

template <typename Scalar>
struct WeightedPositive {
  const Vec<Scalar>* key;
  Scalar weight;
};

// sum_i w_i * nce(q, k_i) over a shared negative set, plus d/dq.
template <typename Scalar>
LossGrad<Scalar> weighted_nce(const Vec<Scalar>& q, std::span<const WeightedPositive<Scalar>> positives,
                              const NegativeQueue<Scalar>& queue, Scalar tau) {
  if (!(tau > 0)) throw ValidationError("nce_loss: tau must be positive");
  if (queue.empty()) throw ValidationError("nce_loss: negative queue is empty");
  if (q.size() != queue.dim()) throw ValidationError("nce_loss: query dimension does not match queue");
  check_unit(q, "nce_loss query");

  const auto keys = queue.keys();
  const Vec<Scalar> neg = (keys.transpose() * q) / tau;
  const Scalar neg_max = neg.maxCoeff();

  LossGrad<Scalar> out;
  out.loss = 0;
  Vec<Scalar> neg_weights = Vec<Scalar>::Zero(neg.size());
  Vec<Scalar> acc = Vec<Scalar>::Zero(q.size());
  for (const auto& p : positives) {
    const Vec<Scalar>& k = *p.key;
    if (k.size() != q.size()) throw ValidationError("nce_loss: key dimension mismatch");
    check_unit(k, "nce_loss key");
    const Scalar pos = q.dot(k) / tau;
    const Scalar shift = std::max(pos, neg_max);
    const Vec<Scalar> e = (neg.array() - shift).exp().matrix();
    const Scalar pos_e = std::exp(pos - shift);
    const Scalar z = pos_e + e.sum();
    const Scalar loss = std::log(z) + shift - pos;
    out.loss += p.weight * loss;
    acc += (p.weight * (pos_e / z - Scalar(1))) * k;
    neg_weights += (p.weight / z) * e;
  }
  acc += keys * neg_weights;
  out.grad = acc / tau;
  return out;
}

}  // namespace

template <typename Scalar>
LossGrad<Scalar> nce_loss(const Vec<Scalar>& q, const Vec<Scalar>& k_pos, const NegativeQueue<Scalar>& queue,
                          Scalar tau) {
  const WeightedPositive<Scalar> pos[] = {{&k_pos, Scalar(1)}};
  return weighted_nce<Scalar>(q, pos, queue, tau);
}

template <typename Scalar>
LossGrad<Scalar> mixed_nce_loss(const Vec<Scalar>& q_mix, const Vec<Scalar>& k_anchor, const Vec<Scalar>& k_pos,
                                Scalar lam, const NegativeQueue<Scalar>& queue, Scalar tau) {
  if (!(lam >= 0 && lam <= 1)) throw ValidationError("mixed_nce_loss: lam must be in [0,1]");
  const WeightedPositive<Scalar> pos[] = {{&k_anchor, lam}, {&k_pos, Scalar(1) - lam}};
  return weighted_nce<Scalar>(q_mix, pos, queue, tau);
}

template <typename Scalar>
MultiResLoss<Scalar> multi_res_loss(std::span<const Vec<Scalar>> queries, std::span<const Scalar> lambdas,
                                    std::span<const Vec<Scalar>> anchor_keys, std::span<const Vec<Scalar>> pos_keys,
                                    const NegativeQueue<Scalar>& queue, Scalar tau) {
  if (queries.empty()) throw ValidationError("multi_res_loss: resolution set is empty");
  if (lambdas.size() != queries.size()) throw ValidationError("multi_res_loss: one lambda per query view required");
  if (anchor_keys.empty() || anchor_keys.size() != pos_keys.size()) {
    throw ValidationError("multi_res_loss: one anchor key and one positive key per resolution required");
  }
  MultiResLoss<Scalar> out;
  out.grads.reserve(queries.size());
  std::vector<WeightedPositive<Scalar>> pos;
  pos.reserve(2 * anchor_keys.size());
  for (std::size_t r = 0; r < queries.size(); ++r) {
    const Scalar lam = lambdas[r];
    if (!(lam >= 0 && lam <= 1)) throw ValidationError("multi_res_loss: lam must be in [0,1]");
    pos.clear();
    for (std::size_t rp = 0; rp < anchor_keys.size(); ++rp) {
      pos.push_back({&anchor_keys[rp], lam});
      pos.push_back({&pos_keys[rp], Scalar(1) - lam});
    }
    LossGrad<Scalar> term = weighted_nce<Scalar>(queries[r], pos, queue, tau);
    out.loss += term.loss;
    out.grads.push_back(std::move(term.grad));
  }
  return out;
}

#define CLIM_INSTANTIATE_CONTRASTIVE(S)                                                                          \
  template class NegativeQueue<S>;                                                                               \
  template LossGrad<S> nce_loss<S>(const Vec<S>&, const Vec<S>&, const NegativeQueue<S>&, S);                    \
  template LossGrad<S> mixed_nce_loss<S>(const Vec<S>&, const Vec<S>&, const Vec<S>&, S, const NegativeQueue<S>&, S); \
  template MultiResLoss<S> multi_res_loss<S>(std::span<const Vec<S>>, std::span<const S>, std::span<const Vec<S>>, \
                                             std::span<const Vec<S>>, const NegativeQueue<S>&, S);

CLIM_INSTANTIATE_CONTRASTIVE(float)
CLIM_INSTANTIATE_CONTRASTIVE(double)

#undef CLIM_INSTANTIATE_CONTRASTIVE

}  // namespace clim

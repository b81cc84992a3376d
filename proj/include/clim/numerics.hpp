#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

#include "clim/error.hpp"

namespace clim {

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using VectorXd = Vec<double>;
using MatrixXd = Mat<double>;

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

/// SplitMix64 finalizer; used for seeding and for label-based splitting.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// xoshiro256** generator. All distributions below are implemented on top of
/// the raw 64-bit stream so sequences do not depend on the standard library's
/// implementation-defined distributions.
///
/// A generator is single-owner. Work that runs concurrently takes a child
/// produced by split(), which is a pure function of the parent state and the
/// label and does not advance the parent.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept;

  std::uint64_t next_u64() noexcept;

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept;
  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in the closed range [lo, hi]. Throws if lo > hi.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p) noexcept { return uniform() < p; }
  double normal() noexcept;
  /// Gamma(shape, 1) by Marsaglia-Tsang; shape < 1 uses the U^(1/shape) boost.
  double gamma(double shape);

  Rng split(std::uint64_t label) const noexcept;
  Rng split(std::string_view label) const noexcept;

  bool operator==(const Rng& other) const noexcept = default;

 private:
  std::uint64_t s_[4];
};

/// Stable 64-bit FNV-1a hash for string labels.
std::uint64_t hash_label(std::string_view label) noexcept;

/// Symmetric Beta(alpha, alpha).
struct BetaParams {
  double alpha = 2.0;
};

/// One draw from Beta(alpha, alpha) via the Gamma ratio X / (X + Y).
double sample_beta(Rng& rng, BetaParams params);

std::int64_t sample_uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi);

// ---------------------------------------------------------------------------
// Vector kernels
// ---------------------------------------------------------------------------

namespace detail {
inline void check_same_dim(Eigen::Index a, Eigen::Index b, const char* op) {
  if (a != b) {
    throw ValidationError(std::string(op) + ": dimension mismatch (" + std::to_string(a) +
                          " vs " + std::to_string(b) + ")");
  }
}
}  // namespace detail

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar dot(const Eigen::MatrixBase<DerivedA>& a,
                              const Eigen::MatrixBase<DerivedB>& b) {
  detail::check_same_dim(a.size(), b.size(), "dot");
  return a.dot(b);
}

template <typename Derived>
Vec<typename Derived::Scalar> l2_normalize(const Eigen::MatrixBase<Derived>& a) {
  const auto norm = a.norm();
  if (!(norm > 0) || !std::isfinite(static_cast<double>(norm))) {
    throw NumericError("l2_normalize: vector has zero or non-finite norm");
  }
  return a / norm;
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar l2_distance(const Eigen::MatrixBase<DerivedA>& a,
                                      const Eigen::MatrixBase<DerivedB>& b) {
  detail::check_same_dim(a.size(), b.size(), "l2_distance");
  return (a - b).norm();
}

/// Squared distance accumulated in index order. Neighbour search and k-means
/// use this form so that exact ties stay exact.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar squared_distance(const Eigen::MatrixBase<DerivedA>& a,
                                           const Eigen::MatrixBase<DerivedB>& b) {
  detail::check_same_dim(a.size(), b.size(), "squared_distance");
  typename DerivedA::Scalar acc = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const auto d = a(i) - b(i);
    acc += d * d;
  }
  return acc;
}

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

}  // namespace clim

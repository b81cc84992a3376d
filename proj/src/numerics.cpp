#include "clim/numerics.hpp"

#include <cmath>
#include <numbers>

namespace clim {

const char* to_string(IoErrc code) {
  switch (code) {
    case IoErrc::open_failed: return "open failed";
    case IoErrc::write_failed: return "write failed";
    case IoErrc::bad_magic: return "bad magic";
    case IoErrc::bad_version: return "bad version";
    case IoErrc::bad_dtype: return "bad dtype";
    case IoErrc::truncated: return "truncated payload";
    case IoErrc::dim_overflow: return "dim overflow";
    case IoErrc::malformed_header: return "malformed header";
    case IoErrc::size_mismatch: return "size mismatch";
    case IoErrc::bad_label: return "bad label";
  }
  return "unknown io error";
}

namespace {
constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }
}  // namespace

Rng::Rng(std::uint64_t seed) noexcept {
  std::uint64_t z = seed;
  for (auto& word : s_) {
    word = mix64(z);
    z += 0x9e3779b97f4a7c15ULL;
  }
}

std::uint64_t Rng::next_u64() noexcept {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double Rng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

__extension__ using u128 = unsigned __int128;

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (lo > hi) {
    throw ValidationError("uniform_int: lo (" + std::to_string(lo) + ") > hi (" +
                          std::to_string(hi) + ")");
  }
  const std::uint64_t range = static_cast<std::uint64_t>(hi) - static_cast<std::uint64_t>(lo);
  if (range == ~std::uint64_t{0}) return static_cast<std::int64_t>(next_u64());
  const std::uint64_t span = range + 1;
  // Lemire's multiply-shift with rejection.
  u128 m = static_cast<u128>(next_u64()) * span;
  auto low = static_cast<std::uint64_t>(m);
  if (low < span) {
    const std::uint64_t threshold = (0 - span) % span;
    while (low < threshold) {
      m = static_cast<u128>(next_u64()) * span;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return lo + static_cast<std::int64_t>(m >> 64);
}

double Rng::normal() noexcept {
  // Box-Muller, one output per call.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::gamma(double shape) {
  if (!(shape > 0)) throw ValidationError("gamma: shape must be positive");
  if (shape < 1.0) {
    double u = uniform();
    while (u <= 0.0) u = uniform();
    return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x = 0;
    double v = 0;
    do {
      x = normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

Rng Rng::split(std::uint64_t label) const noexcept {
  std::uint64_t h = mix64(label ^ 0xa0761d6478bd642fULL);
  for (auto word : s_) h = mix64(h ^ word);
  return Rng(h);
}

Rng Rng::split(std::string_view label) const noexcept { return split(hash_label(label)); }

std::uint64_t hash_label(std::string_view label) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

double sample_beta(Rng& rng, BetaParams params) {
  if (!(params.alpha > 0)) throw ValidationError("sample_beta: alpha must be positive");
  for (;;) {
    const double x = rng.gamma(params.alpha);
    const double y = rng.gamma(params.alpha);
    const double s = x + y;
    if (s > 0) {
      const double b = x / s;
      if (b > 0.0 && b < 1.0) return b;
    }
  }
}

std::int64_t sample_uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi) {
  return rng.uniform_int(lo, hi);
}

}  // namespace clim

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "v2xvlm/error.hpp"

namespace v2x {

// Dense row-major matrix of doubles. Used for token sequences (rows = tokens),
// embedding batches, similarity matrices and logit batches.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) fail(Errc::shape_mismatch, "matrix data length != rows*cols");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool all_finite() const noexcept {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

using Tensor2D = Matrix;

// SplitMix64 in counter mode: the n-th draw of a stream seeded with `seed` is
// mix(seed + (n + 1) * golden). Substreams are derived by mixing a stream id
// into the seed, so any language can reproduce the exact sequence.
class Rng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {}

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  // Independent stream keyed on (seed, id).
  Rng derive(std::uint64_t id) const noexcept { return Rng(mix(seed_ ^ mix(id + kGolden))); }

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix(seed_ + counter_ * kGolden);
  }

  // Uniform in [0, 1) with 53 bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Modulo bias is below 2^-40 for the n used here.
  std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next_u64() % n; }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  // Box-Muller; consumes two draws per sample.
  double normal() noexcept {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

inline constexpr double kNormEpsilon = 1e-12;

inline double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(Errc::shape_mismatch, "dot of unequal lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline std::vector<double> l2_normalize(std::span<const double> v) {
  if (v.empty()) fail(Errc::zero_norm, "empty vector");
  const double n = l2_norm(v);
  if (!(n > kNormEpsilon)) fail(Errc::zero_norm, "norm " + std::to_string(n) + " below epsilon");
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
  return out;
}

inline void check_temperature(double temp) {
  if (!(temp > 0.0) || !std::isfinite(temp))
    fail(Errc::non_positive_temperature, "temperature must be positive and finite");
}

// log(sum(exp(x / temp))) with max subtraction.
inline double log_sum_exp(std::span<const double> x, double temp = 1.0) {
  check_temperature(temp);
  if (x.empty()) fail(Errc::empty_sequence, "log_sum_exp of empty vector");
  double m = x[0];
  for (double v : x) m = v > m ? v : m;
  double s = 0.0;
  for (double v : x) s += std::exp((v - m) / temp);
  return m / temp + std::log(s);
}

inline std::vector<double> softmax_temp(std::span<const double> logits, double temp) {
  check_temperature(temp);
  if (logits.empty()) fail(Errc::empty_sequence, "softmax of empty vector");
  double m = logits[0];
  for (double v : logits) m = v > m ? v : m;
  std::vector<double> out(logits.size());
  double s = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - m) / temp);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

inline std::vector<double> log_softmax_temp(std::span<const double> logits, double temp) {
  const double lse = log_sum_exp(logits, temp);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] / temp - lse;
  return out;
}

inline std::vector<double> mean_pool(const Matrix& tokens) {
  if (tokens.rows() == 0) fail(Errc::empty_sequence, "mean_pool over zero tokens");
  std::vector<double> out(tokens.cols(), 0.0);
  for (std::size_t i = 0; i < tokens.rows(); ++i)
    for (std::size_t j = 0; j < tokens.cols(); ++j) out[j] += tokens(i, j);
  const double inv = 1.0 / static_cast<double>(tokens.rows());
  for (double& v : out) v *= inv;
  return out;
}

using ScalarField = std::function<double(std::span<const double>)>;

// Central differences, one coordinate at a time. This is the oracle every
// analytic gradient in the library is checked against.
inline std::vector<double> finite_diff_grad(const ScalarField& f, std::span<const double> x, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) fail(Errc::invalid_config, "finite-difference eps must lie in [1e-6, 1e-3]");
  std::vector<double> probe(x.begin(), x.end());
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      fail(Errc::non_finite_evaluation, "f not finite at coordinate " + std::to_string(i));
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

// |a - b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
// turning rounding noise into large relative errors.
inline double relative_error(double a, double b, double floor = 1e-8) {
  const double denom = std::max({std::abs(a), std::abs(b), floor});
  return std::abs(a - b) / denom;
}

}  // namespace v2x

#pragma once

// Shared helpers for the unit and acceptance tests: seeded random tensors and
// central finite differences.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "flowsurrogate/tensor.hpp"

namespace testing_support {

using flowsurrogate::Shape;
using flowsurrogate::Tensor;

template <typename T>
Tensor<T> random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

/// Values uniformly in +-[gap, 1]: keeps ReLU inputs away from the kink.
template <typename T>
Tensor<T> random_away_from_zero(const Shape& shape, std::uint64_t seed, double gap = 0.1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(gap, 1.0);
  std::bernoulli_distribution sign(0.5);
  Tensor<T> t(shape);
  for (auto& v : t.values()) v = static_cast<T>(sign(rng) ? u(rng) : -u(rng));
  return t;
}

template <typename T>
double dot_double(const Tensor<T>& a, const Tensor<T>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

/// max_i |a_i - b_i| / max_i |b_i| (b is the reference).
inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num = std::max(num, std::abs(a[i] - b[i]));
    den = std::max(den, std::abs(b[i]));
  }
  return den > 0.0 ? num / den : num;
}

/// Central differences of `loss` with respect to the selected entries of `x`.
template <typename T>
std::vector<double> numeric_gradient(Tensor<T>& x, const std::vector<std::size_t>& entries, double h,
                                     const std::function<double()>& loss) {
  std::vector<double> out;
  out.reserve(entries.size());
  for (std::size_t i : entries) {
    const T saved = x[i];
    x[i] = static_cast<T>(saved + h);
    const double plus = loss();
    x[i] = static_cast<T>(saved - h);
    const double minus = loss();
    x[i] = saved;
    out.push_back((plus - minus) / (2.0 * h));
  }
  return out;
}

inline std::vector<std::size_t> all_entries(std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return idx;
}

/// Up to `count` distinct entries of [0, n), seeded.
inline std::vector<std::size_t> some_entries(std::size_t n, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx = all_entries(n);
  if (count >= n) return idx;
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
std::vector<double> pick(const Tensor<T>& t, const std::vector<std::size_t>& entries) {
  std::vector<double> out;
  out.reserve(entries.size());
  for (std::size_t i : entries) out.push_back(static_cast<double>(t[i]));
  return out;
}

}  // namespace testing_support

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "rwkv_clip/tensor.hpp"

namespace rwkv_clip::testing {

/// Small random-input generator for property tests.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  std::size_t size(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double normal(double stddev = 1.0) { return std::normal_distribution<double>(0.0, stddev)(rng_); }
  bool coin() { return size(0, 1) == 1; }

  std::vector<double> normals(std::size_t n, double stddev = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = normal(stddev);
    return v;
  }
  std::vector<double> uniforms(std::size_t n, double lo, double hi) {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform(lo, hi);
    return v;
  }
  Tensor tensor(Shape shape, double stddev = 1.0, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor::from(std::move(shape), normals(n, stddev), requires_grad);
  }
  Tensor tensor_uniform(Shape shape, double lo, double hi, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor::from(std::move(shape), uniforms(n, lo, hi), requires_grad);
  }
  std::string ascii(std::size_t max_len) {
    std::string s(size(0, max_len), ' ');
    for (auto& c : s) c = static_cast<char>(size(32, 126));
    return s;
  }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

/// Runs `body(gen, case_index)` for `cases` independent seeds derived from `seed`.
/// A failure message names the case so it can be replayed.
template <typename Body>
void for_all(std::uint64_t seed, std::size_t cases, Body&& body) {
  for (std::size_t i = 0; i < cases; ++i) {
    SCOPED_TRACE("property case " + std::to_string(i) + " (seed " + std::to_string(seed) + ")");
    Gen gen(seed * 1000003ULL + i);
    body(gen, i);
    if (::testing::Test::HasFatalFailure()) return;
  }
}

inline std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel() && i < b.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size() && i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Row-major flat index.
inline std::size_t flat(const Shape& shape, std::initializer_list<std::size_t> idx) {
  std::size_t off = 0, axis = 0;
  for (std::size_t i : idx) off = off * shape[axis++] + i;
  return off;
}

inline double at(const Tensor& t, std::initializer_list<std::size_t> idx) { return t[flat(t.shape(), idx)]; }

}  // namespace rwkv_clip::testing

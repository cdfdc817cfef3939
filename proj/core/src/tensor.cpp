#include "rwkv_clip/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <numeric>
#include <sstream>

namespace rwkv_clip {

namespace {

thread_local Tape* g_active_tape = nullptr;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

void check_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw Error(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                shape_str(a.shape()));
  }
}

template <typename F, typename G>
Tensor unary(const char* name, const Tensor& x, F fwd, G deriv) {
  auto xs = x.data();
  std::vector<double> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = fwd(xs[i]);
  return make_op(name, x.shape(), std::move(out), {x},
                 [x, deriv](std::span<const double> g) {
                   auto xd = x.data();
                   std::vector<double> gx(g.size());
                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * deriv(xd[i]);
                   accumulate_grad(x, std::move(gx));
                 });
}

double sigmoid_scalar(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  double e = std::exp(v);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// ---- Tensor ---------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) RWKV_CHECK(d > 0, "tensor dimensions must be positive, got " + shape_str(shape));
  RWKV_CHECK(shape_numel(shape) == data.size(),
             "shape " + shape_str(shape) + " does not match " + std::to_string(data.size()) + " values");
  ensure_finite(data, "Tensor::from");
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi, bool requires_grad) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(shape_numel(shape));
  for (auto& v : data) v = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

std::size_t Tensor::dim(std::size_t axis) const {
  RWKV_CHECK(axis < ndim(), "axis out of range");
  return shape()[axis];
}

double Tensor::item() const {
  RWKV_CHECK(numel() == 1, "item() needs a single-element tensor, got " + shape_str(shape()));
  return impl().data[0];
}

Tensor& Tensor::set_requires_grad(bool value) {
  impl().requires_grad = value;
  return *this;
}

std::span<double> Tensor::mutable_grad() {
  impl().ensure_grad();
  return impl().grad;
}

Tensor Tensor::clone() const {
  auto impl_copy = std::make_shared<detail::TensorImpl>();
  impl_copy->shape = impl().shape;
  impl_copy->data = impl().data;
  impl_copy->requires_grad = impl().requires_grad;
  return Tensor(std::move(impl_copy));
}

Tensor Tensor::detach() const {
  auto t = clone();
  t.set_requires_grad(false);
  return t;
}

// ---- Tape -------------------------------------------------------------------

Tape* Tape::active() { return g_active_tape; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradGuard::NoGradGuard() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = previous_; }

void Tape::backward(const Tensor& root) {
  RWKV_CHECK(root.numel() == 1, "backward() needs a scalar root, got " + shape_str(root.shape()));
  for (auto& e : entries_) e.output.zero_grad();
  auto root_impl = root.impl_ptr();
  if (!root_impl->is_leaf) root_impl->grad.clear();
  root_impl->ensure_grad();
  root_impl->grad[0] += 1.0;

  NoGradGuard no_grad;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    auto g = it->output.grad();
    ensure_finite(g, it->op.c_str());
    it->backward(g);
  }
}

void ensure_finite(std::span<const double> values, const char* op) {
  // NaN and Inf are the values with every exponent bit set.
  constexpr std::uint64_t kExponent = 0x7FF0000000000000ULL;
  std::uint64_t bad = 0;
  for (double v : values) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v) & kExponent) == kExponent);
  if (bad) throw NumericError(std::string(op) + ": non-finite value");
}

Tensor make_op(std::string name, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
               std::function<void(std::span<const double>)> backward) {
  ensure_finite(data, name.c_str());
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->is_leaf = false;
  Tensor out(impl);
  Tape* tape = Tape::active();
  bool needs = tape && std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    impl->requires_grad = true;
    tape->record({std::move(name), std::move(inputs), out, std::move(backward)});
  }
  return out;
}

void accumulate_grad(const Tensor& t, std::span<const double> g) {
  if (!t.requires_grad()) return;
  auto impl = t.impl_ptr();
  RWKV_CHECK(g.size() == impl->data.size(), "gradient size mismatch");
  if (impl->grad.empty()) {
    impl->grad.assign(g.begin(), g.end());
    return;
  }
  double* dst = impl->grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

void accumulate_grad(const Tensor& t, std::vector<double>&& g) {
  if (!t.requires_grad()) return;
  auto impl = t.impl_ptr();
  RWKV_CHECK(g.size() == impl->data.size(), "gradient size mismatch");
  if (impl->grad.empty()) {
    impl->grad = std::move(g);
    return;
  }
  double* dst = impl->grad.data();
  for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

// ---- elementwise -------------------------------------------------------------

namespace {

// Calls f(i, j) for every flat index i of a and the matching broadcast index j of b.
template <typename F>
void for_broadcast(std::size_t total, std::size_t inner, F&& f) {
  for (std::size_t base = 0; base < total; base += inner)
    for (std::size_t j = 0; j < inner; ++j) f(base + j, j);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "add");
  auto ad = a.data();
  auto bd = b.data();
  std::size_t inner = bd.size();
  std::vector<double> out(ad.size());
  for_broadcast(ad.size(), inner, [&](std::size_t i, std::size_t j) { out[i] = ad[i] + bd[j]; });
  return make_op("add", a.shape(), std::move(out), {a, b}, [a, b, inner](std::span<const double> g) {
    accumulate_grad(a, g);
    if (b.requires_grad()) {
      std::vector<double> gb(inner, 0.0);
      for_broadcast(g.size(), inner, [&](std::size_t i, std::size_t j) { gb[j] += g[i]; });
      accumulate_grad(b, std::move(gb));
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "sub");
  auto ad = a.data();
  auto bd = b.data();
  std::size_t inner = bd.size();
  std::vector<double> out(ad.size());
  for_broadcast(ad.size(), inner, [&](std::size_t i, std::size_t j) { out[i] = ad[i] - bd[j]; });
  return make_op("sub", a.shape(), std::move(out), {a, b}, [a, b, inner](std::span<const double> g) {
    accumulate_grad(a, g);
    if (b.requires_grad()) {
      std::vector<double> gb(inner, 0.0);
      for_broadcast(g.size(), inner, [&](std::size_t i, std::size_t j) { gb[j] -= g[i]; });
      accumulate_grad(b, std::move(gb));
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_broadcast(a, b, "mul");
  auto ad = a.data();
  auto bd = b.data();
  std::size_t inner = bd.size();
  std::vector<double> out(ad.size());
  for_broadcast(ad.size(), inner, [&](std::size_t i, std::size_t j) { out[i] = ad[i] * bd[j]; });
  return make_op("mul", a.shape(), std::move(out), {a, b}, [a, b, inner](std::span<const double> g) {
    auto ad = a.data();
    auto bd = b.data();
    if (a.requires_grad()) {
      std::vector<double> ga(g.size());
      for_broadcast(g.size(), inner, [&](std::size_t i, std::size_t j) { ga[i] = g[i] * bd[j]; });
      accumulate_grad(a, std::move(ga));
    }
    if (b.requires_grad()) {
      std::vector<double> gb(inner, 0.0);
      for_broadcast(g.size(), inner, [&](std::size_t i, std::size_t j) { gb[j] += g[i] * ad[i]; });
      accumulate_grad(b, std::move(gb));
    }
  });
}

Tensor affine(const Tensor& x, double alpha, double beta) {
  return unary("affine", x, [=](double v) { return alpha * v + beta; }, [=](double) { return alpha; });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  RWKV_CHECK(s.numel() == 1, "scale_by: scale must have one element");
  double sv = s.item();
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = xd[i] * sv;
  return make_op("scale_by", x.shape(), std::move(out), {x, s}, [x, s](std::span<const double> g) {
    double sv = s.item();
    auto xd = x.data();
    if (x.requires_grad()) {
      std::vector<double> gx(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] = g[i] * sv;
      accumulate_grad(x, std::move(gx));
    }
    if (s.requires_grad()) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xd[i];
      accumulate_grad(s, std::span<const double>(&acc, 1));
    }
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  RWKV_CHECK(lo <= hi, "clamp: lo > hi");
  return unary(
      "clamp", x, [=](double v) { return std::clamp(v, lo, hi); },
      [=](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

Tensor silu(const Tensor& x) {
  return unary(
      "silu", x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v) {
        double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor squared_relu(const Tensor& x) {
  return unary(
      "squared_relu", x, [](double v) { return v > 0 ? v * v : 0.0; },
      [](double v) { return v > 0 ? 2.0 * v : 0.0; });
}

Tensor tanh_op(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double v) {
        double t = std::tanh(v);
        return 1.0 - t * t;
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, sigmoid_scalar, [](double v) {
    double s = sigmoid_scalar(v);
    return s * (1.0 - s);
  });
}

Tensor exp_op(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

// ---- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& x) {
  auto xd = x.data();
  double acc = std::accumulate(xd.begin(), xd.end(), 0.0);
  return make_op("sum", {1}, {acc}, {x}, [x](std::span<const double> g) {
    std::vector<double> gx(x.numel(), g[0]);
    accumulate_grad(x, std::move(gx));
  });
}

Tensor mean(const Tensor& x) { return affine(sum(x), 1.0 / static_cast<double>(x.numel()), 0.0); }

// ---- linear algebra -------------------------------------------------------------

namespace {

// out[m, n] = a[m, k] * b[k, n] where a is any tensor viewed as m rows of k.
Tensor matmul_rows(const char* name, const Tensor& a, const Tensor& b, std::size_t m, std::size_t k, Shape out_shape) {
  const std::size_t n = b.dim(1);
  std::vector<double> out(m * n);
  ConstMapMatrix am(a.data().data(), m, k);
  ConstMapMatrix bm(b.data().data(), k, n);
  MapMatrix(out.data(), m, n).noalias() = am * bm;
  return make_op(name, std::move(out_shape), std::move(out), {a, b}, [a, b, m, k, n](std::span<const double> g) {
    ConstMapMatrix gm(g.data(), m, n);
    if (a.requires_grad()) {
      std::vector<double> ga(m * k);
      MapMatrix(ga.data(), m, k).noalias() = gm * ConstMapMatrix(b.data().data(), k, n).transpose();
      accumulate_grad(a, std::move(ga));
    }
    if (b.requires_grad()) {
      std::vector<double> gb(k * n);
      MapMatrix(gb.data(), k, n).noalias() = ConstMapMatrix(a.data().data(), m, k).transpose() * gm;
      accumulate_grad(b, std::move(gb));
    }
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  RWKV_CHECK(a.ndim() == 2 && b.ndim() == 2, "matmul expects 2-D operands");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw Error("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  return matmul_rows("matmul", a, b, m, k, {m, n});
}

Tensor reshape(const Tensor& x, Shape shape) {
  RWKV_CHECK(shape_numel(shape) == x.numel(),
             "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) + " changes element count");
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {x},
                 [x](std::span<const double> g) { accumulate_grad(x, g); });
}

Tensor linear(const Tensor& x, const Tensor& w) {
  RWKV_CHECK(w.ndim() == 2, "linear: weight must be 2-D");
  RWKV_CHECK(x.ndim() >= 1 && x.shape().back() == w.dim(0),
             "linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  const std::size_t k = w.dim(0);
  const std::size_t rows = x.numel() / k;
  Shape out_shape = x.shape();
  out_shape.back() = w.dim(1);
  return matmul_rows("linear", x, w, rows, k, std::move(out_shape));
}

Tensor transpose(const Tensor& x) {
  RWKV_CHECK(x.ndim() == 2, "transpose expects a 2-D tensor");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  MapMatrix(out.data(), n, m) = ConstMapMatrix(x.data().data(), m, n).transpose();
  return make_op("transpose", {n, m}, std::move(out), {x}, [x, m, n](std::span<const double> g) {
    std::vector<double> gx(m * n);
    MapMatrix(gx.data(), m, n) = ConstMapMatrix(g.data(), n, m).transpose();
    accumulate_grad(x, std::move(gx));
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  RWKV_CHECK(x.ndim() >= 1, "layer_norm: scalar input");
  RWKV_CHECK(eps >= 0.0, "layer_norm: eps must be non-negative");
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.numel() / c;
  const bool affine_on = gain.defined();
  if (affine_on) {
    RWKV_CHECK(gain.shape() == Shape{c} && bias.defined() && bias.shape() == Shape{c},
               "layer_norm: gain/bias must be [" + std::to_string(c) + "]");
  }
  auto xd = x.data();
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    double denom = std::sqrt(var + eps);
    inv_std[r] = denom > 0.0 ? 1.0 / denom : 0.0;
    for (std::size_t j = 0; j < c; ++j) xhat[r * c + j] = (row[j] - mu) * inv_std[r];
  }
  std::vector<double> out = xhat;
  std::vector<Tensor> inputs{x};
  if (affine_on) {
    auto gd = gain.data();
    auto bd = bias.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xhat[i] * gd[i % c] + bd[i % c];
    inputs.push_back(gain);
    inputs.push_back(bias);
  }
  return make_op("layer_norm", x.shape(), std::move(out), std::move(inputs),
                 [x, gain, bias, affine_on, c, rows, xhat = std::move(xhat),
                  inv_std = std::move(inv_std)](std::span<const double> g) {
                   if (affine_on && (gain.requires_grad() || bias.requires_grad())) {
                     std::vector<double> gg(c, 0.0), gb(c, 0.0);
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       gg[i % c] += g[i] * xhat[i];
                       gb[i % c] += g[i];
                     }
                     accumulate_grad(gain, std::move(gg));
                     accumulate_grad(bias, std::move(gb));
                   }
                   if (!x.requires_grad()) return;
                   std::vector<double> gx(g.size());
                   const double* gd = affine_on ? gain.data().data() : nullptr;
                   std::vector<double> dxhat(c);
                   for (std::size_t r = 0; r < rows; ++r) {
                     double mean_d = 0.0, mean_dx = 0.0;
                     for (std::size_t j = 0; j < c; ++j) {
                       std::size_t i = r * c + j;
                       dxhat[j] = g[i] * (gd ? gd[j] : 1.0);
                       mean_d += dxhat[j];
                       mean_dx += dxhat[j] * xhat[i];
                     }
                     mean_d /= static_cast<double>(c);
                     mean_dx /= static_cast<double>(c);
                     for (std::size_t j = 0; j < c; ++j) {
                       std::size_t i = r * c + j;
                       gx[i] = inv_std[r] * (dxhat[j] - mean_d - xhat[i] * mean_dx);
                     }
                   }
                   accumulate_grad(x, std::move(gx));
                 });
}

Tensor log_softmax(const Tensor& x) {
  RWKV_CHECK(x.ndim() == 2, "log_softmax expects a 2-D tensor");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto xd = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * cols;
    double mx = *std::max_element(row, row + cols);
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) acc += std::exp(row[j] - mx);
    double lse = mx + std::log(acc);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = row[j] - lse;
  }
  std::vector<double> saved = out;
  return make_op("log_softmax", x.shape(), std::move(out), {x},
                 [x, rows, cols, saved = std::move(saved)](std::span<const double> g) {
                   std::vector<double> gx(g.size());
                   for (std::size_t r = 0; r < rows; ++r) {
                     double gsum = 0.0;
                     for (std::size_t j = 0; j < cols; ++j) gsum += g[r * cols + j];
                     for (std::size_t j = 0; j < cols; ++j) {
                       std::size_t i = r * cols + j;
                       gx[i] = g[i] - std::exp(saved[i]) * gsum;
                     }
                   }
                   accumulate_grad(x, std::move(gx));
                 });
}

Tensor diagonal(const Tensor& x) {
  RWKV_CHECK(x.ndim() == 2 && x.dim(0) == x.dim(1), "diagonal expects a square matrix");
  const std::size_t n = x.dim(0);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[i * n + i];
  return make_op("diagonal", {n}, std::move(out), {x}, [x, n](std::span<const double> g) {
    std::vector<double> gx(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) gx[i * n + i] = g[i];
    accumulate_grad(x, std::move(gx));
  });
}

Tensor l2_normalize(const Tensor& x, double eps) {
  RWKV_CHECK(x.ndim() == 2, "l2_normalize expects a 2-D tensor");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto xd = x.data();
  std::vector<double> out(x.numel());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double ss = 0.0;
    for (std::size_t j = 0; j < cols; ++j) ss += xd[r * cols + j] * xd[r * cols + j];
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = xd[r * cols + j] / norms[r];
  }
  std::vector<double> y = out;
  return make_op("l2_normalize", x.shape(), std::move(out), {x},
                 [x, rows, cols, y = std::move(y), norms = std::move(norms)](std::span<const double> g) {
                   std::vector<double> gx(g.size());
                   for (std::size_t r = 0; r < rows; ++r) {
                     double dot = 0.0;
                     for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
                     for (std::size_t j = 0; j < cols; ++j) {
                       std::size_t i = r * cols + j;
                       gx[i] = (g[i] - y[i] * dot) / norms[r];
                     }
                   }
                   accumulate_grad(x, std::move(gx));
                 });
}

Tensor embedding(const Tensor& table, std::span<const std::size_t> ids) {
  RWKV_CHECK(table.ndim() == 2, "embedding table must be 2-D");
  const std::size_t vocab = table.dim(0), c = table.dim(1);
  RWKV_CHECK(!ids.empty(), "embedding: no ids");
  std::vector<double> out(ids.size() * c);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab) {
      throw Error("embedding: id " + std::to_string(ids[i]) + " out of range for vocab " +
                  std::to_string(vocab));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * c), c, out.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  std::vector<std::size_t> id_copy(ids.begin(), ids.end());
  return make_op("embedding", {ids.size(), c}, std::move(out), {table},
                 [table, c, id_copy = std::move(id_copy)](std::span<const double> g) {
                   std::vector<double> gt(table.numel(), 0.0);
                   for (std::size_t i = 0; i < id_copy.size(); ++i)
                     for (std::size_t j = 0; j < c; ++j) gt[id_copy[i] * c + j] += g[i * c + j];
                   accumulate_grad(table, std::move(gt));
                 });
}

Tensor masked_fill_tokens(const Tensor& x, const std::vector<bool>& keep, double value) {
  RWKV_CHECK(x.ndim() == 3, "masked_fill_tokens expects [B,T,C]");
  const std::size_t tokens = x.dim(0) * x.dim(1), c = x.dim(2);
  RWKV_CHECK(keep.size() == tokens, "masked_fill_tokens: mask size mismatch");
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t t = 0; t < tokens; ++t)
    if (!keep[t]) std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(t * c), c, value);
  return make_op("masked_fill_tokens", x.shape(), std::move(out), {x},
                 [x, keep, tokens, c](std::span<const double> g) {
                   std::vector<double> gx(g.begin(), g.end());
                   for (std::size_t t = 0; t < tokens; ++t)
                     if (!keep[t]) std::fill_n(gx.begin() + static_cast<std::ptrdiff_t>(t * c), c, 0.0);
                   accumulate_grad(x, std::move(gx));
                 });
}

Tensor mean_pool_tokens(const Tensor& x, const std::vector<bool>& keep) {
  RWKV_CHECK(x.ndim() == 3, "mean_pool_tokens expects [B,T,C]");
  const std::size_t b = x.dim(0), t = x.dim(1), c = x.dim(2);
  RWKV_CHECK(keep.size() == b * t, "mean_pool_tokens: mask size mismatch");
  std::vector<double> counts(b, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < t; ++j) counts[i] += keep[i * t + j] ? 1.0 : 0.0;
    RWKV_CHECK(counts[i] > 0, "mean_pool_tokens: sample " + std::to_string(i) + " has no tokens");
  }
  auto xd = x.data();
  std::vector<double> out(b * c, 0.0);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < t; ++j)
      if (keep[i * t + j])
        for (std::size_t k = 0; k < c; ++k) out[i * c + k] += xd[(i * t + j) * c + k] / counts[i];
  return make_op("mean_pool_tokens", {b, c}, std::move(out), {x},
                 [x, keep, counts, b, t, c](std::span<const double> g) {
                   std::vector<double> gx(x.numel(), 0.0);
                   for (std::size_t i = 0; i < b; ++i)
                     for (std::size_t j = 0; j < t; ++j)
                       if (keep[i * t + j])
                         for (std::size_t k = 0; k < c; ++k) gx[(i * t + j) * c + k] = g[i * c + k] / counts[i];
                   accumulate_grad(x, std::move(gx));
                 });
}

}  // namespace rwkv_clip

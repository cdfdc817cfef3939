#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace rwkv_clip {

/// Raised for shape mismatches, invalid arguments and contract violations.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when an op produces NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

#define RWKV_CHECK(cond, msg)                   \
  do {                                          \
    if (!(cond)) throw ::rwkv_clip::Error(msg); \
  } while (0)

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when absent
  bool requires_grad = false;
  bool is_leaf = true;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major tensor of doubles. Copies share storage, like a handle.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi,
                        bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t ndim() const { return impl().shape.size(); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<const double> data() const { return impl().data; }
  /// Direct write access. Only meant for leaves (parameters, grad-check perturbation).
  std::span<double> mutable_data() { return impl().data; }
  double item() const;
  double operator[](std::size_t i) const { return impl().data[i]; }

  bool requires_grad() const { return impl().requires_grad; }
  Tensor& set_requires_grad(bool value);
  bool is_leaf() const { return impl().is_leaf; }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const double> grad() const { return impl().grad; }
  std::span<double> mutable_grad();
  void zero_grad() { impl().grad.clear(); }

  /// Deep copy without history.
  Tensor clone() const;
  /// Same data, no history, requires_grad=false.
  Tensor detach() const;

  std::shared_ptr<detail::TensorImpl> impl_ptr() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  detail::TensorImpl& impl() const {
    if (!impl_) throw Error("use of undefined tensor");
    return *impl_;
  }
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Ordered record of differentiable ops; replayed in reverse by backward().
///
/// Ops record themselves onto the tape installed by the innermost live
/// TapeScope on the current thread, and only when at least one input
/// requires a gradient. Without an active tape, ops run in inference mode.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  struct Entry {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  /// Seeds d(root)/d(root)=1 and replays every entry in reverse, accumulating
  /// into the `grad` of all requires_grad tensors reachable from root.
  void backward(const Tensor& root);

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }

  void record(Entry entry) { entries_.push_back(std::move(entry)); }

  /// Tape of the innermost active TapeScope on this thread, or nullptr.
  static Tape* active();

 private:
  friend class TapeScope;
  std::vector<Entry> entries_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording for the lifetime of the guard.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape* previous_;
};

/// Builds an op output from precomputed data and, when recording, registers
/// `backward`. The callback receives d(loss)/d(output) and must accumulate into
/// the inputs through accumulate_grad().
Tensor make_op(std::string name, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs,
               std::function<void(std::span<const double> grad_out)> backward);

/// Adds `g` into t.grad when t requires a gradient; no-op otherwise.
void accumulate_grad(const Tensor& t, std::span<const double> g);
/// Same, taking ownership of `g` when t has no gradient yet.
void accumulate_grad(const Tensor& t, std::vector<double>&& g);

void ensure_finite(std::span<const double> values, const char* op);

// ---- elementwise & broadcasting ----------------------------------------
// Binary ops accept b.shape() == a.shape() or b.shape() equal to a trailing
// suffix of a.shape() (b is broadcast over the leading axes of a).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// alpha * x + beta
Tensor affine(const Tensor& x, double alpha, double beta);
/// x * s where s has exactly one element.
Tensor scale_by(const Tensor& x, const Tensor& s);
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor silu(const Tensor& x);
Tensor squared_relu(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp_op(const Tensor& x);

// ---- reductions -----------------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---- linear algebra & layout ------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);
/// x[..., K] * w[K, N] -> [..., N]
Tensor linear(const Tensor& x, const Tensor& w);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);

/// Normalizes over the last axis. gain/bias may be undefined for no affine.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

/// Row-wise log-softmax over the last axis of a 2-D tensor.
Tensor log_softmax(const Tensor& x);
/// Diagonal of a square matrix.
Tensor diagonal(const Tensor& x);
/// Each row scaled to unit L2 norm.
Tensor l2_normalize(const Tensor& x, double eps = 1e-12);

/// Rows of table[V, C] gathered by ids, giving [ids.size(), C].
Tensor embedding(const Tensor& table, std::span<const std::size_t> ids);

// ---- token-grid helpers ([B, T, C] tensors, masks are B*T flags) -----------
/// Positions where keep[b*T+t] is false are overwritten with `value`.
Tensor masked_fill_tokens(const Tensor& x, const std::vector<bool>& keep, double value);
/// Mean over kept tokens: [B, T, C] -> [B, C].
Tensor mean_pool_tokens(const Tensor& x, const std::vector<bool>& keep);

}  // namespace rwkv_clip

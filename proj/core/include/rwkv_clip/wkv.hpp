#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "rwkv_clip/tensor.hpp"

namespace rwkv_clip {

/// Inputs of the bidirectional WKV kernel, laid out [B, H, T, d].
///
/// w_tilde is the per-token log-log decay; the decay factor applied to the
/// state is w = exp(-exp(clamp(w_tilde, -40, 40))), which lies in (0, 1).
struct WkvInputs {
  Tensor r;
  Tensor k;
  Tensor v;
  Tensor w_tilde;
  Tensor u;  // [H, d]

  std::size_t batch() const { return r.dim(0); }
  std::size_t heads() const { return r.dim(1); }
  std::size_t length() const { return r.dim(2); }
  std::size_t head_dim() const { return r.dim(3); }
  void validate() const;
};

struct WkvGrads {
  Tensor r, k, v, w_tilde, u;
};

/// Direct O(T^2 d^2) evaluation of
///   o_t = r_t . [ diag(u) k_t^T v_t + sum_{i != t} diag(eps_{t,i}) k_i^T v_i ]
/// where eps_{t,i} is the channel-wise product of w_j over j strictly between
/// i and t. Reference only.
Tensor biwkv_naive(const WkvInputs& in);

/// Same result in O(T d^2) per head with a forward and a backward state pass.
Tensor biwkv_scan(const WkvInputs& in);

/// Exact reverse-mode gradients of biwkv_scan. Stores one d x d state per
/// token and direction.
WkvGrads biwkv_backward(const WkvInputs& in, const Tensor& grad_out);

/// Accumulated k^T v state of one direction, [B, H, d, d] (row = key channel).
struct WkvState {
  Tensor a;
  static WkvState zeros(std::size_t batch, std::size_t heads, std::size_t head_dim);
};

struct WkvStep {
  Tensor contribution;  // [B, H, d]
  WkvState next;
};

/// One token of one direction:
///   contribution = r_t . (diag(u) k_t^T v_t + A)
///   next         = diag(w_t) A + k_t^T v_t
/// r_t, k_t, v_t, w_t are [B, H, d]; w_t is the decay factor, not w_tilde.
/// Summing a forward sweep with u and a backward sweep with u = 0 reproduces
/// biwkv_scan.
WkvStep wkv_recurrent_step(const WkvState& state, const Tensor& r_t, const Tensor& k_t, const Tensor& v_t,
                           const Tensor& w_t, const Tensor& u);

/// Differentiable Bi-WKV on [B, T, C] tensors split into `heads` heads of
/// C / heads channels. u is [heads, C / heads].
Tensor bi_wkv(const Tensor& r, const Tensor& k, const Tensor& v, const Tensor& w_tilde, const Tensor& u,
              std::size_t heads);

/// [B, T, H*d] <-> [B, H, T, d] relayout helpers (plain copies, no history).
Tensor to_head_major(const Tensor& x, std::size_t heads);
Tensor from_head_major(const Tensor& x);

// ---- benchmarking -------------------------------------------------------------

struct KernelTiming {
  std::string kernel;  // "scan" or "naive"
  std::size_t length = 0;
  std::size_t head_dim = 0;
  std::size_t heads = 0;
  double median_ns = 0.0;
};

struct BenchOptions {
  std::vector<std::size_t> lengths;
  std::size_t head_dim = 16;
  std::size_t heads = 1;
  std::size_t repeats = 3;
  std::uint64_t seed = 0;
  bool include_naive = true;
};

/// Median wall-clock time of biwkv_scan and biwkv_naive at each length.
std::vector<KernelTiming> bench_kernel(const BenchOptions& options);

/// CSV with header kernel,T,d,H,median_ns.
void write_bench_csv(std::ostream& os, const std::vector<KernelTiming>& rows);

struct ScalingVerdict {
  bool scan_linear = true;      // every scan doubling ratio <= 3
  bool naive_quadratic = true;  // every naive doubling ratio >= 3 for T >= 1024
  std::vector<std::string> lines;
  bool passed() const { return scan_linear && naive_quadratic; }
};

/// Evaluates time(2T)/time(T) for consecutive doublings in `rows`.
ScalingVerdict scaling_verdict(const std::vector<KernelTiming>& rows);

/// Random kernel inputs with w_tilde ~ U(-3, 1), the rest N(0, 1).
WkvInputs random_wkv_inputs(std::size_t batch, std::size_t heads, std::size_t length, std::size_t head_dim,
                            std::uint64_t seed);

}  // namespace rwkv_clip

#pragma once

#include <array>
#include <optional>
#include <variant>
#include <vector>

#include "rwkv_clip/tensor.hpp"

namespace rwkv_clip {

struct ImageLayout {
  std::size_t h_tokens = 0;
  std::size_t w_tokens = 0;
};

struct TextLayout {
  /// B*T flags, true where the position is padding. Padding is trailing only.
  std::vector<bool> pad_mask;
};

/// A batch of token sequences [B, T, C] plus the modality's spatial layout.
struct TokenGrid {
  Tensor tokens;
  std::variant<ImageLayout, TextLayout> layout;

  bool is_image() const { return std::holds_alternative<ImageLayout>(layout); }
  std::size_t batch() const { return tokens.dim(0); }
  std::size_t length() const { return tokens.dim(1); }
  std::size_t channels() const { return tokens.dim(2); }
  /// B*T flags, true for real (non-pad) tokens.
  std::vector<bool> keep_mask() const;
  /// Throws when the layout disagrees with the token tensor.
  void validate() const;
};

enum class LerpTarget { kG = 0, kR, kK, kV, kW };
inline constexpr std::array<LerpTarget, 5> kAllLerpTargets = {LerpTarget::kG, LerpTarget::kR, LerpTarget::kK,
                                                             LerpTarget::kV, LerpTarget::kW};
const char* lerp_target_name(LerpTarget target);

/// One learnable mixing vector eta[C] per target.
struct LerpParams {
  std::array<std::optional<Tensor>, 5> eta;

  const Tensor& at(LerpTarget target) const;
  void set(LerpTarget target, Tensor value) { eta[static_cast<std::size_t>(target)] = std::move(value); }
  bool has(LerpTarget target) const { return eta[static_cast<std::size_t>(target)].has_value(); }
};

/// Low-rank decay offset phi(x) = lambda + tanh(x * m_in) * m_out.
struct DecayParams {
  Tensor lambda;  // [C]
  Tensor m_in;    // [C, r]
  Tensor m_out;   // [r, C]

  std::size_t rank() const { return m_in.dim(1); }
  void validate(std::size_t channels) const;
};

/// Quad-directional shift for image grids. Channel quartile q at cell (h, w)
/// reads its input quartile from (h-1,w), (h+1,w), (h,w-1), (h,w+1) for q = 0..3.
/// Out-of-range neighbours read zeros.
Tensor quad_shift(const TokenGrid& grid);

/// Bidirectional shift for text. The first channel half at position t reads
/// from t-1, the second half from t+1. Out-of-range neighbours, pad sources
/// and pad destinations produce zeros.
Tensor bi_shift(const TokenGrid& grid);

/// quad_shift or bi_shift depending on the layout.
Tensor token_shift(const TokenGrid& grid);

/// x + (1 - eta) * x_shift (additive form, not a convex blend).
Tensor lerp(const Tensor& x, const Tensor& x_shift, const Tensor& eta);

Tensor phi(const Tensor& x, const DecayParams& params);

struct DecayOutputs {
  Tensor w_tilde;  // log-log decay, input of the WKV kernel
  Tensor w;        // exp(-exp(clamp(w_tilde))), strictly inside (0, 1)
};

inline constexpr double kDecayClamp = 40.0;

/// Data-dependent decay:
///   w_hat   = x + (1 - phi(lerp(x, x_shift, eta_w))) * x_shift
///   w_tilde = phi'(w_hat)      (phi' uses `outer` when given, else `params`)
///   w       = exp(-exp(w_tilde))
DecayOutputs decay_path(const Tensor& x, const Tensor& x_shift, const Tensor& eta_w,
                        const DecayParams& params, const DecayParams* outer = nullptr);

/// exp(-exp(clamp(w_tilde, -kDecayClamp, kDecayClamp))) elementwise.
Tensor decay_factor(const Tensor& w_tilde);

}  // namespace rwkv_clip

#include "rwkv_clip/shift.hpp"

namespace rwkv_clip {

namespace {

constexpr std::ptrdiff_t kNoSource = -1;

// Each (token, channel group) copies the same group of channels from a source
// token, or receives zeros when the source is kNoSource. sources has
// tokens*groups entries.
Tensor shift_by_sources(const char* name, const Tensor& x, std::size_t groups,
                        std::vector<std::ptrdiff_t> sources) {
  const std::size_t c = x.dim(2);
  const std::size_t tokens = x.dim(0) * x.dim(1);
  const std::size_t width = c / groups;
  auto xd = x.data();
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t g = 0; g < groups; ++g) {
      auto src = sources[t * groups + g];
      if (src == kNoSource) continue;
      for (std::size_t j = g * width; j < (g + 1) * width; ++j)
        out[t * c + j] = xd[static_cast<std::size_t>(src) * c + j];
    }
  }
  return make_op(name, x.shape(), std::move(out), {x},
                 [x, groups, width, c, tokens, sources = std::move(sources)](std::span<const double> grad) {
                   std::vector<double> gx(x.numel(), 0.0);
                   for (std::size_t t = 0; t < tokens; ++t) {
                     for (std::size_t g = 0; g < groups; ++g) {
                       auto src = sources[t * groups + g];
                       if (src == kNoSource) continue;
                       for (std::size_t j = g * width; j < (g + 1) * width; ++j)
                         gx[static_cast<std::size_t>(src) * c + j] += grad[t * c + j];
                     }
                   }
                   accumulate_grad(x, std::move(gx));
                 });
}

}  // namespace

std::vector<bool> TokenGrid::keep_mask() const {
  if (const auto* text = std::get_if<TextLayout>(&layout)) {
    std::vector<bool> keep(text->pad_mask.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = !text->pad_mask[i];
    return keep;
  }
  return std::vector<bool>(batch() * length(), true);
}

void TokenGrid::validate() const {
  RWKV_CHECK(tokens.defined() && tokens.ndim() == 3, "TokenGrid: tokens must be [B,T,C]");
  if (const auto* image = std::get_if<ImageLayout>(&layout)) {
    RWKV_CHECK(image->h_tokens * image->w_tokens == length(),
               "TokenGrid: image grid " + std::to_string(image->h_tokens) + "x" +
                   std::to_string(image->w_tokens) + " does not match T=" + std::to_string(length()));
    return;
  }
  const auto& mask = std::get<TextLayout>(layout).pad_mask;
  RWKV_CHECK(mask.size() == batch() * length(), "TokenGrid: pad mask must have B*T entries");
  for (std::size_t b = 0; b < batch(); ++b) {
    bool padded = false;
    for (std::size_t t = 0; t < length(); ++t) {
      bool pad = mask[b * length() + t];
      RWKV_CHECK(!(padded && !pad), "TokenGrid: padding must be trailing");
      padded = padded || pad;
    }
  }
}

const char* lerp_target_name(LerpTarget target) {
  switch (target) {
    case LerpTarget::kG: return "g";
    case LerpTarget::kR: return "r";
    case LerpTarget::kK: return "k";
    case LerpTarget::kV: return "v";
    case LerpTarget::kW: return "w";
  }
  return "?";
}

const Tensor& LerpParams::at(LerpTarget target) const {
  const auto& slot = eta[static_cast<std::size_t>(target)];
  if (!slot) throw Error(std::string("LerpParams: no eta for target ") + lerp_target_name(target));
  return *slot;
}

void DecayParams::validate(std::size_t channels) const {
  RWKV_CHECK(lambda.shape() == Shape{channels}, "DecayParams: lambda must be [C]");
  RWKV_CHECK(m_in.ndim() == 2 && m_in.dim(0) == channels, "DecayParams: m_in must be [C,r]");
  RWKV_CHECK(m_out.ndim() == 2 && m_out.dim(0) == m_in.dim(1) && m_out.dim(1) == channels,
             "DecayParams: m_out must be [r,C]");
  RWKV_CHECK(rank() <= channels, "DecayParams: rank exceeds channel count");
}

Tensor quad_shift(const TokenGrid& grid) {
  grid.validate();
  const auto* layout = std::get_if<ImageLayout>(&grid.layout);
  RWKV_CHECK(layout != nullptr, "quad_shift requires an image layout");
  RWKV_CHECK(grid.channels() % 4 == 0, "quad_shift requires C divisible by 4");
  const auto hs = static_cast<std::ptrdiff_t>(layout->h_tokens);
  const auto ws = static_cast<std::ptrdiff_t>(layout->w_tokens);
  const std::size_t t_len = grid.length();
  std::vector<std::ptrdiff_t> sources(grid.batch() * t_len * 4, kNoSource);
  constexpr std::array<std::array<std::ptrdiff_t, 2>, 4> kOffsets = {{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}};
  for (std::size_t b = 0; b < grid.batch(); ++b) {
    for (std::ptrdiff_t h = 0; h < hs; ++h) {
      for (std::ptrdiff_t w = 0; w < ws; ++w) {
        std::size_t token = b * t_len + static_cast<std::size_t>(h * ws + w);
        for (std::size_t q = 0; q < 4; ++q) {
          std::ptrdiff_t nh = h + kOffsets[q][0], nw = w + kOffsets[q][1];
          if (nh < 0 || nh >= hs || nw < 0 || nw >= ws) continue;
          sources[token * 4 + q] = static_cast<std::ptrdiff_t>(b * t_len) + nh * ws + nw;
        }
      }
    }
  }
  return shift_by_sources("quad_shift", grid.tokens, 4, std::move(sources));
}

Tensor bi_shift(const TokenGrid& grid) {
  grid.validate();
  const auto* layout = std::get_if<TextLayout>(&grid.layout);
  RWKV_CHECK(layout != nullptr, "bi_shift requires a text layout");
  RWKV_CHECK(grid.channels() % 2 == 0, "bi_shift requires an even channel count");
  const std::size_t t_len = grid.length();
  const auto& pad = layout->pad_mask;
  std::vector<std::ptrdiff_t> sources(grid.batch() * t_len * 2, kNoSource);
  for (std::size_t b = 0; b < grid.batch(); ++b) {
    for (std::size_t t = 0; t < t_len; ++t) {
      std::size_t token = b * t_len + t;
      if (pad[token]) continue;
      if (t > 0 && !pad[token - 1]) sources[token * 2] = static_cast<std::ptrdiff_t>(token - 1);
      if (t + 1 < t_len && !pad[token + 1]) sources[token * 2 + 1] = static_cast<std::ptrdiff_t>(token + 1);
    }
  }
  return shift_by_sources("bi_shift", grid.tokens, 2, std::move(sources));
}

Tensor token_shift(const TokenGrid& grid) { return grid.is_image() ? quad_shift(grid) : bi_shift(grid); }

Tensor lerp(const Tensor& x, const Tensor& x_shift, const Tensor& eta) {
  RWKV_CHECK(x.shape() == x_shift.shape(), "lerp: x and x_shift shapes differ");
  RWKV_CHECK(eta.ndim() == 1 && eta.dim(0) == x.shape().back(), "lerp: eta must be [C]");
  return add(x, mul(x_shift, affine(eta, -1.0, 1.0)));
}

Tensor phi(const Tensor& x, const DecayParams& params) {
  params.validate(x.shape().back());
  return add(linear(tanh_op(linear(x, params.m_in)), params.m_out), params.lambda);
}

Tensor decay_factor(const Tensor& w_tilde) {
  return exp_op(affine(exp_op(clamp(w_tilde, -kDecayClamp, kDecayClamp)), -1.0, 0.0));
}

DecayOutputs decay_path(const Tensor& x, const Tensor& x_shift, const Tensor& eta_w, const DecayParams& params,
                        const DecayParams* outer) {
  RWKV_CHECK(x.shape() == x_shift.shape(), "decay_path: x and x_shift shapes differ");
  Tensor inner = phi(lerp(x, x_shift, eta_w), params);
  Tensor w_hat = add(x, mul(affine(inner, -1.0, 1.0), x_shift));
  Tensor w_tilde = phi(w_hat, outer ? *outer : params);
  return {w_tilde, decay_factor(w_tilde)};
}

}  // namespace rwkv_clip

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "rwkv_clip/shift.hpp"
#include "rwkv_clip/tensor.hpp"

namespace rwkv_clip {

enum class Modality { kImage, kText };

struct EncoderConfig {
  Modality modality = Modality::kImage;
  std::size_t embed_dim = 64;
  std::size_t layers = 4;
  std::size_t heads = 4;
  double hidden_rate = 4.0;
  // image tower
  std::size_t patch_size = 8;
  std::size_t image_size = 32;
  // text tower
  std::size_t vocab_size = 259;
  std::size_t context_len = 32;

  std::size_t shared_dim = 64;
  std::size_t decay_rank = 32;
  /// Use a second DecayParams set for the outer phi of the decay path.
  bool separate_decay_params = false;
  /// Learnable absolute position table added after the embedding.
  bool abs_pos = false;
  double ln_eps = 1e-5;

  std::size_t hidden_dim() const;
  std::size_t head_dim() const { return embed_dim / heads; }
  /// Tokens per sample: (image_size / patch_size)^2 or context_len.
  std::size_t max_tokens() const;
  void validate() const;

  static EncoderConfig desk_image();
  static EncoderConfig desk_text();
  /// B/32 tower sizes: 640 wide, 12 layers, rate 5, 8 heads, patch 32 at 224.
  static EncoderConfig paper_image();
  /// 640 wide, 6 layers, rate 3.5, 10 heads, vocab 49408, context 77.
  static EncoderConfig paper_text();
};

/// Strict parsing: unknown keys throw. `modality` picks defaults for absent keys.
EncoderConfig encoder_config_from_json(const nlohmann::json& j, Modality modality);
nlohmann::json encoder_config_to_json(const EncoderConfig& config);

struct SpatialMixParams {
  LerpParams lerp;  // targets G, R, K, V, W
  DecayParams decay;
  std::optional<DecayParams> decay_outer;
  Tensor proj_g, proj_r, proj_k, proj_v;  // [C, C]
  Tensor proj_out;                        // [C, C]
  Tensor head_ln_gain, head_ln_bias;      // [C]
  Tensor u;                               // [H, C/H]
};

struct ChannelMixParams {
  LerpParams lerp;  // targets R, K
  Tensor proj_r;    // [C, C]
  Tensor proj_k;    // [C, C_h]
  Tensor proj_v;    // [C_h, C]
};

struct BlockParams {
  Tensor ln1_gain, ln1_bias;
  SpatialMixParams spatial;
  Tensor ln2_gain, ln2_bias;
  ChannelMixParams channel;
};

enum class ParamKind {
  kWeight,  // subject to weight decay
  kNorm,    // layer-norm gain or bias
};

using ParamVisitor = std::function<void(const std::string& name, Tensor& tensor, ParamKind kind)>;

struct TowerParams {
  EncoderConfig config;
  Tensor embed;  // [3p^2, C] patch projection or [vocab, C] token table
  std::optional<Tensor> pos;  // [max_tokens, C] when config.abs_pos
  std::vector<BlockParams> blocks;
  Tensor final_ln_gain, final_ln_bias;
  Tensor proj_shared;  // [C, D_e]

  static TowerParams init(const EncoderConfig& config, std::mt19937_64& rng);

  /// Visits every learnable tensor with a stable dotted name under `prefix`.
  void for_each_param(const std::string& prefix, const ParamVisitor& visit);
  std::size_t num_scalars();
};

/// Images [B, H, W, 3] -> image token grid of (H/p) x (W/p) tokens.
TokenGrid patch_embed(const Tensor& images, std::size_t patch, const Tensor& proj);
/// Patches flattened as (rows, cols, channels): [B, T, 3 p^2]. No history.
Tensor patchify(const Tensor& images, std::size_t patch);

struct TextBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::size_t> ids;  // batch * length, 0 is padding
};

inline constexpr std::size_t kPadId = 0;

/// Row lookup; pad ids map to zero vectors and set the pad mask.
TokenGrid text_embed(const TextBatch& text, const Tensor& table);

Tensor spatial_mixing(const TokenGrid& x, const SpatialMixParams& params, std::size_t heads, double ln_eps);
Tensor channel_mixing(const TokenGrid& x, const ChannelMixParams& params);

/// Layer norm within each head's channel group, then per-channel affine.
Tensor head_layer_norm(const Tensor& x, std::size_t heads, const Tensor& gain, const Tensor& bias, double eps);

using EncoderInput = std::variant<Tensor, TextBatch>;

/// embed -> blocks (pre-norm residual spatial + channel mixing) -> final LN ->
/// mean over real tokens -> shared projection -> L2 normalize. Returns [B, D_e].
Tensor encoder_forward(const EncoderInput& input, const TowerParams& tower);
/// Same as encoder_forward on an already embedded grid.
Tensor encode_tokens(const TokenGrid& grid, const TowerParams& tower);

/// Exact learnable-scalar count of one tower.
std::size_t param_count(const EncoderConfig& config);

/// 2 x multiply-accumulates per sample for `tokens` tokens (matmuls + scan).
double flops_estimate(const EncoderConfig& config, std::size_t tokens);
/// [m, k] x [k, n]: 2mkn.
double matmul_flops(std::size_t m, std::size_t k, std::size_t n);
/// The Bi-WKV part of flops_estimate: both directions, every head and block.
double scan_flops(const EncoderConfig& config, std::size_t tokens);

}  // namespace rwkv_clip

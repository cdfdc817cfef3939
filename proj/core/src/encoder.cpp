#include "rwkv_clip/encoder.hpp"

#include <cmath>
#include <set>

#include "rwkv_clip/wkv.hpp"

namespace rwkv_clip {

namespace {

Tensor normal(Shape shape, std::mt19937_64& rng, double stddev) {
  return Tensor::randn(std::move(shape), rng, stddev, true);
}

Tensor constant(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

TokenGrid with_tokens(const TokenGrid& grid, Tensor tokens) { return {std::move(tokens), grid.layout}; }

LerpParams init_lerp(std::initializer_list<LerpTarget> targets, std::size_t c) {
  LerpParams lerp;
  for (auto t : targets) lerp.set(t, constant({c}, 0.5));
  return lerp;
}

DecayParams init_decay(std::size_t c, std::size_t rank, std::size_t layer, std::size_t layers,
                       std::mt19937_64& rng) {
  // Decay speeds spread from slow (w~1) to fast across channels, faster in deeper layers.
  const double depth = layers > 1 ? static_cast<double>(layer) / static_cast<double>(layers - 1) : 0.0;
  std::vector<double> lambda(c);
  for (std::size_t i = 0; i < c; ++i) {
    const double frac = c > 1 ? static_cast<double>(i) / static_cast<double>(c - 1) : 0.0;
    lambda[i] = -6.0 + 5.0 * std::pow(frac, 0.7 + 1.3 * depth);
  }
  return {Tensor::from({c}, std::move(lambda), true), normal({c, rank}, rng, 1.0 / std::sqrt(double(c))),
          constant({rank, c}, 0.0)};
}

void visit_lerp(const std::string& prefix, LerpParams& lerp, const ParamVisitor& visit) {
  for (auto t : kAllLerpTargets) {
    auto& slot = lerp.eta[static_cast<std::size_t>(t)];
    if (slot) visit(prefix + "eta_" + lerp_target_name(t), *slot, ParamKind::kWeight);
  }
}

void visit_decay(const std::string& prefix, DecayParams& decay, const ParamVisitor& visit) {
  visit(prefix + "lambda", decay.lambda, ParamKind::kWeight);
  visit(prefix + "m_in", decay.m_in, ParamKind::kWeight);
  visit(prefix + "m_out", decay.m_out, ParamKind::kWeight);
}

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

// ---- config ---------------------------------------------------------------------

std::size_t EncoderConfig::hidden_dim() const {
  return static_cast<std::size_t>(std::llround(hidden_rate * static_cast<double>(embed_dim)));
}

std::size_t EncoderConfig::max_tokens() const {
  if (modality == Modality::kText) return context_len;
  const std::size_t side = image_size / patch_size;
  return side * side;
}

void EncoderConfig::validate() const {
  RWKV_CHECK(embed_dim > 0 && layers > 0 && heads > 0, "EncoderConfig: sizes must be positive");
  RWKV_CHECK(embed_dim % heads == 0, "EncoderConfig: embed_dim must be divisible by heads");
  RWKV_CHECK(embed_dim % 4 == 0, "EncoderConfig: embed_dim must be divisible by 4");
  RWKV_CHECK(hidden_rate > 0 && hidden_dim() >= 1, "EncoderConfig: hidden rate gives no hidden units");
  RWKV_CHECK(shared_dim > 0, "EncoderConfig: shared_dim must be positive");
  RWKV_CHECK(decay_rank >= 1 && decay_rank <= embed_dim, "EncoderConfig: decay_rank must be in [1, C]");
  RWKV_CHECK(ln_eps > 0, "EncoderConfig: ln_eps must be positive");
  if (modality == Modality::kImage) {
    RWKV_CHECK(patch_size > 0 && image_size % patch_size == 0,
               "EncoderConfig: image_size must be a multiple of patch_size");
  } else {
    RWKV_CHECK(vocab_size > 1 && context_len > 0, "EncoderConfig: text tower needs vocab and context");
  }
}

EncoderConfig EncoderConfig::desk_image() {
  EncoderConfig c;
  c.modality = Modality::kImage;
  c.embed_dim = 64;
  c.layers = 4;
  c.heads = 4;
  c.hidden_rate = 4.0;
  c.patch_size = 8;
  c.image_size = 32;
  c.shared_dim = 64;
  return c;
}

EncoderConfig EncoderConfig::desk_text() {
  EncoderConfig c;
  c.modality = Modality::kText;
  c.embed_dim = 64;
  c.layers = 2;
  c.heads = 2;
  c.hidden_rate = 3.5;
  c.vocab_size = 259;
  c.context_len = 32;
  c.shared_dim = 64;
  return c;
}

EncoderConfig EncoderConfig::paper_image() {
  EncoderConfig c;
  c.modality = Modality::kImage;
  c.embed_dim = 640;
  c.layers = 12;
  c.heads = 8;
  c.hidden_rate = 5.0;
  c.patch_size = 32;
  c.image_size = 224;
  c.shared_dim = 640;
  c.decay_rank = 32;
  return c;
}

EncoderConfig EncoderConfig::paper_text() {
  EncoderConfig c;
  c.modality = Modality::kText;
  c.embed_dim = 640;
  c.layers = 6;
  c.heads = 10;
  c.hidden_rate = 3.5;
  c.vocab_size = 49408;
  c.context_len = 77;
  c.shared_dim = 640;
  c.decay_rank = 32;
  return c;
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j, Modality modality) {
  RWKV_CHECK(j.is_object(), "encoder config must be a JSON object");
  static const std::set<std::string> kKeys = {
      "embed_dim", "layers",     "heads",      "hidden_rate",           "patch_size", "image_size", "vocab_size",
      "context_len", "shared_dim", "decay_rank", "separate_decay_params", "abs_pos",    "ln_eps"};
  for (const auto& [key, value] : j.items()) {
    if (!kKeys.count(key)) throw Error("unknown encoder config key '" + key + "'");
  }
  EncoderConfig c = modality == Modality::kImage ? EncoderConfig::desk_image() : EncoderConfig::desk_text();
  try {
    read_key(j, "embed_dim", c.embed_dim);
    read_key(j, "layers", c.layers);
    read_key(j, "heads", c.heads);
    read_key(j, "hidden_rate", c.hidden_rate);
    read_key(j, "patch_size", c.patch_size);
    read_key(j, "image_size", c.image_size);
    read_key(j, "vocab_size", c.vocab_size);
    read_key(j, "context_len", c.context_len);
    read_key(j, "shared_dim", c.shared_dim);
    read_key(j, "decay_rank", c.decay_rank);
    read_key(j, "separate_decay_params", c.separate_decay_params);
    read_key(j, "abs_pos", c.abs_pos);
    read_key(j, "ln_eps", c.ln_eps);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("encoder config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
  nlohmann::json j = {{"embed_dim", c.embed_dim},   {"layers", c.layers},
                      {"heads", c.heads},           {"hidden_rate", c.hidden_rate},
                      {"shared_dim", c.shared_dim}, {"decay_rank", c.decay_rank},
                      {"separate_decay_params", c.separate_decay_params},
                      {"abs_pos", c.abs_pos},       {"ln_eps", c.ln_eps}};
  if (c.modality == Modality::kImage) {
    j["patch_size"] = c.patch_size;
    j["image_size"] = c.image_size;
  } else {
    j["vocab_size"] = c.vocab_size;
    j["context_len"] = c.context_len;
  }
  return j;
}

// ---- parameters ----------------------------------------------------------------------

TowerParams TowerParams::init(const EncoderConfig& config, std::mt19937_64& rng) {
  config.validate();
  const std::size_t c = config.embed_dim, ch = config.hidden_dim(), r = config.decay_rank;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(c));
  // Output projections start small so each residual block begins near identity.
  const double out_std = 0.5 * w_std / std::sqrt(static_cast<double>(config.layers));
  TowerParams t;
  t.config = config;
  if (config.modality == Modality::kImage) {
    const std::size_t fan_in = 3 * config.patch_size * config.patch_size;
    t.embed = normal({fan_in, c}, rng, 1.0 / std::sqrt(static_cast<double>(fan_in)));
  } else {
    t.embed = normal({config.vocab_size, c}, rng, 1.0);
  }
  if (config.abs_pos) t.pos = normal({config.max_tokens(), c}, rng, 0.02);
  for (std::size_t l = 0; l < config.layers; ++l) {
    BlockParams b;
    b.ln1_gain = constant({c}, 1.0);
    b.ln1_bias = constant({c}, 0.0);
    auto& s = b.spatial;
    s.lerp = init_lerp({LerpTarget::kG, LerpTarget::kR, LerpTarget::kK, LerpTarget::kV, LerpTarget::kW}, c);
    s.decay = init_decay(c, r, l, config.layers, rng);
    if (config.separate_decay_params) s.decay_outer = init_decay(c, r, l, config.layers, rng);
    s.proj_g = normal({c, c}, rng, w_std);
    s.proj_r = normal({c, c}, rng, w_std);
    s.proj_k = normal({c, c}, rng, w_std);
    s.proj_v = normal({c, c}, rng, w_std);
    s.proj_out = normal({c, c}, rng, out_std);
    s.head_ln_gain = constant({c}, 1.0);
    s.head_ln_bias = constant({c}, 0.0);
    s.u = constant({config.heads, config.head_dim()}, 0.5);
    b.ln2_gain = constant({c}, 1.0);
    b.ln2_bias = constant({c}, 0.0);
    auto& m = b.channel;
    m.lerp = init_lerp({LerpTarget::kR, LerpTarget::kK}, c);
    m.proj_r = normal({c, c}, rng, w_std);
    m.proj_k = normal({c, ch}, rng, w_std);
    m.proj_v = normal({ch, c}, rng, out_std);
    t.blocks.push_back(std::move(b));
  }
  t.final_ln_gain = constant({c}, 1.0);
  t.final_ln_bias = constant({c}, 0.0);
  t.proj_shared = normal({c, config.shared_dim}, rng, w_std);
  return t;
}

void TowerParams::for_each_param(const std::string& prefix, const ParamVisitor& visit) {
  visit(prefix + "embed", embed, ParamKind::kWeight);
  if (pos) visit(prefix + "pos", *pos, ParamKind::kWeight);
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    auto& b = blocks[l];
    const std::string p = prefix + "blocks." + (l < 10 ? "0" : "") + std::to_string(l) + ".";
    visit(p + "ln1.gain", b.ln1_gain, ParamKind::kNorm);
    visit(p + "ln1.bias", b.ln1_bias, ParamKind::kNorm);
    visit(p + "ln2.gain", b.ln2_gain, ParamKind::kNorm);
    visit(p + "ln2.bias", b.ln2_bias, ParamKind::kNorm);
    const std::string sp = p + "spatial.";
    visit_lerp(sp, b.spatial.lerp, visit);
    visit_decay(sp + "decay.", b.spatial.decay, visit);
    if (b.spatial.decay_outer) visit_decay(sp + "decay_outer.", *b.spatial.decay_outer, visit);
    visit(sp + "proj_g", b.spatial.proj_g, ParamKind::kWeight);
    visit(sp + "proj_r", b.spatial.proj_r, ParamKind::kWeight);
    visit(sp + "proj_k", b.spatial.proj_k, ParamKind::kWeight);
    visit(sp + "proj_v", b.spatial.proj_v, ParamKind::kWeight);
    visit(sp + "proj_out", b.spatial.proj_out, ParamKind::kWeight);
    visit(sp + "head_ln.gain", b.spatial.head_ln_gain, ParamKind::kNorm);
    visit(sp + "head_ln.bias", b.spatial.head_ln_bias, ParamKind::kNorm);
    visit(sp + "u", b.spatial.u, ParamKind::kWeight);
    const std::string cp = p + "channel.";
    visit_lerp(cp, b.channel.lerp, visit);
    visit(cp + "proj_r", b.channel.proj_r, ParamKind::kWeight);
    visit(cp + "proj_k", b.channel.proj_k, ParamKind::kWeight);
    visit(cp + "proj_v", b.channel.proj_v, ParamKind::kWeight);
  }
  visit(prefix + "final_ln.gain", final_ln_gain, ParamKind::kNorm);
  visit(prefix + "final_ln.bias", final_ln_bias, ParamKind::kNorm);
  visit(prefix + "proj_shared", proj_shared, ParamKind::kWeight);
}

std::size_t TowerParams::num_scalars() {
  std::size_t n = 0;
  for_each_param("", [&](const std::string&, Tensor& t, ParamKind) { n += t.numel(); });
  return n;
}

// ---- embedding --------------------------------------------------------------------------

Tensor patchify(const Tensor& images, std::size_t patch) {
  RWKV_CHECK(images.ndim() == 4 && images.dim(3) == 3, "patchify: images must be [B,H,W,3]");
  RWKV_CHECK(patch > 0, "patchify: patch size must be positive");
  const std::size_t b = images.dim(0), h = images.dim(1), w = images.dim(2);
  if (h % patch != 0 || w % patch != 0) {
    throw Error("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                " is not divisible by patch size " + std::to_string(patch));
  }
  const std::size_t gh = h / patch, gw = w / patch, flat = 3 * patch * patch;
  std::vector<double> out(b * gh * gw * flat);
  auto src = images.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ph = 0; ph < gh; ++ph)
      for (std::size_t pw = 0; pw < gw; ++pw) {
        double* dst = out.data() + ((bi * gh + ph) * gw + pw) * flat;
        for (std::size_t y = 0; y < patch; ++y)
          for (std::size_t x = 0; x < patch; ++x)
            for (std::size_t ch = 0; ch < 3; ++ch)
              *dst++ = src[((bi * h + ph * patch + y) * w + pw * patch + x) * 3 + ch];
      }
  return Tensor::from({b, gh * gw, flat}, std::move(out));
}

TokenGrid patch_embed(const Tensor& images, std::size_t patch, const Tensor& proj) {
  Tensor patches = patchify(images, patch);
  RWKV_CHECK(proj.ndim() == 2 && proj.dim(0) == patches.dim(2), "patch_embed: projection must be [3p^2, C]");
  TokenGrid grid{linear(patches, proj), ImageLayout{images.dim(1) / patch, images.dim(2) / patch}};
  grid.validate();
  return grid;
}

TokenGrid text_embed(const TextBatch& text, const Tensor& table) {
  RWKV_CHECK(text.batch > 0 && text.length > 0, "text_embed: empty batch");
  RWKV_CHECK(text.ids.size() == text.batch * text.length, "text_embed: ids must have batch*length entries");
  std::vector<bool> pad(text.ids.size());
  std::vector<bool> keep(text.ids.size());
  for (std::size_t i = 0; i < text.ids.size(); ++i) {
    pad[i] = text.ids[i] == kPadId;
    keep[i] = !pad[i];
  }
  Tensor rows = embedding(table, text.ids);
  Tensor tokens = reshape(rows, {text.batch, text.length, table.dim(1)});
  TokenGrid grid{masked_fill_tokens(tokens, keep, 0.0), TextLayout{std::move(pad)}};
  grid.validate();
  return grid;
}

// ---- mixing --------------------------------------------------------------------------------

Tensor head_layer_norm(const Tensor& x, std::size_t heads, const Tensor& gain, const Tensor& bias, double eps) {
  RWKV_CHECK(x.ndim() == 3 && x.dim(2) % heads == 0, "head_layer_norm: C must divide into heads");
  const std::size_t b = x.dim(0), t = x.dim(1), c = x.dim(2);
  Tensor grouped = reshape(x, {b, t, heads, c / heads});
  Tensor normed = reshape(layer_norm(grouped, Tensor(), Tensor(), eps), {b, t, c});
  return add(mul(normed, gain), bias);
}

Tensor spatial_mixing(const TokenGrid& x, const SpatialMixParams& p, std::size_t heads, double ln_eps) {
  x.validate();
  const Tensor& xt = x.tokens;
  Tensor shifted = token_shift(x);
  Tensor g = linear(lerp(xt, shifted, p.lerp.at(LerpTarget::kG)), p.proj_g);
  Tensor r = linear(lerp(xt, shifted, p.lerp.at(LerpTarget::kR)), p.proj_r);
  Tensor k = linear(lerp(xt, shifted, p.lerp.at(LerpTarget::kK)), p.proj_k);
  Tensor v = linear(lerp(xt, shifted, p.lerp.at(LerpTarget::kV)), p.proj_v);
  DecayOutputs decay =
      decay_path(xt, shifted, p.lerp.at(LerpTarget::kW), p.decay, p.decay_outer ? &*p.decay_outer : nullptr);
  Tensor w_tilde = decay.w_tilde;
  if (!x.is_image()) {
    // Pads neither contribute (k = v = 0) nor block decay flow (w = 1).
    const auto keep = x.keep_mask();
    k = masked_fill_tokens(k, keep, 0.0);
    v = masked_fill_tokens(v, keep, 0.0);
    w_tilde = masked_fill_tokens(w_tilde, keep, -kDecayClamp);
  }
  Tensor wkv = bi_wkv(r, k, v, w_tilde, p.u, heads);
  Tensor normed = head_layer_norm(wkv, heads, p.head_ln_gain, p.head_ln_bias, ln_eps);
  return linear(mul(silu(g), normed), p.proj_out);
}

Tensor channel_mixing(const TokenGrid& x, const ChannelMixParams& p) {
  x.validate();
  const Tensor& xt = x.tokens;
  Tensor shifted = token_shift(x);
  Tensor r = linear(lerp(xt, shifted, p.lerp.at(LerpTarget::kR)), p.proj_r);
  Tensor k = linear(lerp(xt, shifted, p.lerp.at(LerpTarget::kK)), p.proj_k);
  // Gate after the C_h -> C down-projection.
  return mul(silu(r), linear(squared_relu(k), p.proj_v));
}

// ---- tower ------------------------------------------------------------------------------------

Tensor encode_tokens(const TokenGrid& grid, const TowerParams& tower) {
  const auto& cfg = tower.config;
  grid.validate();
  RWKV_CHECK(grid.channels() == cfg.embed_dim, "encoder: token width does not match embed_dim");
  Tensor x = grid.tokens;
  if (tower.pos) {
    RWKV_CHECK(grid.length() <= cfg.max_tokens(), "encoder: more tokens than the position table holds");
    std::vector<std::size_t> positions(grid.length());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
    x = add(x, embedding(*tower.pos, positions));
    if (!grid.is_image()) x = masked_fill_tokens(x, grid.keep_mask(), 0.0);
  }
  for (const auto& block : tower.blocks) {
    TokenGrid normed1 = with_tokens(grid, layer_norm(x, block.ln1_gain, block.ln1_bias, cfg.ln_eps));
    x = add(x, spatial_mixing(normed1, block.spatial, cfg.heads, cfg.ln_eps));
    TokenGrid normed2 = with_tokens(grid, layer_norm(x, block.ln2_gain, block.ln2_bias, cfg.ln_eps));
    x = add(x, channel_mixing(normed2, block.channel));
  }
  x = layer_norm(x, tower.final_ln_gain, tower.final_ln_bias, cfg.ln_eps);
  Tensor pooled = mean_pool_tokens(x, grid.keep_mask());
  return l2_normalize(linear(pooled, tower.proj_shared));
}

Tensor encoder_forward(const EncoderInput& input, const TowerParams& tower) {
  const auto& cfg = tower.config;
  if (const auto* images = std::get_if<Tensor>(&input)) {
    RWKV_CHECK(cfg.modality == Modality::kImage, "encoder_forward: image input given to a text tower");
    return encode_tokens(patch_embed(*images, cfg.patch_size, tower.embed), tower);
  }
  const auto& text = std::get<TextBatch>(input);
  RWKV_CHECK(cfg.modality == Modality::kText, "encoder_forward: text input given to an image tower");
  RWKV_CHECK(text.length <= cfg.context_len, "encoder_forward: sequence longer than context_len");
  return encode_tokens(text_embed(text, tower.embed), tower);
}

// ---- accounting ------------------------------------------------------------------------------

std::size_t param_count(const EncoderConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.embed_dim, ch = cfg.hidden_dim(), r = cfg.decay_rank;
  const std::size_t embed = cfg.modality == Modality::kImage ? 3 * cfg.patch_size * cfg.patch_size * c
                                                             : cfg.vocab_size * c;
  const std::size_t decay = c + 2 * c * r;
  const std::size_t spatial = 5 * c                                   // eta G,R,K,V,W
                              + decay * (cfg.separate_decay_params ? 2 : 1)
                              + 5 * c * c                             // g, r, k, v, out
                              + 2 * c                                 // head LN
                              + c;                                    // u
  const std::size_t channel = 2 * c + c * c + 2 * c * ch;
  const std::size_t norms = 4 * c;
  const std::size_t pos = cfg.abs_pos ? cfg.max_tokens() * c : 0;
  return embed + pos + cfg.layers * (spatial + channel + norms) + 2 * c + c * cfg.shared_dim;
}

double matmul_flops(std::size_t m, std::size_t k, std::size_t n) {
  return 2.0 * static_cast<double>(m) * static_cast<double>(k) * static_cast<double>(n);
}

double scan_flops(const EncoderConfig& cfg, std::size_t tokens) {
  cfg.validate();
  const std::size_t d = cfg.head_dim();
  // Per direction, token and head: a d x d state update plus a readout.
  const double per_direction = 2.0 * matmul_flops(tokens, d, d);
  return static_cast<double>(cfg.layers * cfg.heads) * 2.0 * per_direction;
}

double flops_estimate(const EncoderConfig& cfg, std::size_t tokens) {
  cfg.validate();
  const std::size_t c = cfg.embed_dim, ch = cfg.hidden_dim(), r = cfg.decay_rank, t = tokens;
  double per_block = 5 * matmul_flops(t, c, c)      // g, r, k, v, out
                     + 2 * (matmul_flops(t, c, r) + matmul_flops(t, r, c))  // inner and outer phi
                     + matmul_flops(t, c, c) + matmul_flops(t, c, ch) + matmul_flops(t, ch, c);  // channel mix
  double total = static_cast<double>(cfg.layers) * per_block + scan_flops(cfg, tokens) + matmul_flops(1, c, cfg.shared_dim);
  if (cfg.modality == Modality::kImage) total += matmul_flops(t, 3 * cfg.patch_size * cfg.patch_size, c);
  return total;
}

}  // namespace rwkv_clip

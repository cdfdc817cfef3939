#include "rwkv_clip/grad_suite.hpp"

#include <cmath>
#include <memory>
#include <random>

#include "rwkv_clip/contrastive.hpp"
#include "rwkv_clip/encoder.hpp"
#include "rwkv_clip/shift.hpp"
#include "rwkv_clip/wkv.hpp"

namespace rwkv_clip {

namespace {

struct Case {
  std::string module;
  std::string name;
  DifferentiableFn fn;
  std::vector<Tensor> inputs;
  bool end_to_end = false;
};

class SuiteBuilder {
 public:
  explicit SuiteBuilder(std::uint64_t seed) : rng_(seed) {}

  Tensor param(Shape shape, double stddev = 1.0) { return Tensor::randn(std::move(shape), rng_, stddev, true); }
  Tensor param_uniform(Shape shape, double lo, double hi) { return Tensor::uniform(std::move(shape), rng_, lo, hi, true); }
  Tensor constant(Shape shape, double stddev = 1.0) { return Tensor::randn(std::move(shape), rng_, stddev); }

  // sum(f * weights) with fixed random weights, so every output coordinate matters differently.
  DifferentiableFn weighted(DifferentiableFn f, const Shape& out_shape) {
    Tensor weights = constant(out_shape);
    return [f = std::move(f), weights](const std::vector<Tensor>& in) { return mul(f(in), weights); };
  }

  void add(std::string module, std::string name, DifferentiableFn f, std::vector<Tensor> inputs,
           bool end_to_end = false) {
    Shape out_shape;
    {
      NoGradGuard no_grad;
      out_shape = f(inputs).shape();
    }
    cases_.push_back({std::move(module), std::move(name), weighted(std::move(f), out_shape), std::move(inputs),
                      end_to_end});
  }

  std::mt19937_64& rng() { return rng_; }
  std::vector<Case>& cases() { return cases_; }

 private:
  std::mt19937_64 rng_;
  std::vector<Case> cases_;
};

// Values kept away from the kinks of clamp and squared_relu.
Tensor away_from_zero(SuiteBuilder& b, Shape shape) {
  Tensor t = b.param(std::move(shape));
  for (double& v : t.mutable_data()) v = v >= 0 ? v + 0.2 : v - 0.2;
  return t;
}

TextLayout text_layout(std::size_t batch, std::size_t length, const std::vector<std::size_t>& lengths) {
  TextLayout layout;
  layout.pad_mask.assign(batch * length, false);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = lengths[b]; t < length; ++t) layout.pad_mask[b * length + t] = true;
  return layout;
}

void add_tensor_cases(SuiteBuilder& b) {
  const std::string m = "tensor-autodiff";
  b.add(m, "add", [](auto& in) { return add(in[0], in[1]); }, {b.param({3, 4}), b.param({3, 4})});
  b.add(m, "add_broadcast", [](auto& in) { return add(in[0], in[1]); }, {b.param({2, 3, 4}), b.param({4})});
  b.add(m, "sub", [](auto& in) { return sub(in[0], in[1]); }, {b.param({2, 3, 4}), b.param({3, 4})});
  b.add(m, "mul", [](auto& in) { return mul(in[0], in[1]); }, {b.param({3, 4}), b.param({3, 4})});
  b.add(m, "mul_broadcast", [](auto& in) { return mul(in[0], in[1]); }, {b.param({2, 3, 4}), b.param({4})});
  b.add(m, "affine", [](auto& in) { return affine(in[0], -1.5, 0.25); }, {b.param({5})});
  b.add(m, "scale_by", [](auto& in) { return scale_by(in[0], in[1]); }, {b.param({2, 3}), b.param({1})});
  b.add(m, "clamp", [](auto& in) { return clamp(in[0], -0.1, 0.1); }, {away_from_zero(b, {12})});
  b.add(m, "silu", [](auto& in) { return silu(in[0]); }, {b.param({8}, 2.0)});
  b.add(m, "squared_relu", [](auto& in) { return squared_relu(in[0]); }, {away_from_zero(b, {12})});
  b.add(m, "tanh", [](auto& in) { return tanh_op(in[0]); }, {b.param({8})});
  b.add(m, "sigmoid", [](auto& in) { return sigmoid(in[0]); }, {b.param({8}, 2.0)});
  b.add(m, "exp", [](auto& in) { return exp_op(in[0]); }, {b.param({8})});
  b.add(m, "sum", [](auto& in) { return sum(in[0]); }, {b.param({2, 3})});
  b.add(m, "mean", [](auto& in) { return mean(in[0]); }, {b.param({2, 3})});
  b.add(m, "matmul", [](auto& in) { return matmul(in[0], in[1]); }, {b.param({3, 4}), b.param({4, 5})});
  b.add(m, "linear", [](auto& in) { return linear(in[0], in[1]); }, {b.param({2, 3, 4}), b.param({4, 2})});
  b.add(m, "reshape", [](auto& in) { return reshape(in[0], {6, 2}); }, {b.param({3, 4})});
  b.add(m, "transpose", [](auto& in) { return transpose(in[0]); }, {b.param({3, 4})});
  b.add(m, "layer_norm", [](auto& in) { return layer_norm(in[0], in[1], in[2], 1e-5); },
        {b.param({3, 6}), b.param({6}), b.param({6})});
  b.add(m, "layer_norm_plain", [](auto& in) { return layer_norm(in[0], Tensor(), Tensor(), 1e-5); },
        {b.param({2, 2, 5})});
  b.add(m, "log_softmax", [](auto& in) { return log_softmax(in[0]); }, {b.param({3, 5}, 2.0)});
  b.add(m, "diagonal", [](auto& in) { return diagonal(in[0]); }, {b.param({4, 4})});
  b.add(m, "l2_normalize", [](auto& in) { return l2_normalize(in[0]); }, {b.param({3, 5})});
  const std::vector<std::size_t> ids = {2, 0, 2, 4};
  b.add(m, "embedding", [ids](auto& in) { return embedding(in[0], ids); }, {b.param({5, 3})});
  const std::vector<bool> keep = {true, true, false, true, false, false};
  b.add(m, "masked_fill_tokens", [keep](auto& in) { return masked_fill_tokens(in[0], keep, -2.0); },
        {b.param({2, 3, 4})});
  b.add(m, "mean_pool_tokens", [keep](auto& in) { return mean_pool_tokens(in[0], keep); }, {b.param({2, 3, 4})});
}

void add_shift_cases(SuiteBuilder& b) {
  const std::string m = "shift-lerp";
  b.add(m, "quad_shift",
        [](auto& in) { return quad_shift({in[0], ImageLayout{2, 3}}); }, {b.param({2, 6, 8})});
  const TextLayout text = text_layout(2, 5, {5, 3});
  b.add(m, "bi_shift", [text](auto& in) { return bi_shift({in[0], text}); }, {b.param({2, 5, 4})});
  b.add(m, "lerp", [](auto& in) { return lerp(in[0], in[1], in[2]); },
        {b.param({2, 3, 4}), b.param({2, 3, 4}), b.param({4})});
  b.add(m, "phi", [](auto& in) { return phi(in[0], {in[1], in[2], in[3]}); },
        {b.param({2, 3, 4}), b.param({4}), b.param({4, 2}, 0.5), b.param({2, 4}, 0.5)});
  b.add(m, "decay_factor", [](auto& in) { return decay_factor(in[0]); }, {b.param({10})});
  auto decay = [](const std::vector<Tensor>& in) {
    return decay_path(in[0], in[1], in[2], {in[3], in[4], in[5]});
  };
  std::vector<Tensor> decay_inputs = {b.param({2, 3, 4}, 0.5), b.param({2, 3, 4}, 0.5), b.param({4}),
                                      b.param({4}, 0.5),       b.param({4, 2}, 0.5),    b.param({2, 4}, 0.5)};
  b.add(m, "decay_path.w_tilde", [decay](auto& in) { return decay(in).w_tilde; }, decay_inputs);
  b.add(m, "decay_path.w", [decay](auto& in) { return decay(in).w; }, decay_inputs);
  b.add(m, "decay_path.outer",
        [](auto& in) {
          DecayParams outer{in[6], in[7], in[8]};
          return decay_path(in[0], in[1], in[2], {in[3], in[4], in[5]}, &outer).w_tilde;
        },
        {b.param({1, 3, 4}, 0.5), b.param({1, 3, 4}, 0.5), b.param({4}), b.param({4}, 0.5), b.param({4, 2}, 0.5),
         b.param({2, 4}, 0.5), b.param({4}, 0.5), b.param({4, 2}, 0.5), b.param({2, 4}, 0.5)});
}

void add_wkv_cases(SuiteBuilder& b) {
  const std::string m = "wkv-kernel";
  b.add(m, "bi_wkv", [](auto& in) { return bi_wkv(in[0], in[1], in[2], in[3], in[4], 2); },
        {b.param({2, 5, 6}), b.param({2, 5, 6}), b.param({2, 5, 6}), b.param_uniform({2, 5, 6}, -3.0, 1.0),
         b.param({2, 3})});
  b.add(m, "bi_wkv_single_token", [](auto& in) { return bi_wkv(in[0], in[1], in[2], in[3], in[4], 1); },
        {b.param({1, 1, 3}), b.param({1, 1, 3}), b.param({1, 1, 3}), b.param({1, 1, 3}), b.param({1, 3})});
}

EncoderConfig micro_config(Modality modality) {
  EncoderConfig c;
  c.modality = modality;
  c.embed_dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.hidden_rate = 1.5;
  c.patch_size = 2;
  c.image_size = 4;
  c.vocab_size = 12;
  c.context_len = 5;
  c.shared_dim = 4;
  c.decay_rank = 2;
  return c;
}

// Replaces every parameter with generic random values so no path is degenerate.
void randomize(TowerParams& tower, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 0.5);
  tower.for_each_param("", [&](const std::string& name, Tensor& t, ParamKind kind) {
    const bool gain = name.size() >= 4 && name.compare(name.size() - 4, 4, "gain") == 0;
    for (double& v : t.mutable_data()) v = (kind == ParamKind::kNorm && gain ? 1.0 : 0.0) + noise(rng);
  });
}

std::vector<Tensor> tower_inputs(TowerParams& tower) {
  std::vector<Tensor> inputs;
  tower.for_each_param("", [&](const std::string&, Tensor& t, ParamKind) { inputs.push_back(t); });
  return inputs;
}

void add_block_cases(SuiteBuilder& b) {
  const std::string m = "blocks-encoders";
  auto image_tower = std::make_shared<TowerParams>(TowerParams::init(micro_config(Modality::kImage), b.rng()));
  auto text_tower = std::make_shared<TowerParams>(TowerParams::init(micro_config(Modality::kText), b.rng()));
  randomize(*image_tower, b.rng());
  randomize(*text_tower, b.rng());

  // Pixels are data, only the projection is trained.
  Tensor pixels = b.constant({2, 4, 4, 3});
  b.add(m, "patch_embed", [pixels](auto& in) { return patch_embed(pixels, 2, in[0]).tokens; },
        {b.param({12, 8}, 0.3)});
  const std::vector<std::size_t> ids = {1, 5, 7, 2, 0, 1, 9, 2, 0, 0};
  b.add(m, "text_embed", [ids](auto& in) { return text_embed({2, 5, ids}, in[0]).tokens; }, {b.param({12, 8})});
  b.add(m, "head_layer_norm", [](auto& in) { return head_layer_norm(in[0], 2, in[1], in[2], 1e-5); },
        {b.param({2, 3, 8}), b.param({8}), b.param({8})});

  const SpatialMixParams& sp = image_tower->blocks[0].spatial;
  auto spatial_inputs = [&b, &sp](Shape x_shape) {
    return std::vector<Tensor>{b.param(std::move(x_shape)), sp.proj_g, sp.proj_r, sp.proj_k, sp.proj_v,
                               sp.proj_out, sp.decay.lambda, sp.decay.m_in, sp.decay.m_out, sp.u,
                               sp.lerp.at(LerpTarget::kW), sp.head_ln_gain};
  };
  b.add(m, "spatial_mixing.image",
        [image_tower](auto& in) {
          const auto& p = image_tower->blocks[0].spatial;
          return spatial_mixing({in[0], ImageLayout{2, 2}}, p, 2, 1e-5);
        },
        spatial_inputs({2, 4, 8}));
  const TextLayout text = text_layout(2, 5, {5, 3});
  b.add(m, "spatial_mixing.text",
        [image_tower, text](auto& in) {
          const auto& p = image_tower->blocks[0].spatial;
          return spatial_mixing({in[0], text}, p, 2, 1e-5);
        },
        spatial_inputs({2, 5, 8}));

  const ChannelMixParams& cp = image_tower->blocks[0].channel;
  b.add(m, "channel_mixing",
        [image_tower](auto& in) { return channel_mixing({in[0], ImageLayout{2, 2}}, image_tower->blocks[0].channel); },
        {b.param({2, 4, 8}), cp.proj_r, cp.proj_k, cp.proj_v, cp.lerp.at(LerpTarget::kK)});

  Tensor images = b.constant({2, 4, 4, 3});
  b.add(m, "encoder_forward.image", [image_tower, images](auto&) { return encoder_forward(images, *image_tower); },
        tower_inputs(*image_tower), true);
  const TextBatch batch{2, 5, {1, 5, 7, 2, 0, 1, 9, 11, 2, 0}};
  b.add(m, "encoder_forward.text", [text_tower, batch](auto&) { return encoder_forward(batch, *text_tower); },
        tower_inputs(*text_tower), true);
}

void add_contrastive_cases(SuiteBuilder& b) {
  const std::string m = "contrastive";
  b.add(m, "similarity_matrix", [](auto& in) { return similarity_matrix({l2_normalize(in[0]), l2_normalize(in[1])}); },
        {b.param({4, 3}), b.param({4, 3})});
  b.add(m, "clip_loss",
        [](auto& in) { return clip_loss({l2_normalize(in[0]), l2_normalize(in[1])}, TemperatureParam{in[2]}); },
        {b.param({4, 3}), b.param({4, 3}), Tensor::scalar(std::log(1.0 / 0.07), true)});
  b.add(m, "clip_loss_mean",
        [](auto& in) { return clip_loss_mean({l2_normalize(in[0]), l2_normalize(in[1])}, TemperatureParam{in[2]}); },
        {b.param({3, 5}), b.param({3, 5}), Tensor::scalar(1.0, true)});
  b.add(m, "clip_loss_from_logits", [](auto& in) { return clip_loss_from_logits(in[0]); }, {b.param({4, 4}, 2.0)});
  b.add(m, "inverse_tau", [](auto& in) { return TemperatureParam{in[0]}.inverse_tau(); },
        {Tensor::scalar(2.0, true)});
}

}  // namespace

std::vector<GradSuiteResult> run_grad_suite(const GradSuiteOptions& options,
                                            const std::function<void(const GradSuiteResult&)>& on_result) {
  SuiteBuilder builder(options.seed);
  add_tensor_cases(builder);
  add_shift_cases(builder);
  add_wkv_cases(builder);
  add_block_cases(builder);
  add_contrastive_cases(builder);

  std::vector<GradSuiteResult> results;
  for (auto& c : builder.cases()) {
    GradCheckOptions gc;
    gc.step = options.step;
    gc.abs_tol = options.abs_tol;
    gc.rel_tol = c.end_to_end ? options.end_to_end_rel_tol : options.rel_tol;
    GradSuiteResult r{c.module, grad_check(c.fn, c.inputs, gc, c.name), gc.rel_tol};
    if (on_result) on_result(r);
    results.push_back(std::move(r));
  }
  return results;
}

}  // namespace rwkv_clip

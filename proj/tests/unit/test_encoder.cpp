#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "gen.hpp"
#include "rwkv_clip/encoder.hpp"
#include "rwkv_clip/grad_check.hpp"
#include "rwkv_clip/grad_suite.hpp"

namespace rwkv_clip {
namespace {

using testing::at;
using testing::Gen;
using testing::values;

using Rows = std::vector<std::vector<double>>;  // [T][C]

// ---- plain-loop reference pieces ----------------------------------------------------

Rows rows_of(const Tensor& x, std::size_t b) {
  const std::size_t T = x.dim(1), C = x.dim(2);
  Rows out(T, std::vector<double>(C));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t c = 0; c < C; ++c) out[t][c] = at(x, {b, t, c});
  return out;
}

Rows matmul_rows(const Rows& x, const Tensor& w) {
  const std::size_t in = w.dim(0), out_dim = w.dim(1);
  Rows y(x.size(), std::vector<double>(out_dim, 0.0));
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t j = 0; j < out_dim; ++j)
      for (std::size_t i = 0; i < in; ++i) y[t][j] += x[t][i] * at(w, {i, j});
  return y;
}

// Image: quartile q reads from up, down, left, right. Text: first half reads
// t-1, second half t+1; pads neither send nor receive.
Rows shift_rows(const Rows& x, const TokenGrid& grid, std::size_t b) {
  const std::size_t T = x.size(), C = x[0].size();
  Rows out(T, std::vector<double>(C, 0.0));
  if (grid.is_image()) {
    const auto& lay = std::get<ImageLayout>(grid.layout);
    const long H = static_cast<long>(lay.h_tokens), W = static_cast<long>(lay.w_tokens);
    const long dh[4] = {-1, 1, 0, 0}, dw[4] = {0, 0, -1, 1};
    for (long h = 0; h < H; ++h)
      for (long w = 0; w < W; ++w)
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t q = c / (C / 4);
          const long sh = h + dh[q], sw = w + dw[q];
          if (sh < 0 || sh >= H || sw < 0 || sw >= W) continue;
          out[h * W + w][c] = x[sh * W + sw][c];
        }
    return out;
  }
  const auto& pad = std::get<TextLayout>(grid.layout).pad_mask;
  auto is_pad = [&](long t) { return pad[b * T + t]; };
  for (long t = 0; t < static_cast<long>(T); ++t) {
    if (is_pad(t)) continue;
    for (std::size_t c = 0; c < C; ++c) {
      const long src = c < C / 2 ? t - 1 : t + 1;
      if (src < 0 || src >= static_cast<long>(T) || is_pad(src)) continue;
      out[t][c] = x[src][c];
    }
  }
  return out;
}

Rows lerp_rows(const Rows& x, const Rows& xs, const Tensor& eta) {
  Rows out = x;
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t c = 0; c < x[t].size(); ++c) out[t][c] += (1.0 - eta[c]) * xs[t][c];
  return out;
}

Rows phi_rows(const Rows& x, const DecayParams& p) {
  Rows hidden = matmul_rows(x, p.m_in);
  for (auto& row : hidden)
    for (double& v : row) v = std::tanh(v);
  Rows out = matmul_rows(hidden, p.m_out);
  for (auto& row : out)
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += p.lambda[c];
  return out;
}

double silu_ref(double x) { return x / (1.0 + std::exp(-x)); }

// Direct double sum per head: the weight of key i seen from t is the product of
// decays strictly between them; i == t uses the bonus u.
Rows wkv_rows(const Rows& r, const Rows& k, const Rows& v, const Rows& wt, const Tensor& u, std::size_t heads) {
  const std::size_t T = r.size(), C = r[0].size(), d = C / heads;
  Rows out(T, std::vector<double>(C, 0.0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < d; ++c)
        for (std::size_t i = 0; i < T; ++i)
          for (std::size_t e = 0; e < d; ++e) {
            const std::size_t ce = h * d + e;
            double coef = 1.0;
            if (i == t) {
              coef = at(u, {h, e});
            } else {
              for (std::size_t j = std::min(i, t) + 1; j < std::max(i, t); ++j)
                coef *= std::exp(-std::exp(std::clamp(wt[j][ce], -40.0, 40.0)));
            }
            out[t][h * d + c] += r[t][ce] * coef * k[i][ce] * v[i][h * d + c];
          }
  return out;
}

std::vector<double> normalize_group(std::vector<double> x, double eps) {
  double mu = 0.0, var = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(x.size());
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(x.size());
  for (double& v : x) v = (v - mu) / std::sqrt(var + eps);
  return x;
}

Rows head_ln_rows(const Rows& x, std::size_t heads, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t C = x[0].size(), d = C / heads;
  Rows out = x;
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<double> group(x[t].begin() + h * d, x[t].begin() + (h + 1) * d);
      group = normalize_group(group, eps);
      for (std::size_t e = 0; e < d; ++e) out[t][h * d + e] = group[e] * gain[h * d + e] + bias[h * d + e];
    }
  return out;
}

Rows spatial_oracle(const TokenGrid& grid, std::size_t b, const SpatialMixParams& p, std::size_t heads, double eps) {
  const Rows x = rows_of(grid.tokens, b);
  const Rows xs = shift_rows(x, grid, b);
  const Rows g = matmul_rows(lerp_rows(x, xs, p.lerp.at(LerpTarget::kG)), p.proj_g);
  const Rows r = matmul_rows(lerp_rows(x, xs, p.lerp.at(LerpTarget::kR)), p.proj_r);
  Rows k = matmul_rows(lerp_rows(x, xs, p.lerp.at(LerpTarget::kK)), p.proj_k);
  Rows v = matmul_rows(lerp_rows(x, xs, p.lerp.at(LerpTarget::kV)), p.proj_v);
  const Rows inner = phi_rows(lerp_rows(x, xs, p.lerp.at(LerpTarget::kW)), p.decay);
  Rows w_hat = x;
  for (std::size_t t = 0; t < x.size(); ++t)
    for (std::size_t c = 0; c < x[t].size(); ++c) w_hat[t][c] += (1.0 - inner[t][c]) * xs[t][c];
  Rows wt = phi_rows(w_hat, p.decay_outer ? *p.decay_outer : p.decay);
  if (!grid.is_image()) {
    const auto& pad = std::get<TextLayout>(grid.layout).pad_mask;
    for (std::size_t t = 0; t < x.size(); ++t) {
      if (!pad[b * x.size() + t]) continue;
      std::fill(k[t].begin(), k[t].end(), 0.0);
      std::fill(v[t].begin(), v[t].end(), 0.0);
      std::fill(wt[t].begin(), wt[t].end(), -40.0);
    }
  }
  Rows mixed = head_ln_rows(wkv_rows(r, k, v, wt, p.u, heads), heads, p.head_ln_gain, p.head_ln_bias, eps);
  for (std::size_t t = 0; t < mixed.size(); ++t)
    for (std::size_t c = 0; c < mixed[t].size(); ++c) mixed[t][c] *= silu_ref(g[t][c]);
  return matmul_rows(mixed, p.proj_out);
}

Rows channel_oracle(const TokenGrid& grid, std::size_t b, const ChannelMixParams& p) {
  const Rows x = rows_of(grid.tokens, b);
  const Rows xs = shift_rows(x, grid, b);
  const Rows r = matmul_rows(lerp_rows(x, xs, p.lerp.at(LerpTarget::kR)), p.proj_r);
  Rows k = matmul_rows(lerp_rows(x, xs, p.lerp.at(LerpTarget::kK)), p.proj_k);
  for (auto& row : k)
    for (double& v : row) v = v > 0 ? v * v : 0.0;
  Rows out = matmul_rows(k, p.proj_v);
  for (std::size_t t = 0; t < out.size(); ++t)
    for (std::size_t c = 0; c < out[t].size(); ++c) out[t][c] *= silu_ref(r[t][c]);
  return out;
}

double max_rows_diff(const Tensor& got, std::size_t b, const Rows& want) {
  double m = 0.0;
  for (std::size_t t = 0; t < want.size(); ++t)
    for (std::size_t c = 0; c < want[t].size(); ++c) m = std::max(m, std::abs(at(got, {b, t, c}) - want[t][c]));
  return m;
}

// ---- fixtures ------------------------------------------------------------------------

EncoderConfig micro(Modality modality) {
  EncoderConfig c;
  c.modality = modality;
  c.embed_dim = 8;
  c.layers = 2;
  c.heads = 2;
  c.hidden_rate = 1.5;
  c.patch_size = 2;
  c.image_size = 4;
  c.vocab_size = 12;
  c.context_len = 6;
  c.shared_dim = 4;
  c.decay_rank = 2;
  return c;
}

void randomize(TowerParams& tower, Gen& g, double sd = 0.5) {
  tower.for_each_param("", [&](const std::string&, Tensor& t, ParamKind) {
    for (double& v : t.mutable_data()) v = g.normal(sd);
  });
  // Norm gains near 1 keep activations in a typical range.
  for (auto& block : tower.blocks) {
    for (Tensor* gain : {&block.ln1_gain, &block.ln2_gain, &block.spatial.head_ln_gain})
      for (double& v : gain->mutable_data()) v += 1.0;
  }
  for (double& v : tower.final_ln_gain.mutable_data()) v += 1.0;
}

TowerParams random_tower(const EncoderConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TowerParams tower = TowerParams::init(cfg, rng);
  Gen g(seed + 1);
  randomize(tower, g);
  return tower;
}

TokenGrid text_grid(Tensor tokens, std::vector<bool> pads) { return {std::move(tokens), TextLayout{std::move(pads)}}; }

TextBatch batch_of(std::vector<std::vector<std::size_t>> rows, std::size_t length) {
  TextBatch text;
  text.batch = rows.size();
  text.length = length;
  for (auto& row : rows) {
    row.resize(length, kPadId);
    text.ids.insert(text.ids.end(), row.begin(), row.end());
  }
  return text;
}

// ---- patch embedding -------------------------------------------------------------------

TEST(PatchEmbed, TokenIsFlattenedPatchTimesProjection) {
  Gen g(3);
  Tensor image = g.tensor_uniform({1, 64, 64, 3}, 0.0, 1.0);
  Tensor proj = g.tensor({3 * 32 * 32, 5});
  TokenGrid grid = patch_embed(image, 32, proj);
  ASSERT_EQ(grid.tokens.shape(), (Shape{1, 4, 5}));
  const auto& lay = std::get<ImageLayout>(grid.layout);
  EXPECT_EQ(lay.h_tokens, 2u);
  EXPECT_EQ(lay.w_tokens, 2u);
  for (std::size_t row = 0; row < 2; ++row)
    for (std::size_t col = 0; col < 2; ++col)
      for (std::size_t c = 0; c < 5; ++c) {
        double want = 0.0;
        for (std::size_t i = 0; i < 32; ++i)
          for (std::size_t j = 0; j < 32; ++j)
            for (std::size_t ch = 0; ch < 3; ++ch)
              want += at(image, {0, row * 32 + i, col * 32 + j, ch}) * at(proj, {(i * 32 + j) * 3 + ch, c});
        EXPECT_NEAR(at(grid.tokens, {0, row * 2 + col, c}), want, 1e-11) << row << "," << col;
      }
}

TEST(PatchEmbed, StandardGridHas49Tokens) {
  Gen g(4);
  Tensor image = g.tensor_uniform({1, 224, 224, 3}, 0.0, 1.0);
  TokenGrid grid = patch_embed(image, 32, g.tensor({3 * 32 * 32, 2}));
  EXPECT_EQ(grid.length(), 49u);
  EXPECT_EQ(std::get<ImageLayout>(grid.layout).h_tokens, 7u);
}

TEST(PatchEmbed, WholeImagePatchGivesOneToken) {
  Gen g(5);
  Tensor image = Tensor::full({2, 32, 32, 3}, 0.25);
  Tensor proj = g.tensor({3 * 32 * 32, 3});
  TokenGrid grid = patch_embed(image, 32, proj);
  ASSERT_EQ(grid.tokens.shape(), (Shape{2, 1, 3}));
  for (std::size_t c = 0; c < 3; ++c) {
    double col = 0.0;
    for (std::size_t i = 0; i < proj.dim(0); ++i) col += at(proj, {i, c});
    EXPECT_NEAR(at(grid.tokens, {1, 0, c}), 0.25 * col, 1e-11);
  }
}

TEST(PatchEmbed, TokenCountLawProperty) {
  testing::for_all(11, 30, [](Gen& g, std::size_t) {
    const std::size_t p = std::size_t{1} << g.size(0, 2);
    const std::size_t hp = g.size(1, 4), wp = g.size(1, 4);
    Tensor image = g.tensor_uniform({1, hp * p, wp * p, 3}, 0.0, 1.0);
    TokenGrid grid = patch_embed(image, p, g.tensor({3 * p * p, 2}));
    EXPECT_EQ(grid.length(), hp * wp);
    const auto& lay = std::get<ImageLayout>(grid.layout);
    EXPECT_EQ(lay.h_tokens, hp);
    EXPECT_EQ(lay.w_tokens, wp);
  });
}

TEST(PatchEmbed, RejectsIndivisibleSizeAndWrongProjection) {
  Gen g(6);
  EXPECT_THROW(patch_embed(g.tensor({1, 6, 8, 3}), 4, g.tensor({48, 2})), Error);
  EXPECT_THROW(patch_embed(g.tensor({1, 8, 8, 3}), 4, g.tensor({47, 2})), Error);
}

// ---- text embedding ----------------------------------------------------------------------

TEST(TextEmbed, PadsAreZeroVectorsAndMasked) {
  Gen g(7);
  Tensor table = g.tensor({6, 4});
  TokenGrid grid = text_embed(batch_of({{1, 3, 5}}, 5), table);
  const auto& pads = std::get<TextLayout>(grid.layout).pad_mask;
  EXPECT_EQ(pads, (std::vector<bool>{false, false, false, true, true}));
  for (std::size_t c = 0; c < 4; ++c) {
    EXPECT_EQ(at(grid.tokens, {0, 3, c}), 0.0);
    EXPECT_EQ(at(grid.tokens, {0, 4, c}), 0.0);
    EXPECT_EQ(at(grid.tokens, {0, 1, c}), at(table, {3, c}));
  }
}

TEST(TextEmbed, BatchLookupEqualsStackedRows) {
  testing::for_all(12, 20, [](Gen& g, std::size_t) {
    const std::size_t vocab = g.size(3, 10), len = g.size(1, 6), batch = g.size(1, 4);
    Tensor table = g.tensor({vocab, 3});
    std::vector<std::vector<std::size_t>> rows(batch);
    for (auto& row : rows) {
      const std::size_t real = g.size(1, len);
      for (std::size_t i = 0; i < real; ++i) row.push_back(g.size(1, vocab - 1));
    }
    TokenGrid all = text_embed(batch_of(rows, len), table);
    for (std::size_t b = 0; b < batch; ++b) {
      TokenGrid one = text_embed(batch_of({rows[b]}, len), table);
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(at(all.tokens, {b, t, c}), at(one.tokens, {0, t, c}));
    }
  });
}

TEST(TextEmbed, OutOfRangeIdThrows) {
  Gen g(8);
  EXPECT_THROW(text_embed(batch_of({{1, 9}}, 2), g.tensor({6, 4})), Error);
}

// ---- spatial mixing -----------------------------------------------------------------------

TEST(SpatialMixing, ZeroInputGivesZero) {
  auto tower = random_tower(micro(Modality::kImage), 21);
  TokenGrid grid{Tensor::zeros({2, 4, 8}), ImageLayout{2, 2}};
  Tensor out = spatial_mixing(grid, tower.blocks[0].spatial, 2, 1e-5);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(SpatialMixing, SingleTextTokenIsBonusTermThroughHeadNorm) {
  // Identity projections: g = r = k = v = x, and with no neighbours only the
  // bonus term survives: o = (sum_e u_e x_e^2) x within each head.
  Gen g(22);
  const std::size_t C = 4, H = 2, d = 2;
  auto tower = random_tower(micro(Modality::kText), 22);
  SpatialMixParams p = tower.blocks[0].spatial;
  std::vector<double> eye(C * C, 0.0);
  for (std::size_t i = 0; i < C; ++i) eye[i * C + i] = 1.0;
  for (Tensor* m : {&p.proj_g, &p.proj_r, &p.proj_k, &p.proj_v, &p.proj_out}) *m = Tensor::from({C, C}, eye);
  for (auto t : kAllLerpTargets) p.lerp.set(t, g.tensor({C}));
  p.decay = {g.tensor({C}), g.tensor({C, 2}), g.tensor({2, C})};
  p.head_ln_gain = g.tensor({C});
  p.head_ln_bias = g.tensor({C});
  p.u = g.tensor({H, d});
  Tensor x = g.tensor({1, 1, C});
  Tensor out = spatial_mixing(text_grid(x, {false}), p, H, 1e-5);
  for (std::size_t h = 0; h < H; ++h) {
    double s = 0.0;
    for (std::size_t e = 0; e < d; ++e) s += p.u[h * d + e] * x[h * d + e] * x[h * d + e];
    std::vector<double> o(d);
    for (std::size_t c = 0; c < d; ++c) o[c] = s * x[h * d + c];
    o = normalize_group(o, 1e-5);
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t ch = h * d + c;
      const double want = silu_ref(x[ch]) * (o[c] * p.head_ln_gain[ch] + p.head_ln_bias[ch]);
      EXPECT_NEAR(out[ch], want, 1e-12);
    }
  }
}

TEST(SpatialMixing, MatchesComposedOracleOnImageRow) {
  testing::for_all(23, 6, [](Gen& g, std::size_t i) {
    auto cfg = micro(Modality::kImage);
    cfg.separate_decay_params = i % 2 == 1;
    auto tower = random_tower(cfg, 100 + i);
    const auto& p = tower.blocks[0].spatial;
    TokenGrid grid{g.tensor({2, 5, 8}), ImageLayout{1, 5}};
    Tensor out = spatial_mixing(grid, p, 2, 1e-5);
    for (std::size_t b = 0; b < 2; ++b) EXPECT_LT(max_rows_diff(out, b, spatial_oracle(grid, b, p, 2, 1e-5)), 1e-10);
  });
}

TEST(SpatialMixing, MatchesComposedOracleOnImageGrid) {
  Gen g(24);
  auto tower = random_tower(micro(Modality::kImage), 24);
  const auto& p = tower.blocks[1].spatial;
  TokenGrid grid{g.tensor({1, 6, 8}), ImageLayout{2, 3}};
  Tensor out = spatial_mixing(grid, p, 2, 1e-5);
  EXPECT_LT(max_rows_diff(out, 0, spatial_oracle(grid, 0, p, 2, 1e-5)), 1e-10);
}

TEST(SpatialMixing, MatchesComposedOracleOnPaddedText) {
  testing::for_all(25, 6, [](Gen& g, std::size_t i) {
    auto cfg = micro(Modality::kText);
    cfg.separate_decay_params = i % 2 == 0;
    auto tower = random_tower(cfg, 200 + i);
    const auto& p = tower.blocks[0].spatial;
    std::vector<bool> pads(2 * 5, false);
    const std::size_t real = g.size(1, 5);
    for (std::size_t t = real; t < 5; ++t) pads[5 + t] = true;
    Tensor tokens = g.tensor({2, 5, 8});
    std::vector<double> data = values(tokens);
    for (std::size_t t = real; t < 5; ++t)
      for (std::size_t c = 0; c < 8; ++c) data[(5 + t) * 8 + c] = 0.0;
    TokenGrid grid = text_grid(Tensor::from({2, 5, 8}, data), pads);
    Tensor out = spatial_mixing(grid, p, 2, 1e-5);
    for (std::size_t b = 0; b < 2; ++b) EXPECT_LT(max_rows_diff(out, b, spatial_oracle(grid, b, p, 2, 1e-5)), 1e-10);
  });
}

// ---- channel mixing -----------------------------------------------------------------------

ChannelMixParams random_channel(Gen& g, std::size_t c, std::size_t hidden) {
  ChannelMixParams p;
  p.lerp.set(LerpTarget::kR, g.tensor({c}));
  p.lerp.set(LerpTarget::kK, g.tensor({c}));
  p.proj_r = g.tensor({c, c});
  p.proj_k = g.tensor({c, hidden}, 0.5);
  p.proj_v = g.tensor({hidden, c}, 0.5);
  return p;
}

TEST(ChannelMixing, MatchesLoopOracleWithNonIntegerRate) {
  testing::for_all(31, 10, [](Gen& g, std::size_t) {
    // C = 6 at rate 3.5 gives 21 hidden units.
    auto p = random_channel(g, 6, 21);
    std::vector<bool> pads(2 * 4, false);
    pads[7] = true;
    std::vector<double> data = g.normals(2 * 4 * 6);
    for (std::size_t c = 0; c < 6; ++c) data[7 * 6 + c] = 0.0;
    TokenGrid grid = text_grid(Tensor::from({2, 4, 6}, data), pads);
    Tensor out = channel_mixing(grid, p);
    ASSERT_EQ(out.shape(), (Shape{2, 4, 6}));
    for (std::size_t b = 0; b < 2; ++b) EXPECT_LT(max_rows_diff(out, b, channel_oracle(grid, b, p)), 1e-11);
  });
}

TEST(ChannelMixing, MatchesLoopOracleOnImageGrid) {
  Gen g(32);
  auto p = random_channel(g, 8, 12);
  TokenGrid grid{g.tensor({1, 6, 8}), ImageLayout{3, 2}};
  EXPECT_LT(max_rows_diff(channel_mixing(grid, p), 0, channel_oracle(grid, 0, p)), 1e-11);
}

TEST(ChannelMixing, ZeroKeyPathGivesZero) {
  Gen g(33);
  auto p = random_channel(g, 6, 21);
  p.proj_k = Tensor::zeros({6, 21});
  Tensor out = channel_mixing(text_grid(g.tensor({1, 3, 6}), {false, false, false}), p);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(ChannelMixing, VeryNegativeGateClosesOutput) {
  Gen g(34);
  auto p = random_channel(g, 6, 21);
  p.lerp.set(LerpTarget::kR, Tensor::full({6}, 1.0));  // gate reads x only
  p.proj_r = Tensor::full({6, 6}, -100.0);
  Tensor x = g.tensor_uniform({1, 3, 6}, 0.5, 1.0);
  Tensor out = channel_mixing(text_grid(x, {false, false, false}), p);
  for (double v : out.data()) EXPECT_LT(std::abs(v), 1e-30);
}

// ---- head layer norm ---------------------------------------------------------------------

TEST(HeadLayerNorm, NormalizesEachHeadGroupSeparately) {
  Gen g(41);
  Tensor x = g.tensor({2, 3, 8});
  Tensor gain = g.tensor({8}), bias = g.tensor({8});
  Tensor out = head_layer_norm(x, 4, gain, bias, 1e-5);
  for (std::size_t b = 0; b < 2; ++b) {
    Rows want = head_ln_rows(rows_of(x, b), 4, gain, bias, 1e-5);
    EXPECT_LT(max_rows_diff(out, b, want), 1e-12);
  }
  EXPECT_THROW(head_layer_norm(x, 3, Tensor::zeros({8}), Tensor::zeros({8}), 1e-5), Error);
}

// ---- towers --------------------------------------------------------------------------------

TEST(Encoder, OutputsAreUnitNorm) {
  for (auto modality : {Modality::kImage, Modality::kText}) {
    Gen g(51);
    auto tower = random_tower(micro(modality), 51);
    EncoderInput input = modality == Modality::kImage ? EncoderInput{g.tensor_uniform({3, 4, 4, 3}, 0, 1)}
                                                      : EncoderInput{batch_of({{1, 2}, {3, 4, 5, 6}, {7}}, 6)};
    Tensor z = encoder_forward(input, tower);
    ASSERT_EQ(z.shape(), (Shape{3, 4}));
    for (std::size_t b = 0; b < 3; ++b) {
      double ss = 0.0;
      for (std::size_t j = 0; j < 4; ++j) ss += at(z, {b, j}) * at(z, {b, j});
      EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-12);
    }
  }
}

TEST(Encoder, SamplesDoNotInteractWithinBatch) {
  Gen g(52);
  auto image_tower = random_tower(micro(Modality::kImage), 52);
  Tensor images = g.tensor_uniform({3, 4, 4, 3}, 0, 1);
  Tensor all = encoder_forward(images, image_tower);
  for (std::size_t b = 0; b < 3; ++b) {
    std::vector<double> one(images.data().begin() + b * 48, images.data().begin() + (b + 1) * 48);
    Tensor single = encoder_forward(Tensor::from({1, 4, 4, 3}, one), image_tower);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(at(all, {b, j}), single[j], 1e-12);
  }

  auto text_tower = random_tower(micro(Modality::kText), 53);
  std::vector<std::vector<std::size_t>> rows = {{1, 2, 3}, {4, 5, 6, 7, 8, 9}, {10}};
  Tensor text_all = encoder_forward(batch_of(rows, 6), text_tower);
  for (std::size_t b = 0; b < 3; ++b) {
    Tensor single = encoder_forward(batch_of({rows[b]}, 6), text_tower);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(at(text_all, {b, j}), single[j], 1e-12);
  }
}

TEST(Encoder, TrailingPadsDoNotChangeEmbedding) {
  testing::for_all(54, 10, [](Gen& g, std::size_t i) {
    auto tower = random_tower(micro(Modality::kText), 300 + i);
    const std::size_t real = g.size(1, 5);
    std::vector<std::size_t> ids;
    for (std::size_t t = 0; t < real; ++t) ids.push_back(g.size(1, 11));
    Tensor short_z = encoder_forward(batch_of({ids}, real), tower);
    Tensor long_z = encoder_forward(batch_of({ids}, 6), tower);
    EXPECT_LE(testing::max_abs_diff(short_z, long_z), 1e-10);
  });
}

TEST(Encoder, AbsolutePositionsKeepPadInvariance) {
  auto cfg = micro(Modality::kText);
  cfg.abs_pos = true;
  auto tower = random_tower(cfg, 55);
  Tensor a = encoder_forward(batch_of({{3, 4}}, 2), tower);
  Tensor b = encoder_forward(batch_of({{3, 4}}, 6), tower);
  EXPECT_LE(testing::max_abs_diff(a, b), 1e-10);
}

TEST(Encoder, IsDeterministic) {
  Gen g(56);
  auto tower = random_tower(micro(Modality::kImage), 56);
  Tensor images = g.tensor_uniform({2, 4, 4, 3}, 0, 1);
  EXPECT_EQ(values(encoder_forward(images, tower)), values(encoder_forward(images, tower)));
}

TEST(Encoder, ZeroedResidualBranchesLeaveEmbedNormPoolProject) {
  Gen g(57);
  auto tower = random_tower(micro(Modality::kImage), 57);
  for (auto& block : tower.blocks) {
    for (double& v : block.spatial.proj_out.mutable_data()) v = 0.0;
    for (double& v : block.channel.proj_v.mutable_data()) v = 0.0;
  }
  Tensor images = g.tensor_uniform({2, 4, 4, 3}, 0, 1);
  Tensor z = encoder_forward(images, tower);
  const std::size_t p = 2, C = 8, D = 4;
  for (std::size_t b = 0; b < 2; ++b) {
    std::vector<double> pooled(C, 0.0);
    for (std::size_t pr = 0; pr < 2; ++pr)
      for (std::size_t pc = 0; pc < 2; ++pc) {
        std::vector<double> token(C, 0.0);
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < p; ++j)
            for (std::size_t ch = 0; ch < 3; ++ch)
              for (std::size_t c = 0; c < C; ++c)
                token[c] += at(images, {b, pr * p + i, pc * p + j, ch}) * at(tower.embed, {(i * p + j) * 3 + ch, c});
        token = normalize_group(token, 1e-5);
        for (std::size_t c = 0; c < C; ++c)
          pooled[c] += (token[c] * tower.final_ln_gain[c] + tower.final_ln_bias[c]) / 4.0;
      }
    std::vector<double> out(D, 0.0);
    double ss = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      for (std::size_t c = 0; c < C; ++c) out[j] += pooled[c] * at(tower.proj_shared, {c, j});
      ss += out[j] * out[j];
    }
    for (std::size_t j = 0; j < D; ++j) EXPECT_NEAR(at(z, {b, j}), out[j] / std::sqrt(ss), 1e-12);
  }
}

TEST(Encoder, RejectsMismatchedInputs) {
  auto image_tower = random_tower(micro(Modality::kImage), 58);
  auto text_tower = random_tower(micro(Modality::kText), 59);
  EXPECT_THROW(encoder_forward(batch_of({{1}}, 1), image_tower), Error);
  EXPECT_THROW(encoder_forward(Tensor::zeros({1, 4, 4, 3}), text_tower), Error);
  EXPECT_THROW(encoder_forward(batch_of({{1}}, 7), text_tower), Error);
}

TEST(Encoder, GradCheckThroughWholeTower) {
  for (auto modality : {Modality::kImage, Modality::kText}) {
    auto cfg = micro(modality);
    cfg.layers = 1;
    auto tower = random_tower(cfg, 60);
    std::vector<Tensor> params;
    tower.for_each_param("", [&](const std::string&, Tensor& t, ParamKind) { params.push_back(t); });
    Gen g(61);
    EncoderInput input = modality == Modality::kImage ? EncoderInput{g.tensor_uniform({2, 4, 4, 3}, 0, 1)}
                                                      : EncoderInput{batch_of({{1, 2, 3}, {4, 5}}, 4)};
    Tensor readout = g.tensor({2, 4});
    auto report = grad_check(
        [&](const std::vector<Tensor>&) { return mul(encoder_forward(input, tower), readout); }, params,
        {.step = 1e-5, .rel_tol = 1e-4, .abs_tol = 1e-9}, "encoder_forward");
    EXPECT_TRUE(report.passed) << "max_rel " << report.max_rel_err << " max_abs " << report.max_abs_err;
    EXPECT_GT(report.coordinates, 100u);
  }
}

TEST(Encoder, GradSuiteModulePasses) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    GradSuiteOptions options;
    options.seed = seed;
    std::size_t checked = 0;
    for (const auto& r : run_grad_suite(options)) {
      if (r.module != "blocks-encoders") continue;
      ++checked;
      EXPECT_TRUE(r.report.passed) << r.report.name << " seed " << seed;
    }
    EXPECT_GE(checked, 7u);
  }
}

// ---- accounting ------------------------------------------------------------------------------

TEST(ParamCount, HandCountedTinyImageTower) {
  EncoderConfig c;
  c.modality = Modality::kImage;
  c.embed_dim = 4;
  c.layers = 1;
  c.heads = 1;
  c.hidden_rate = 1.0;
  c.decay_rank = 1;
  c.patch_size = 2;
  c.image_size = 4;
  c.shared_dim = 4;
  const std::size_t embed = 3 * 2 * 2 * 4;                  // 48
  const std::size_t spatial = 5 * 4                          // mixing vectors
                              + (4 + 4 * 1 + 1 * 4)          // decay offset
                              + 5 * 4 * 4                    // five square projections
                              + 2 * 4 + 4;                   // head norm, bonus
  const std::size_t channel = 2 * 4 + 3 * 4 * 4;
  const std::size_t layer = 2 * 4 + spatial + 2 * 4 + channel;  // 196
  const std::size_t total = embed + layer + 2 * 4 + 4 * 4;
  EXPECT_EQ(layer, 196u);
  EXPECT_EQ(total, 268u);
  EXPECT_EQ(param_count(c), total);
}

TEST(ParamCount, EqualsInitializedScalarsProperty) {
  testing::for_all(71, 20, [](Gen& g, std::size_t) {
    EncoderConfig c;
    c.modality = g.coin() ? Modality::kImage : Modality::kText;
    c.heads = g.size(1, 3);
    c.embed_dim = 4 * c.heads * g.size(1, 2);
    c.layers = g.size(1, 3);
    c.hidden_rate = g.uniform(0.5, 4.0);
    c.decay_rank = g.size(1, c.embed_dim);
    c.patch_size = g.size(1, 3);
    c.image_size = c.patch_size * g.size(1, 3);
    c.vocab_size = g.size(4, 40);
    c.context_len = g.size(1, 10);
    c.shared_dim = g.size(1, 9);
    c.separate_decay_params = g.coin();
    c.abs_pos = g.coin();
    std::mt19937_64 rng(g.size(0, 1000));
    auto tower = TowerParams::init(c, rng);
    EXPECT_EQ(param_count(c), tower.num_scalars());
  });
}

TEST(ParamCount, LargeTowersWithinTenPercentOfReference) {
  const double image = static_cast<double>(param_count(EncoderConfig::paper_image()));
  const double text = static_cast<double>(param_count(EncoderConfig::paper_text()));
  RecordProperty("image_params", std::to_string(image));
  RecordProperty("text_params", std::to_string(text));
  EXPECT_LE(std::abs(image / 84.21e6 - 1.0), 0.10) << image;
  EXPECT_LE(std::abs(text / 65.35e6 - 1.0), 0.10) << text;
}

TEST(Flops, MatmulIsTwoMkn) {
  EXPECT_EQ(matmul_flops(3, 4, 5), 120.0);
  EXPECT_EQ(matmul_flops(1, 1, 1), 2.0);
}

TEST(Flops, ScanTermDoublesWithTokens) {
  for (const auto& cfg : {EncoderConfig::desk_image(), EncoderConfig::paper_image(), EncoderConfig::paper_text()}) {
    for (std::size_t t : {1u, 7u, 49u, 512u}) EXPECT_EQ(scan_flops(cfg, 2 * t), 2.0 * scan_flops(cfg, t));
  }
}

TEST(Flops, TotalGrowsLinearlyInTokens) {
  const auto cfg = EncoderConfig::paper_image();
  const double f1 = flops_estimate(cfg, 49), f2 = flops_estimate(cfg, 98), f3 = flops_estimate(cfg, 147);
  EXPECT_GT(f2, f1);
  EXPECT_NEAR(f3 - f2, f2 - f1, 1e-6 * f1);
  EXPECT_GT(f1, scan_flops(cfg, 49));
  RecordProperty("image_flops_49_tokens", std::to_string(f1));
}

// ---- config ---------------------------------------------------------------------------------

TEST(EncoderConfig, JsonRoundTripAndStrictKeys) {
  auto cfg = micro(Modality::kText);
  cfg.abs_pos = true;
  cfg.separate_decay_params = true;
  auto back = encoder_config_from_json(encoder_config_to_json(cfg), Modality::kText);
  EXPECT_EQ(encoder_config_to_json(back), encoder_config_to_json(cfg));
  EXPECT_THROW(encoder_config_from_json({{"embed_dimm", 8}}, Modality::kText), Error);
  EXPECT_EQ(encoder_config_from_json(nlohmann::json::object(), Modality::kImage).embed_dim,
            EncoderConfig::desk_image().embed_dim);
}

TEST(EncoderConfig, ValidationRejectsBadShapes) {
  auto cfg = micro(Modality::kImage);
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = micro(Modality::kImage);
  cfg.image_size = 5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = micro(Modality::kImage);
  cfg.decay_rank = 9;
  EXPECT_THROW(cfg.validate(), Error);
}

}  // namespace
}  // namespace rwkv_clip

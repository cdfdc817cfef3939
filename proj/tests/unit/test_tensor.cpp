#include <cmath>

#include <gtest/gtest.h>

#include "gen.hpp"
#include "rwkv_clip/grad_check.hpp"
#include "rwkv_clip/grad_suite.hpp"
#include "rwkv_clip/tensor.hpp"

namespace rwkv_clip {
namespace {

using testing::Gen;
using testing::values;

GradCheckOptions tight(double rel_tol) {
  GradCheckOptions o;
  o.rel_tol = rel_tol;
  return o;
}

std::vector<double> grad_of(const Tensor& t) {
  const auto g = t.grad();
  return {g.begin(), g.end()};
}

TEST(Matmul, IdentityLeavesMatrix) {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
  EXPECT_EQ(values(matmul(eye, b)), (std::vector<double>{3, 4, 5, 6}));
}

TEST(Matmul, RowTimesColumn) {
  EXPECT_DOUBLE_EQ(matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4})).item(), 11.0);
}

TEST(Matmul, MatchesTripleLoop) {
  testing::for_all(1, 20, [](Gen& g, std::size_t) {
    const std::size_t m = g.size(1, 9), k = g.size(1, 9), n = g.size(1, 9);
    Tensor a = g.tensor({m, k}), b = g.tensor({k, n});
    Tensor c = matmul(a, b);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
        EXPECT_NEAR(c[i * n + j], s, 1e-12);
      }
  });
}

TEST(Matmul, ShapeMismatchThrows) {
  EXPECT_THROW(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), Error);
}

TEST(Matmul, BackwardMatchesFiniteDifferences) {
  Gen g(5);
  auto report = grad_check([](const auto& in) { return matmul(in[0], in[1]); },
                           {g.tensor({5, 7}, 1.0, true), g.tensor({7, 3}, 1.0, true)}, tight(1e-7));
  EXPECT_TRUE(report.passed) << report.max_rel_err;
}

TEST(Matmul, BackwardIsTransposedProducts) {
  Gen g(6);
  Tensor a = g.tensor({3, 4}, 1.0, true), b = g.tensor({4, 2}, 1.0, true);
  Tensor dc = g.tensor({3, 2});
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(mul(matmul(a, b), dc)));
  }
  // dA = dC B^T, dB = A^T dC
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < 4; ++p) {
      double s = 0;
      for (std::size_t j = 0; j < 2; ++j) s += dc[i * 2 + j] * b[p * 2 + j];
      EXPECT_NEAR(a.grad()[i * 4 + p], s, 1e-12);
    }
  for (std::size_t p = 0; p < 4; ++p)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < 3; ++i) s += a[i * 4 + p] * dc[i * 2 + j];
      EXPECT_NEAR(b.grad()[p * 2 + j], s, 1e-12);
    }
}

TEST(LayerNorm, ConstantRowsGiveZeros) {
  Tensor x = Tensor::from({2, 3}, {5, 5, 5, -2, -2, -2});
  Tensor y = layer_norm(x, Tensor::full({3}, 1.0), Tensor::zeros({3}), 1e-5);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoValuesNormalizeToPlusMinusOne) {
  Tensor y = layer_norm(Tensor::from({1, 2}, {1, 3}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 0.0);
  EXPECT_DOUBLE_EQ(y[0], -1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(LayerNorm, MatchesDirectFormulaWithAffine) {
  Gen g(7);
  Tensor x = g.tensor({3, 5}), gain = g.tensor({5}), bias = g.tensor({5});
  Tensor y = layer_norm(x, gain, bias, 1e-5);
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0, var = 0;
    for (std::size_t c = 0; c < 5; ++c) mu += x[r * 5 + c] / 5;
    for (std::size_t c = 0; c < 5; ++c) var += (x[r * 5 + c] - mu) * (x[r * 5 + c] - mu) / 5;
    for (std::size_t c = 0; c < 5; ++c)
      EXPECT_NEAR(y[r * 5 + c], (x[r * 5 + c] - mu) / std::sqrt(var + 1e-5) * gain[c] + bias[c], 1e-12);
  }
}

TEST(LayerNorm, GradcheckRandom4x8) {
  Gen g(8);
  auto report = grad_check([](const auto& in) { return layer_norm(in[0], in[1], in[2], 1e-5); },
                           {g.tensor({4, 8}, 1.0, true), g.tensor({8}, 1.0, true), g.tensor({8}, 1.0, true)},
                           tight(1e-6));
  EXPECT_TRUE(report.passed) << report.max_rel_err;
}

TEST(Activations, PointValues) {
  EXPECT_EQ(silu(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_EQ(squared_relu(Tensor::scalar(-2.0)).item(), 0.0);
  EXPECT_EQ(squared_relu(Tensor::scalar(3.0)).item(), 9.0);
  EXPECT_EQ(tanh_op(Tensor::scalar(0.0)).item(), 0.0);
  EXPECT_DOUBLE_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_DOUBLE_EQ(exp_op(Tensor::scalar(1.0)).item(), std::exp(1.0));
  EXPECT_NEAR(silu(Tensor::scalar(2.0)).item(), 2.0 / (1.0 + std::exp(-2.0)), 1e-15);
}

TEST(Activations, GradcheckEachOn16Vector) {
  Gen g(9);
  const std::vector<std::pair<const char*, std::function<Tensor(const Tensor&)>>> ops = {
      {"silu", silu}, {"squared_relu", squared_relu}, {"tanh", tanh_op}, {"sigmoid", sigmoid}, {"exp", exp_op}};
  for (const auto& [name, op] : ops) {
    Tensor x = g.tensor({16}, 1.0, true);
    for (double& v : x.mutable_data())
      if (std::abs(v) < 1e-3) v = 0.5;  // keep squared_relu off its kink
    auto report = grad_check([op = op](const auto& in) { return op(in[0]); }, {x}, tight(1e-6), name);
    EXPECT_TRUE(report.passed) << name << " " << report.max_rel_err;
  }
}

TEST(Broadcast, TrailingSuffixMatchesLoop) {
  Gen g(10);
  Tensor a = g.tensor({2, 3, 4}), b = g.tensor({3, 4}), c = g.tensor({4});
  Tensor s = add(a, b), p = mul(a, c), d = sub(a, b);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k) {
        const std::size_t ia = (i * 3 + j) * 4 + k;
        EXPECT_EQ(s[ia], a[ia] + b[j * 4 + k]);
        EXPECT_EQ(d[ia], a[ia] - b[j * 4 + k]);
        EXPECT_EQ(p[ia], a[ia] * c[k]);
      }
  EXPECT_THROW(add(a, g.tensor({3})), Error);
}

TEST(Reductions, SumMeanTransposeReshape) {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(sum(x).item(), 21.0);
  EXPECT_EQ(mean(x).item(), 3.5);
  EXPECT_EQ(values(transpose(x)), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
  EXPECT_THROW(reshape(x, {4, 2}), Error);
}

TEST(LogSoftmax, RowsNormalizeAndMatchDirect) {
  Gen g(11);
  Tensor x = g.tensor({3, 6}, 5.0);
  Tensor y = log_softmax(x);
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 6; ++c) z += std::exp(x[r * 6 + c]);
    double total = 0;
    for (std::size_t c = 0; c < 6; ++c) {
      EXPECT_NEAR(y[r * 6 + c], x[r * 6 + c] - std::log(z), 1e-12);
      total += std::exp(y[r * 6 + c]);
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(LogSoftmax, LargeLogitsStayFinite) {
  Tensor y = log_softmax(Tensor::from({1, 3}, {1000.0, 0.0, -1000.0}));
  EXPECT_NEAR(y[0], 0.0, 1e-12);
  EXPECT_NEAR(y[1], -1000.0, 1e-9);
}

TEST(Gather, DiagonalEmbeddingL2Normalize) {
  Tensor m = Tensor::from({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  EXPECT_EQ(values(diagonal(m)), (std::vector<double>{1, 5, 9}));
  const std::vector<std::size_t> ids = {2, 0, 2};
  EXPECT_EQ(values(embedding(m, ids)), (std::vector<double>{7, 8, 9, 1, 2, 3, 7, 8, 9}));
  const std::vector<std::size_t> bad = {3};
  EXPECT_THROW(embedding(m, bad), Error);
  Tensor n = l2_normalize(Tensor::from({2, 2}, {3, 4, 0, 2}));
  EXPECT_EQ(values(n), (std::vector<double>{0.6, 0.8, 0.0, 1.0}));
}

TEST(TokenHelpers, MaskedFillAndMeanPool) {
  Tensor x = Tensor::from({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
  const std::vector<bool> keep = {true, false, true, true};
  EXPECT_EQ(values(masked_fill_tokens(x, keep, -1.0)), (std::vector<double>{1, 2, -1, -1, 5, 6, 7, 8}));
  EXPECT_EQ(values(mean_pool_tokens(x, keep)), (std::vector<double>{1, 2, 6, 7}));
}

TEST(GradCheck, SumHasUnitGradientAndZeroError) {
  Gen g(12);
  auto report = grad_check([](const auto& in) { return sum(in[0]); }, {g.tensor({4, 3}, 1.0, true)});
  EXPECT_TRUE(report.passed);
  EXPECT_LT(report.max_abs_err, 1e-9);
  Tensor x = g.tensor({5}, 1.0, true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(x));
  }
  for (double v : x.grad()) EXPECT_EQ(v, 1.0);
}

TEST(GradCheck, SumOfMatmulPassesAt1e6) {
  Gen g(13);
  auto report = grad_check([](const auto& in) { return sum(matmul(in[0], in[1])); },
                           {g.tensor({4, 5}, 1.0, true), g.tensor({5, 3}, 1.0, true)}, tight(1e-6));
  EXPECT_TRUE(report.passed);
}

TEST(GradCheck, CorruptedGradientFails) {
  // x^2 with a backward that is off by +0.1 per element.
  auto broken_square = [](const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * x[i];
    return make_op("broken_square", x.shape(), std::move(out), {x}, [x](std::span<const double> grad) {
      std::vector<double> g(grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad[i] * 2.0 * x[i] + 0.1;
      accumulate_grad(x, g);
    });
  };
  Gen g(14);
  auto report = grad_check([&](const auto& in) { return broken_square(in[0]); }, {g.tensor({6}, 1.0, true)});
  EXPECT_FALSE(report.passed);
}

TEST(Tape, ReusedLeafAccumulatesOncePerUse) {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(mul(x, x)));  // d/dx = 2x
  }
  EXPECT_EQ(grad_of(x), (std::vector<double>{2, 4, 6}));
}

TEST(Tape, NothingRecordedWithoutScopeOrUnderNoGrad) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  {
    TapeScope scope(tape);
    {
      NoGradGuard no_grad;
      silu(x);
    }
    EXPECT_EQ(tape.size(), 0u);
    silu(x);
    EXPECT_EQ(tape.size(), 1u);
  }
  silu(x);
  EXPECT_EQ(Tape::active(), nullptr);
}

TEST(Tape, ConstantsGetNoGradient) {
  Tensor x = Tensor::from({2}, {1, 2}, true), c = Tensor::from({2}, {3, 4});
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(mul(x, c)));
  }
  EXPECT_EQ(grad_of(x), (std::vector<double>{3, 4}));
  EXPECT_TRUE(c.grad().empty());
}

TEST(Tape, BackwardIsLinearInTheRoot) {
  testing::for_all(15, 10, [](Gen& g, std::size_t) {
    Tensor x = g.tensor({3, 4}, 1.0, true), w = g.tensor({4, 2}, 1.0, true);
    const double a = g.normal(), b = g.normal();
    auto f = [&] { return sum(silu(matmul(x, w))); };
    auto h = [&] { return sum(mul(layer_norm(x, Tensor(), Tensor(), 1e-5), x)); };
    auto grads_of = [&](auto root_fn) {
      x.zero_grad();
      w.zero_grad();
      Tape tape;
      {
        TapeScope scope(tape);
        tape.backward(root_fn());
      }
      auto gx = grad_of(x), gw = grad_of(w);
      gw.resize(w.numel(), 0.0);
      gx.insert(gx.end(), gw.begin(), gw.end());
      return gx;
    };
    auto gf = grads_of(f), gh = grads_of(h);
    auto gc = grads_of([&] { return add(affine(f(), a, 0.0), affine(h(), b, 0.0)); });
    for (std::size_t i = 0; i < gc.size(); ++i) EXPECT_NEAR(gc[i], a * gf[i] + b * gh[i], 1e-10);
  });
}

TEST(Finiteness, OverflowAndNaNAreErrors) {
  EXPECT_THROW(exp_op(Tensor::scalar(1000.0)), NumericError);
  EXPECT_THROW(Tensor::from({1}, {std::nan("")}), NumericError);
  EXPECT_THROW(Tensor::from({2}, {1.0, INFINITY}), NumericError);
  EXPECT_THROW(squared_relu(Tensor::scalar(1e200)), NumericError);
}

TEST(TensorInvariants, ShapeAndDataAgree) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), Error);
  testing::for_all(16, 20, [](Gen& g, std::size_t) {
    Shape s = {g.size(1, 4), g.size(1, 4), g.size(1, 4)};
    Tensor t = g.tensor(s);
    EXPECT_EQ(t.numel(), s[0] * s[1] * s[2]);
  });
}

TEST(GradSuite, EveryTensorOpPassesOnSeveralSeeds) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    GradSuiteOptions options;
    options.seed = seed;
    std::size_t checked = 0;
    for (const auto& r : run_grad_suite(options)) {
      if (r.module != "tensor-autodiff") continue;
      ++checked;
      EXPECT_TRUE(r.report.passed) << r.report.name << " seed " << seed << " rel " << r.report.max_rel_err;
    }
    EXPECT_GE(checked, 25u);
  }
}

}  // namespace
}  // namespace rwkv_clip

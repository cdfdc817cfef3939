#include "rwkv_clip/wkv.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <ostream>
#include <random>

#include <fmt/format.h>

#include "rwkv_clip/shift.hpp"

namespace rwkv_clip {

namespace {

struct Dims {
  std::size_t batch, heads, length, dim;
  std::size_t sequences() const { return batch * heads; }
  std::size_t seq_stride() const { return length * dim; }
};

Dims dims_of(const WkvInputs& in) { return {in.batch(), in.heads(), in.length(), in.head_dim()}; }

std::vector<double> decay_factors(std::span<const double> w_tilde) {
  std::vector<double> w(w_tilde.size());
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = std::exp(-std::exp(std::clamp(w_tilde[i], -kDecayClamp, kDecayClamp)));
  return w;
}

// out[t] += r_t . state for one sequence; state is d x d row-major [key][value].
inline void read_state(const double* r_t, const double* state, double* out_t, std::size_t d) {
  for (std::size_t e = 0; e < d; ++e) {
    const double re = r_t[e];
    const double* row = state + e * d;
    for (std::size_t c = 0; c < d; ++c) out_t[c] += re * row[c];
  }
}

// state = diag(w_t) state + k_t^T v_t
inline void update_state(double* state, const double* w_t, const double* k_t, const double* v_t, std::size_t d) {
  for (std::size_t e = 0; e < d; ++e) {
    const double we = w_t[e], ke = k_t[e];
    double* row = state + e * d;
    for (std::size_t c = 0; c < d; ++c) row[c] = we * row[c] + ke * v_t[c];
  }
}

void scan_sequence(const double* r, const double* k, const double* v, const double* w, const double* u,
                   double* out, std::size_t length, std::size_t d, std::vector<double>& state) {
  std::fill(state.begin(), state.end(), 0.0);
  for (std::size_t t = 0; t < length; ++t) {
    const std::size_t o = t * d;
    double bonus = 0.0;
    for (std::size_t e = 0; e < d; ++e) bonus += r[o + e] * u[e] * k[o + e];
    for (std::size_t c = 0; c < d; ++c) out[o + c] = bonus * v[o + c];
    read_state(r + o, state.data(), out + o, d);
    update_state(state.data(), w + o, k + o, v + o, d);
  }
  std::fill(state.begin(), state.end(), 0.0);
  for (std::size_t t = length; t-- > 0;) {
    const std::size_t o = t * d;
    read_state(r + o, state.data(), out + o, d);
    update_state(state.data(), w + o, k + o, v + o, d);
  }
}

}  // namespace

void WkvInputs::validate() const {
  RWKV_CHECK(r.defined() && r.ndim() == 4, "WkvInputs: r must be [B,H,T,d]");
  RWKV_CHECK(k.shape() == r.shape() && v.shape() == r.shape() && w_tilde.shape() == r.shape(),
             "WkvInputs: r, k, v, w_tilde shapes differ");
  RWKV_CHECK(u.shape() == Shape({heads(), head_dim()}), "WkvInputs: u must be [H,d]");
}

Tensor biwkv_naive(const WkvInputs& in) {
  in.validate();
  const Dims dm = dims_of(in);
  const std::size_t d = dm.dim, len = dm.length;
  const auto w = decay_factors(in.w_tilde.data());
  std::vector<double> out(in.r.numel(), 0.0);
  std::vector<double> bracket(d * d);
  std::vector<double> eps(d);
  for (std::size_t s = 0; s < dm.sequences(); ++s) {
    const std::size_t base = s * dm.seq_stride();
    const double* r = in.r.data().data() + base;
    const double* k = in.k.data().data() + base;
    const double* v = in.v.data().data() + base;
    const double* ws = w.data() + base;
    const double* u = in.u.data().data() + (s % dm.heads) * d;
    for (std::size_t t = 0; t < len; ++t) {
      for (std::size_t e = 0; e < d; ++e)
        for (std::size_t c = 0; c < d; ++c) bracket[e * d + c] = u[e] * k[t * d + e] * v[t * d + c];
      // past: eps runs over positions strictly between i and t
      std::fill(eps.begin(), eps.end(), 1.0);
      for (std::size_t i = t; i-- > 0;) {
        for (std::size_t e = 0; e < d; ++e)
          for (std::size_t c = 0; c < d; ++c) bracket[e * d + c] += eps[e] * k[i * d + e] * v[i * d + c];
        for (std::size_t e = 0; e < d; ++e) eps[e] *= ws[i * d + e];
      }
      std::fill(eps.begin(), eps.end(), 1.0);
      for (std::size_t i = t + 1; i < len; ++i) {
        for (std::size_t e = 0; e < d; ++e)
          for (std::size_t c = 0; c < d; ++c) bracket[e * d + c] += eps[e] * k[i * d + e] * v[i * d + c];
        for (std::size_t e = 0; e < d; ++e) eps[e] *= ws[i * d + e];
      }
      for (std::size_t e = 0; e < d; ++e)
        for (std::size_t c = 0; c < d; ++c) out[base + t * d + c] += r[t * d + e] * bracket[e * d + c];
    }
  }
  ensure_finite(out, "biwkv_naive");
  return Tensor::from(in.r.shape(), std::move(out));
}

Tensor biwkv_scan(const WkvInputs& in) {
  in.validate();
  const Dims dm = dims_of(in);
  const auto w = decay_factors(in.w_tilde.data());
  std::vector<double> out(in.r.numel(), 0.0);
  std::vector<double> state(dm.dim * dm.dim);
  for (std::size_t s = 0; s < dm.sequences(); ++s) {
    const std::size_t base = s * dm.seq_stride();
    scan_sequence(in.r.data().data() + base, in.k.data().data() + base, in.v.data().data() + base,
                  w.data() + base, in.u.data().data() + (s % dm.heads) * dm.dim, out.data() + base, dm.length,
                  dm.dim, state);
  }
  ensure_finite(out, "biwkv_scan");
  return Tensor::from(in.r.shape(), std::move(out));
}

WkvGrads biwkv_backward(const WkvInputs& in, const Tensor& grad_out) {
  in.validate();
  RWKV_CHECK(grad_out.shape() == in.r.shape(), "biwkv_backward: grad_out shape mismatch");
  const Dims dm = dims_of(in);
  const std::size_t d = dm.dim, len = dm.length, dd = d * d;
  const auto w = decay_factors(in.w_tilde.data());
  const std::size_t n = in.r.numel();
  std::vector<double> dr(n, 0.0), dk(n, 0.0), dv(n, 0.0), dw(n, 0.0), du(in.u.numel(), 0.0);
  std::vector<double> fwd_states(len * dd), bwd_states(len * dd);
  std::vector<double> state(dd), adj(dd);

  for (std::size_t s = 0; s < dm.sequences(); ++s) {
    const std::size_t base = s * dm.seq_stride();
    const double* r = in.r.data().data() + base;
    const double* k = in.k.data().data() + base;
    const double* v = in.v.data().data() + base;
    const double* ws = w.data() + base;
    const double* g = grad_out.data().data() + base;
    const std::size_t head = s % dm.heads;
    const double* u = in.u.data().data() + head * d;
    double* gr = dr.data() + base;
    double* gk = dk.data() + base;
    double* gv = dv.data() + base;
    double* gw = dw.data() + base;
    double* gu = du.data() + head * d;

    // Replay both directions, keeping the state seen by every token.
    std::fill(state.begin(), state.end(), 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      std::copy(state.begin(), state.end(), fwd_states.begin() + static_cast<std::ptrdiff_t>(t * dd));
      update_state(state.data(), ws + t * d, k + t * d, v + t * d, d);
    }
    std::fill(state.begin(), state.end(), 0.0);
    for (std::size_t t = len; t-- > 0;) {
      std::copy(state.begin(), state.end(), bwd_states.begin() + static_cast<std::ptrdiff_t>(t * dd));
      update_state(state.data(), ws + t * d, k + t * d, v + t * d, d);
    }

    // Direct terms: receptance, bonus.
    for (std::size_t t = 0; t < len; ++t) {
      const double* gt = g + t * d;
      const double* vt = v + t * d;
      const double* kt = k + t * d;
      const double* rt = r + t * d;
      double gv_dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) gv_dot += gt[c] * vt[c];
      double rku = 0.0;
      for (std::size_t e = 0; e < d; ++e) {
        const double* a_row = fwd_states.data() + t * dd + e * d;
        const double* b_row = bwd_states.data() + t * dd + e * d;
        double acc = u[e] * kt[e] * gv_dot;
        for (std::size_t c = 0; c < d; ++c) acc += gt[c] * (a_row[c] + b_row[c]);
        gr[t * d + e] += acc;
        gu[e] += rt[e] * kt[e] * gv_dot;
        gk[t * d + e] += u[e] * rt[e] * gv_dot;
        rku += rt[e] * u[e] * kt[e];
      }
      for (std::size_t c = 0; c < d; ++c) gv[t * d + c] += gt[c] * rku;
    }

    // Adjoint of the forward-direction state, swept from the end:
    //   adj_i = G_{i+1} + diag(w_{i+1}) adj_{i+1},  G_t[e][c] = r_t[e] g_t[c]
    std::fill(adj.begin(), adj.end(), 0.0);
    for (std::size_t i = len; i-- > 0;) {
      if (i + 1 < len) {
        const std::size_t nt = i + 1;
        for (std::size_t e = 0; e < d; ++e)
          for (std::size_t c = 0; c < d; ++c)
            adj[e * d + c] = ws[nt * d + e] * adj[e * d + c] + r[nt * d + e] * g[nt * d + c];
      }
      const double* a_i = fwd_states.data() + i * dd;
      for (std::size_t e = 0; e < d; ++e) {
        double kacc = 0.0, wacc = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          kacc += adj[e * d + c] * v[i * d + c];
          wacc += adj[e * d + c] * a_i[e * d + c];
          gv[i * d + c] += adj[e * d + c] * k[i * d + e];
        }
        gk[i * d + e] += kacc;
        gw[i * d + e] += wacc;
      }
    }

    // Adjoint of the backward-direction state, swept from the start.
    std::fill(adj.begin(), adj.end(), 0.0);
    for (std::size_t i = 0; i < len; ++i) {
      if (i > 0) {
        const std::size_t pt = i - 1;
        for (std::size_t e = 0; e < d; ++e)
          for (std::size_t c = 0; c < d; ++c)
            adj[e * d + c] = ws[pt * d + e] * adj[e * d + c] + r[pt * d + e] * g[pt * d + c];
      }
      const double* b_i = bwd_states.data() + i * dd;
      for (std::size_t e = 0; e < d; ++e) {
        double kacc = 0.0, wacc = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          kacc += adj[e * d + c] * v[i * d + c];
          wacc += adj[e * d + c] * b_i[e * d + c];
          gv[i * d + c] += adj[e * d + c] * k[i * d + e];
        }
        gk[i * d + e] += kacc;
        gw[i * d + e] += wacc;
      }
    }
  }

  // dw/dw_tilde = -exp(w_tilde) * w inside the clamp range, zero outside.
  auto wt = in.w_tilde.data();
  for (std::size_t i = 0; i < n; ++i) {
    const bool inside = wt[i] >= -kDecayClamp && wt[i] <= kDecayClamp;
    dw[i] = inside ? dw[i] * (-std::exp(wt[i]) * w[i]) : 0.0;
  }
  for (const auto* buf : {&dr, &dk, &dv, &dw, &du}) ensure_finite(*buf, "biwkv_backward");
  return {Tensor::from(in.r.shape(), std::move(dr)), Tensor::from(in.r.shape(), std::move(dk)),
          Tensor::from(in.r.shape(), std::move(dv)), Tensor::from(in.r.shape(), std::move(dw)),
          Tensor::from(in.u.shape(), std::move(du))};
}

WkvState WkvState::zeros(std::size_t batch, std::size_t heads, std::size_t head_dim) {
  return {Tensor::zeros({batch, heads, head_dim, head_dim})};
}

WkvStep wkv_recurrent_step(const WkvState& state, const Tensor& r_t, const Tensor& k_t, const Tensor& v_t,
                           const Tensor& w_t, const Tensor& u) {
  RWKV_CHECK(r_t.ndim() == 3, "wkv_recurrent_step: token inputs must be [B,H,d]");
  RWKV_CHECK(k_t.shape() == r_t.shape() && v_t.shape() == r_t.shape() && w_t.shape() == r_t.shape(),
             "wkv_recurrent_step: token input shapes differ");
  const std::size_t batch = r_t.dim(0), heads = r_t.dim(1), d = r_t.dim(2);
  RWKV_CHECK(state.a.shape() == Shape({batch, heads, d, d}), "wkv_recurrent_step: state must be [B,H,d,d]");
  RWKV_CHECK(u.shape() == Shape({heads, d}), "wkv_recurrent_step: u must be [H,d]");
  std::vector<double> out(r_t.numel(), 0.0);
  std::vector<double> next(state.a.data().begin(), state.a.data().end());
  for (std::size_t s = 0; s < batch * heads; ++s) {
    const double* r = r_t.data().data() + s * d;
    const double* k = k_t.data().data() + s * d;
    const double* v = v_t.data().data() + s * d;
    const double* w = w_t.data().data() + s * d;
    const double* uh = u.data().data() + (s % heads) * d;
    double* o = out.data() + s * d;
    double bonus = 0.0;
    for (std::size_t e = 0; e < d; ++e) bonus += r[e] * uh[e] * k[e];
    for (std::size_t c = 0; c < d; ++c) o[c] = bonus * v[c];
    read_state(r, state.a.data().data() + s * d * d, o, d);
    update_state(next.data() + s * d * d, w, k, v, d);
  }
  return {Tensor::from(r_t.shape(), std::move(out)), {Tensor::from(state.a.shape(), std::move(next))}};
}

Tensor to_head_major(const Tensor& x, std::size_t heads) {
  RWKV_CHECK(x.ndim() == 3 && heads > 0 && x.dim(2) % heads == 0, "to_head_major: C must divide into heads");
  const std::size_t b = x.dim(0), t = x.dim(1), d = x.dim(2) / heads;
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t h = 0; h < heads; ++h)
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(((bi * t + ti) * heads + h) * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(((bi * heads + h) * t + ti) * d));
  return Tensor::from({b, heads, t, d}, std::move(out));
}

Tensor from_head_major(const Tensor& x) {
  RWKV_CHECK(x.ndim() == 4, "from_head_major expects [B,H,T,d]");
  const std::size_t b = x.dim(0), heads = x.dim(1), t = x.dim(2), d = x.dim(3);
  std::vector<double> out(x.numel());
  auto xd = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t ti = 0; ti < t; ++ti)
        std::copy_n(xd.begin() + static_cast<std::ptrdiff_t>(((bi * heads + h) * t + ti) * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(((bi * t + ti) * heads + h) * d));
  return Tensor::from({b, t, heads * d}, std::move(out));
}

Tensor bi_wkv(const Tensor& r, const Tensor& k, const Tensor& v, const Tensor& w_tilde, const Tensor& u,
              std::size_t heads) {
  RWKV_CHECK(r.ndim() == 3, "bi_wkv: inputs must be [B,T,C]");
  RWKV_CHECK(k.shape() == r.shape() && v.shape() == r.shape() && w_tilde.shape() == r.shape(),
             "bi_wkv: input shapes differ");
  WkvInputs in{to_head_major(r, heads), to_head_major(k, heads), to_head_major(v, heads),
               to_head_major(w_tilde, heads), u};
  in.validate();
  Tensor out = from_head_major(biwkv_scan(in));
  std::vector<double> data(out.data().begin(), out.data().end());
  return make_op("bi_wkv", r.shape(), std::move(data), {r, k, v, w_tilde, u},
                 [r, k, v, w_tilde, u, in, heads](std::span<const double> g) {
                   Tensor grad_out =
                       to_head_major(Tensor::from(r.shape(), std::vector<double>(g.begin(), g.end())), heads);
                   WkvGrads grads = biwkv_backward(in, grad_out);
                   accumulate_grad(r, from_head_major(grads.r).data());
                   accumulate_grad(k, from_head_major(grads.k).data());
                   accumulate_grad(v, from_head_major(grads.v).data());
                   accumulate_grad(w_tilde, from_head_major(grads.w_tilde).data());
                   accumulate_grad(u, grads.u.data());
                 });
}

WkvInputs random_wkv_inputs(std::size_t batch, std::size_t heads, std::size_t length, std::size_t head_dim,
                            std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Shape shape{batch, heads, length, head_dim};
  WkvInputs in;
  in.r = Tensor::randn(shape, rng);
  in.k = Tensor::randn(shape, rng);
  in.v = Tensor::randn(shape, rng);
  in.w_tilde = Tensor::uniform(shape, rng, -3.0, 1.0);
  in.u = Tensor::randn({heads, head_dim}, rng);
  return in;
}

std::vector<KernelTiming> bench_kernel(const BenchOptions& options) {
  RWKV_CHECK(std::is_sorted(options.lengths.begin(), options.lengths.end()),
             "bench_kernel: lengths must be sorted ascending");
  RWKV_CHECK(options.repeats > 0, "bench_kernel: repeats must be positive");
  using Clock = std::chrono::steady_clock;
  auto median_of = [&](auto&& fn) {
    std::vector<double> samples;
    for (std::size_t i = 0; i < options.repeats; ++i) {
      auto start = Clock::now();
      fn();
      samples.push_back(std::chrono::duration<double, std::nano>(Clock::now() - start).count());
    }
    std::sort(samples.begin(), samples.end());
    return samples[samples.size() / 2];
  };
  std::vector<KernelTiming> rows;
  for (std::size_t len : options.lengths) {
    auto in = random_wkv_inputs(1, options.heads, len, options.head_dim, options.seed + len);
    biwkv_scan(in);  // warm-up
    rows.push_back({"scan", len, options.head_dim, options.heads, median_of([&] { biwkv_scan(in); })});
    if (options.include_naive)
      rows.push_back({"naive", len, options.head_dim, options.heads, median_of([&] { biwkv_naive(in); })});
  }
  return rows;
}

void write_bench_csv(std::ostream& os, const std::vector<KernelTiming>& rows) {
  os << "kernel,T,d,H,median_ns\n";
  for (const auto& row : rows)
    os << fmt::format("{},{},{},{},{:.0f}\n", row.kernel, row.length, row.head_dim, row.heads, row.median_ns);
}

ScalingVerdict scaling_verdict(const std::vector<KernelTiming>& rows) {
  ScalingVerdict verdict;
  std::map<std::string, std::map<std::size_t, double>> by_kernel;
  for (const auto& row : rows) by_kernel[row.kernel][row.length] = row.median_ns;
  for (const auto& [kernel, series] : by_kernel) {
    for (const auto& [len, ns] : series) {
      auto next = series.find(len * 2);
      if (next == series.end()) continue;
      const double ratio = next->second / ns;
      bool ok = true;
      if (kernel == "scan") {
        ok = ratio <= 3.0;
        verdict.scan_linear = verdict.scan_linear && ok;
      } else if (kernel == "naive" && len >= 1024) {
        ok = ratio >= 3.0;
        verdict.naive_quadratic = verdict.naive_quadratic && ok;
      }
      verdict.lines.push_back(
          fmt::format("{} T={}->{} ratio={:.2f} {}", kernel, len, len * 2, ratio, ok ? "ok" : "VIOLATION"));
    }
  }
  return verdict;
}

}  // namespace rwkv_clip

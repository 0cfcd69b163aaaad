// Copyright 2026 The bimamba Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "bimamba/ssd_block.hpp"

#include <cmath>
#include <memory>
#include <string>

namespace bimamba {
namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw TensorError(what);
}

}  // namespace

void BlockDims::validate() const {
  require(d_model > 0 && d_state > 0 && d_conv > 0 && n_heads > 0,
          "block dims: all extents must be positive");
  require(head_dim * n_heads == d_inner,
          "block dims: d_inner " + std::to_string(d_inner) +
              " != n_heads * head_dim");
}

template <typename T>
SsdBlockParams<T> SsdBlockParams<T>::init(const BlockDims& dims,
                                          bool binarize_in, bool binarize_out,
                                          Rng& rng) {
  dims.validate();
  SsdBlockParams p;
  p.dims = dims;
  p.in_proj = FbiLinearParams<T>::random(
      dims.in_proj_dim(), dims.d_model, binarize_in,
      static_cast<T>(1.0 / std::sqrt(static_cast<double>(dims.d_model))), rng);
  p.out_proj = FbiLinearParams<T>::random(
      dims.d_model, dims.d_inner, binarize_out,
      static_cast<T>(1.0 / std::sqrt(static_cast<double>(dims.d_inner))), rng);

  const std::size_t cd = dims.conv_dim();
  const double bound = 1.0 / std::sqrt(static_cast<double>(dims.d_conv));
  std::uniform_real_distribution<double> conv_dist(-bound, bound);
  p.core.conv_weight = Tensor<T>({cd, dims.d_conv});
  for (T& v : p.core.conv_weight.data()) v = static_cast<T>(conv_dist(rng));
  p.core.conv_bias = Tensor<T>({cd});
  for (T& v : p.core.conv_bias.data()) v = static_cast<T>(conv_dist(rng));

  // a uniform in [-16, -1]; dt_bias = softplus^-1 of a log-uniform step in
  // [1e-3, 1e-1].
  std::uniform_real_distribution<double> a_dist(1.0, 16.0);
  std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
  p.core.A_log = Tensor<T>({dims.n_heads});
  p.core.dt_bias = Tensor<T>({dims.n_heads});
  for (std::size_t h = 0; h < dims.n_heads; ++h) {
    p.core.A_log[h] = static_cast<T>(std::log(a_dist(rng)));
    const double dt = std::exp(log_dt(rng));
    p.core.dt_bias[h] = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  p.core.D = Tensor<T>({dims.n_heads}, T{1});
  p.core.norm_weight = Tensor<T>({dims.d_inner}, T{1});
  return p;
}

template <typename T>
void SsdBlockParams<T>::set_requires_grad(bool on) {
  in_proj.set_requires_grad(on);
  out_proj.set_requires_grad(on);
  for (Tensor<T>* t : {&core.conv_weight, &core.conv_bias, &core.A_log, &core.D,
                       &core.dt_bias, &core.norm_weight}) {
    t->set_requires_grad(on);
  }
}

template <typename T>
void SsdBlockParams<T>::validate() const {
  dims.validate();
  require(in_proj.rows() == dims.in_proj_dim() && in_proj.cols() == dims.d_model,
          "block: in_proj shape " + shape_str(in_proj.weight.shape()) +
              " does not match config");
  require(out_proj.rows() == dims.d_model && out_proj.cols() == dims.d_inner,
          "block: out_proj shape " + shape_str(out_proj.weight.shape()) +
              " does not match config");
  require(core.conv_weight.shape() == Shape{dims.conv_dim(), dims.d_conv},
          "block: conv weight shape mismatch");
  require(core.conv_bias.size() == dims.conv_dim(), "block: conv bias size mismatch");
  require(core.A_log.size() == dims.n_heads && core.D.size() == dims.n_heads &&
              core.dt_bias.size() == dims.n_heads,
          "block: per-head parameter size mismatch");
  require(core.norm_weight.size() == dims.d_inner, "block: norm weight size mismatch");
}

template <typename T>
RecurrentState<T> RecurrentState<T>::zeros(const BlockDims& dims) {
  RecurrentState s;
  s.h = Tensor<T>({dims.n_heads, dims.head_dim, dims.d_state});
  s.conv_window = Tensor<T>({dims.d_conv - 1, dims.conv_dim()});
  return s;
}

template <typename T>
void RecurrentState<T>::check(const BlockDims& dims) const {
  require(h.shape() == Shape{dims.n_heads, dims.head_dim, dims.d_state} &&
              conv_window.shape() == Shape{dims.d_conv - 1, dims.conv_dim()},
          "recurrent state shape does not match block config");
}

template <typename T>
T zoh_input_gain(T delta, T a) {
  const T da = delta * a;
  if (std::abs(da) < static_cast<T>(kZohGuard)) return delta;
  return std::expm1(da) / a;
}

Discretized discretize(double delta, double a, std::span<const double> b) {
  if (!(delta > 0.0)) {
    throw TensorError("discretize: step must be positive, got " + std::to_string(delta));
  }
  Discretized out;
  out.a_bar = std::exp(delta * a);
  const double gain = zoh_input_gain(delta, a);
  out.b_bar.reserve(b.size());
  for (double v : b) out.b_bar.push_back(gain * v);
  return out;
}

template <typename T>
Tensor<T> ssd_scan(const Tensor<T>& x, const Tensor<T>& delta,
                   std::span<const T> a, const Tensor<T>& B, const Tensor<T>& C,
                   std::span<const T> D) {
  require(x.rank() == 3, "ssd_scan: x must be L x heads x head_dim");
  const std::size_t L = x.dim(0), H = x.dim(1), P = x.dim(2);
  require(delta.shape() == Shape{L, H}, "ssd_scan: delta shape mismatch");
  require(a.size() == H && D.size() == H, "ssd_scan: per-head size mismatch");
  require(B.rank() == 2 && B.dim(0) == L && C.shape() == B.shape(),
          "ssd_scan: B/C shape mismatch");
  const std::size_t N = B.dim(1);
  Tensor<T> y({L, H, P});
  std::vector<T> h(H * P * N, T{0});
  for (std::size_t t = 0; t < L; ++t) {
    for (std::size_t hd = 0; hd < H; ++hd) {
      const T dt = delta.at(t, hd);
      require(dt >= T{0}, "ssd_scan: delta must be non-negative");
      const T a_bar = std::exp(dt * a[hd]);
      const T gain = zoh_input_gain(dt, a[hd]);
      for (std::size_t p = 0; p < P; ++p) {
        const T xv = x[(t * H + hd) * P + p];
        T* hs = h.data() + (hd * P + p) * N;
        T acc = 0;
        for (std::size_t s = 0; s < N; ++s) {
          hs[s] = a_bar * hs[s] + gain * B.at(t, s) * xv;
          acc += C.at(t, s) * hs[s];
        }
        y[(t * H + hd) * P + p] = acc + D[hd] * xv;
      }
    }
  }
  y.check_finite("ssd_scan output");
  return y;
}

template <typename T>
Var<T> causal_conv(Var<T> x, Var<T> weight, Var<T> bias, std::size_t seq_len) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  require(xv.rank() == 2, "causal_conv: input must be rows x channels");
  const std::size_t rows = xv.dim(0), ch = xv.dim(1);
  require(wv.rank() == 2 && wv.dim(0) == ch && bias.value().size() == ch,
          "causal_conv: weight/bias do not match channels");
  require(seq_len > 0 && rows % seq_len == 0, "causal_conv: rows not a multiple of seq_len");
  const std::size_t taps = wv.dim(1);
  Tensor<T> out({rows, ch});
  const Tensor<T>& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t t = r % seq_len;
    for (std::size_t c = 0; c < ch; ++c) {
      T acc = bv[c];
      for (std::size_t k = 0; k < taps; ++k) {
        const std::size_t back = taps - 1 - k;
        if (back > t) continue;
        acc += wv[c * taps + k] * xv[(r - back) * ch + c];
      }
      out[r * ch + c] = acc;
    }
  }
  Tape<T>* tape = x.tape;
  return tape->record(
      std::move(out), {x, weight, bias},
      [x, weight, bias, tape, rows, ch, taps, seq_len](std::span<const T> g) {
        const Tensor<T>& xv = x.value();
        const Tensor<T>& wv = weight.value();
        std::span<T> gx = tape->needs_grad(x) ? tape->grad_of(x) : std::span<T>{};
        std::span<T> gw = tape->needs_grad(weight) ? tape->grad_of(weight) : std::span<T>{};
        std::span<T> gb = tape->needs_grad(bias) ? tape->grad_of(bias) : std::span<T>{};
        for (std::size_t r = 0; r < rows; ++r) {
          const std::size_t t = r % seq_len;
          for (std::size_t c = 0; c < ch; ++c) {
            const T gv = g[r * ch + c];
            if (!gb.empty()) gb[c] += gv;
            for (std::size_t k = 0; k < taps; ++k) {
              const std::size_t back = taps - 1 - k;
              if (back > t) continue;
              const std::size_t src = (r - back) * ch + c;
              if (!gx.empty()) gx[src] += gv * wv[c * taps + k];
              if (!gw.empty()) gw[c * taps + k] += gv * xv[src];
            }
          }
        }
      });
}

template <typename T>
Var<T> ssd_scan(Var<T> x, Var<T> delta, Var<T> A_log, Var<T> B, Var<T> C,
                Var<T> D, std::size_t seq_len, std::size_t head_dim) {
  const Tensor<T>& xv = x.value();
  require(xv.rank() == 2, "ssd_scan: x must be rows x d_inner");
  const std::size_t rows = xv.dim(0), d_inner = xv.dim(1);
  const std::size_t H = A_log.value().size();
  require(H * head_dim == d_inner, "ssd_scan: heads * head_dim != d_inner");
  require(delta.value().shape() == Shape{rows, H}, "ssd_scan: delta shape mismatch");
  require(D.value().size() == H, "ssd_scan: D size mismatch");
  const Tensor<T>& Bv = B.value();
  require(Bv.rank() == 2 && Bv.dim(0) == rows && C.value().shape() == Bv.shape(),
          "ssd_scan: B/C shape mismatch");
  require(seq_len > 0 && rows % seq_len == 0, "ssd_scan: rows not a multiple of seq_len");
  const std::size_t N = Bv.dim(1), P = head_dim;

  const Tensor<T>& dv = delta.value();
  const Tensor<T>& Cv = C.value();
  const Tensor<T>& Al = A_log.value();
  const Tensor<T>& Dv = D.value();
  std::vector<T> a(H);
  for (std::size_t h = 0; h < H; ++h) a[h] = -std::exp(Al[h]);

  const bool keep = x.tape->recording();
  // All states h_t, kept for the reverse pass: rows x d_inner x N.
  auto states = std::make_shared<std::vector<T>>(keep ? rows * d_inner * N : 0);
  std::vector<T> h(d_inner * N);
  Tensor<T> out({rows, d_inner});
  for (std::size_t r = 0; r < rows; ++r) {
    if (r % seq_len == 0) std::fill(h.begin(), h.end(), T{0});
    for (std::size_t hd = 0; hd < H; ++hd) {
      const T dt = dv[r * H + hd];
      require(dt >= T{0}, "ssd_scan: delta must be non-negative");
      const T a_bar = std::exp(dt * a[hd]);
      const T gain = zoh_input_gain(dt, a[hd]);
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t ch = hd * P + p;
        const T xin = xv[r * d_inner + ch];
        T* hs = h.data() + ch * N;
        T acc = 0;
        for (std::size_t s = 0; s < N; ++s) {
          hs[s] = a_bar * hs[s] + gain * Bv[r * N + s] * xin;
          acc += Cv[r * N + s] * hs[s];
        }
        out[r * d_inner + ch] = acc + Dv[hd] * xin;
      }
    }
    if (keep) std::copy(h.begin(), h.end(), states->begin() + r * d_inner * N);
  }
  out.check_finite("ssd_scan output");

  Tape<T>* tape = x.tape;
  return tape->record(
      std::move(out), {x, delta, A_log, B, C, D},
      [=](std::span<const T> g) {
        const Tensor<T>& xv = x.value();
        const Tensor<T>& dv = delta.value();
        const Tensor<T>& Bv = B.value();
        const Tensor<T>& Cv = C.value();
        const Tensor<T>& Dv = D.value();
        std::vector<T> gx(rows * d_inner, T{0}), gdelta(rows * H, T{0});
        std::vector<T> gB(rows * N, T{0}), gC(rows * N, T{0});
        std::vector<T> ga(H, T{0}), gD(H, T{0});
        std::vector<T> dh(d_inner * N, T{0});
        const std::vector<T>& st = *states;
        for (std::size_t r = rows; r-- > 0;) {
          const std::size_t t = r % seq_len;
          if (t == seq_len - 1) std::fill(dh.begin(), dh.end(), T{0});
          const T* h_now = st.data() + r * d_inner * N;
          const T* h_prev = t == 0 ? nullptr : st.data() + (r - 1) * d_inner * N;
          for (std::size_t hd = 0; hd < H; ++hd) {
            const T dt = dv[r * H + hd];
            const T da = dt * a[hd];
            const T a_bar = std::exp(da);
            const bool guarded = std::abs(da) < static_cast<T>(kZohGuard);
            const T gain = guarded ? dt : std::expm1(da) / a[hd];
            T g_abar = 0, g_gain = 0;
            for (std::size_t p = 0; p < P; ++p) {
              const std::size_t ch = hd * P + p;
              const T gy = g[r * d_inner + ch];
              const T xin = xv[r * d_inner + ch];
              gD[hd] += gy * xin;
              T gxin = Dv[hd] * gy;
              T* d = dh.data() + ch * N;
              const T* hn = h_now + ch * N;
              for (std::size_t s = 0; s < N; ++s) {
                gC[r * N + s] += gy * hn[s];
                d[s] += gy * Cv[r * N + s];
                if (h_prev != nullptr) g_abar += d[s] * h_prev[ch * N + s];
                g_gain += d[s] * Bv[r * N + s] * xin;
                gB[r * N + s] += d[s] * gain * xin;
                gxin += d[s] * gain * Bv[r * N + s];
                d[s] *= a_bar;
              }
              gx[r * d_inner + ch] += gxin;
            }
            // a_bar = exp(dt a); gain = expm1(dt a) / a (or dt when guarded).
            const T dgain_ddt = guarded ? T{1} : a_bar;
            const T dgain_da = guarded ? T{0} : (dt * a_bar - gain) / a[hd];
            gdelta[r * H + hd] += g_abar * a[hd] * a_bar + g_gain * dgain_ddt;
            ga[hd] += g_abar * dt * a_bar + g_gain * dgain_da;
          }
        }
        auto flush = [tape](Var<T> v, const std::vector<T>& src) {
          if (!tape->needs_grad(v)) return;
          std::span<T> dst = tape->grad_of(v);
          for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
        };
        flush(x, gx);
        flush(delta, gdelta);
        flush(B, gB);
        flush(C, gC);
        flush(D, gD);
        if (tape->needs_grad(A_log)) {
          // a = -exp(A_log) so da/dA_log = a.
          std::span<T> gl = tape->grad_of(A_log);
          for (std::size_t h = 0; h < H; ++h) gl[h] += ga[h] * a[h];
        }
      });
}

template <typename T>
Var<T> block_forward(Var<T> u, SsdBlockParams<T>& p, std::size_t seq_len) {
  const BlockDims& d = p.dims;
  const Tensor<T>& uv = u.value();
  if (uv.rank() != 2 || uv.dim(1) != d.d_model) {
    throw TensorError("block_forward: input " + shape_str(uv.shape()) +
                      " does not match d_model " + std::to_string(d.d_model));
  }
  if (uv.dim(0) == 0) throw TensorError("block_forward: empty sequence");
  Tape<T>& tape = *u.tape;
  const std::size_t di = d.d_inner, ds = d.d_state, cd = d.conv_dim();

  Var<T> proj = fbi_linear(u, p.in_proj);
  Var<T> z = slice_cols(proj, 0, di);
  Var<T> xbc = slice_cols(proj, di, di + cd);
  Var<T> dt_raw = slice_cols(proj, di + cd, d.in_proj_dim());

  xbc = silu(causal_conv(xbc, tape.param(p.core.conv_weight),
                         tape.param(p.core.conv_bias), seq_len));
  Var<T> x = slice_cols(xbc, 0, di);
  Var<T> B = slice_cols(xbc, di, di + ds);
  Var<T> C = slice_cols(xbc, di + ds, di + 2 * ds);
  Var<T> delta = softplus(add_row(dt_raw, tape.param(p.core.dt_bias)));

  Var<T> y = ssd_scan(x, delta, tape.param(p.core.A_log), B, C,
                      tape.param(p.core.D), seq_len, d.head_dim);
  y = rms_norm_rows(mul(y, silu(z)), tape.param(p.core.norm_weight),
                    static_cast<T>(kNormEps));
  return fbi_linear(y, p.out_proj);
}

template <typename T>
std::vector<T> block_step(std::span<const T> u, RecurrentState<T>& state,
                          const SsdBlockParams<T>& p) {
  if (u.size() != p.dims.d_model) {
    throw TensorError("block_step: input length does not match d_model");
  }
  std::vector<T> out(p.dims.d_model);
  auto apply = [](const FbiLinearParams<T>& lin) {
    return [&lin](std::span<const T> in, std::span<T> dst) {
      std::vector<T> y = fbi_forward(in, lin);
      std::copy(y.begin(), y.end(), dst.begin());
    };
  };
  detail::block_step_with(p.dims, p.core, apply(p.in_proj), apply(p.out_proj), u,
                          state, std::span<T>(out));
  return out;
}

#define BIMAMBA_INSTANTIATE_SSD(T)                                                 \
  template struct SsdBlockParams<T>;                                               \
  template struct RecurrentState<T>;                                               \
  template T zoh_input_gain<T>(T, T);                                              \
  template Tensor<T> ssd_scan<T>(const Tensor<T>&, const Tensor<T>&,               \
                                 std::span<const T>, const Tensor<T>&,             \
                                 const Tensor<T>&, std::span<const T>);            \
  template Var<T> causal_conv<T>(Var<T>, Var<T>, Var<T>, std::size_t);             \
  template Var<T> ssd_scan<T>(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>,      \
                              std::size_t, std::size_t);                           \
  template Var<T> block_forward<T>(Var<T>, SsdBlockParams<T>&, std::size_t);       \
  template std::vector<T> block_step<T>(std::span<const T>, RecurrentState<T>&,    \
                                        const SsdBlockParams<T>&);

BIMAMBA_INSTANTIATE_SSD(float)
BIMAMBA_INSTANTIATE_SSD(double)

#undef BIMAMBA_INSTANTIATE_SSD

}  // namespace bimamba

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

// Mamba-2 style mixer block: binarizable input projection, causal depthwise
// convolution, zero-order-hold discretisation, scalar-decay state scan per
// head, D skip, gated RMSNorm and binarizable output projection.
//
// in_proj output columns are laid out as [z | x | B | C | dt] with widths
// d_inner, d_inner, d_state, d_state, n_heads. B and C are shared by all
// heads (a single group).

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bimamba/fbi_linear.hpp"
#include "bimamba/ops.hpp"
#include "bimamba/rng.hpp"
#include "bimamba/tensor.hpp"

namespace bimamba {

inline constexpr double kNormEps = 1e-5;
// Below this |delta * a| the ZOH input gain is replaced by its limit delta.
inline constexpr double kZohGuard = 1e-6;

struct BlockDims {
  std::size_t d_model = 0;
  std::size_t d_inner = 0;
  std::size_t n_heads = 0;
  std::size_t head_dim = 0;
  std::size_t d_state = 0;
  std::size_t d_conv = 0;

  std::size_t conv_dim() const { return d_inner + 2 * d_state; }
  std::size_t in_proj_dim() const { return 2 * d_inner + 2 * d_state + n_heads; }
  void validate() const;
};

// Full-precision members of a block.
template <typename T>
struct SsdCoreParams {
  Tensor<T> conv_weight;  // conv_dim x d_conv, last tap is the current token
  Tensor<T> conv_bias;    // conv_dim
  Tensor<T> A_log;        // n_heads, decay a = -exp(A_log)
  Tensor<T> D;            // n_heads
  Tensor<T> dt_bias;      // n_heads
  Tensor<T> norm_weight;  // d_inner
};

template <typename T>
struct SsdBlockParams {
  BlockDims dims;
  FbiLinearParams<T> in_proj;   // d_model -> in_proj_dim
  SsdCoreParams<T> core;
  FbiLinearParams<T> out_proj;  // d_inner -> d_model

  static SsdBlockParams init(const BlockDims& dims, bool binarize_in,
                             bool binarize_out, Rng& rng);
  void set_requires_grad(bool on);
  void validate() const;
};

template <typename T>
struct RecurrentState {
  Tensor<T> h;            // n_heads x head_dim x d_state
  Tensor<T> conv_window;  // (d_conv - 1) x conv_dim, oldest row first

  static RecurrentState zeros(const BlockDims& dims);
  std::size_t bytes() const { return (h.size() + conv_window.size()) * sizeof(T); }
  void check(const BlockDims& dims) const;
};

// (exp(delta * a) - 1) / a, the ZOH gain applied to B. Replaced by delta when
// |delta * a| < kZohGuard.
template <typename T>
T zoh_input_gain(T delta, T a);

struct Discretized {
  double a_bar = 0.0;
  std::vector<double> b_bar;
};

// a_bar = exp(delta * a), B_bar = zoh_input_gain(delta, a) * B.
Discretized discretize(double delta, double a, std::span<const double> b);

// Sequential reference scan over one sequence, h_0 = 0.
//   x: L x n_heads x head_dim, delta: L x n_heads, a: n_heads,
//   B, C: L x d_state, D: n_heads.  Returns L x n_heads x head_dim.
template <typename T>
Tensor<T> ssd_scan(const Tensor<T>& x, const Tensor<T>& delta,
                   std::span<const T> a, const Tensor<T>& B, const Tensor<T>& C,
                   std::span<const T> D);

// Tape ops. Rows of the inputs are `rows / seq_len` sequences laid end to
// end; state never crosses a sequence boundary.
template <typename T>
Var<T> causal_conv(Var<T> x, Var<T> weight, Var<T> bias, std::size_t seq_len);
template <typename T>
Var<T> ssd_scan(Var<T> x, Var<T> delta, Var<T> A_log, Var<T> B, Var<T> C,
                Var<T> D, std::size_t seq_len, std::size_t head_dim);

// rows x d_model -> rows x d_model, residual not included.
template <typename T>
Var<T> block_forward(Var<T> u, SsdBlockParams<T>& p, std::size_t seq_len);

// One token through the block, advancing `state`.
template <typename T>
std::vector<T> block_step(std::span<const T> u, RecurrentState<T>& state,
                          const SsdBlockParams<T>& p);

namespace detail {

// Shared single-token body. `in_proj(x, y)` and `out_proj(x, y)` apply the
// two projections; everything else reads `core`.
template <typename T, typename InProj, typename OutProj>
void block_step_with(const BlockDims& d, const SsdCoreParams<T>& core,
                     InProj&& in_proj, OutProj&& out_proj,
                     std::span<const T> u, RecurrentState<T>& state,
                     std::span<T> out) {
  state.check(d);
  const std::size_t cd = d.conv_dim(), taps = d.d_conv;
  std::vector<T> proj(d.in_proj_dim());
  in_proj(u, std::span<T>(proj));
  const T* z = proj.data();
  const T* xbc_raw = proj.data() + d.d_inner;
  const T* dt_raw = xbc_raw + cd;

  std::vector<T> xbc(cd);
  T* window = state.conv_window.ptr();
  for (std::size_t c = 0; c < cd; ++c) {
    T acc = core.conv_bias[c];
    for (std::size_t k = 0; k + 1 < taps; ++k) {
      acc += core.conv_weight[c * taps + k] * window[k * cd + c];
    }
    acc += core.conv_weight[c * taps + taps - 1] * xbc_raw[c];
    xbc[c] = silu_scalar(acc);
  }
  if (taps > 1) {
    for (std::size_t k = 0; k + 2 < taps; ++k) {
      for (std::size_t c = 0; c < cd; ++c) window[k * cd + c] = window[(k + 1) * cd + c];
    }
    for (std::size_t c = 0; c < cd; ++c) window[(taps - 2) * cd + c] = xbc_raw[c];
  }

  const T* x = xbc.data();
  const T* B = x + d.d_inner;
  const T* C = B + d.d_state;
  std::vector<T> y(d.d_inner);
  T* h = state.h.ptr();
  for (std::size_t hd = 0; hd < d.n_heads; ++hd) {
    const T delta = softplus_scalar(dt_raw[hd] + core.dt_bias[hd]);
    const T a = -std::exp(core.A_log[hd]);
    const T a_bar = std::exp(delta * a);
    const T gain = zoh_input_gain(delta, a);
    for (std::size_t p = 0; p < d.head_dim; ++p) {
      const std::size_t ch = hd * d.head_dim + p;
      const T xv = x[ch];
      T* hs = h + ch * d.d_state;
      T acc = 0;
      for (std::size_t s = 0; s < d.d_state; ++s) {
        hs[s] = a_bar * hs[s] + gain * B[s] * xv;
        acc += C[s] * hs[s];
      }
      y[ch] = acc + core.D[hd] * xv;
    }
  }

  T ss = 0;
  for (std::size_t c = 0; c < d.d_inner; ++c) {
    y[c] *= silu_scalar(z[c]);
    ss += y[c] * y[c];
  }
  const T inv = T{1} / std::sqrt(ss / static_cast<T>(d.d_inner) + static_cast<T>(kNormEps));
  for (std::size_t c = 0; c < d.d_inner; ++c) y[c] = y[c] * inv * core.norm_weight[c];
  out_proj(std::span<const T>(y), out);
}

}  // namespace detail

}  // namespace bimamba

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

#include "bimamba/fbi_linear.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <memory>
#include <string>

#include "bimamba/ops.hpp"

namespace bimamba {
namespace {

template <typename T>
void require_dims(const FbiLinearParams<T>& p) {
  if (p.weight.rank() != 2) throw TensorError("fbi: weight must be rank 2");
  if (p.binarized && (p.alpha.size() != p.cols() || p.beta.size() != p.cols())) {
    throw TensorError("fbi: alpha/beta length must equal input dimension " +
                      std::to_string(p.cols()));
  }
}

}  // namespace

template <typename T>
FbiLinearParams<T> FbiLinearParams<T>::random(std::size_t rows, std::size_t cols,
                                              bool binarized, T init_std,
                                              Rng& rng) {
  FbiLinearParams p;
  p.weight = Tensor<T>({rows, cols});
  std::normal_distribution<double> dist(0.0, static_cast<double>(init_std));
  for (T& v : p.weight.data()) v = static_cast<T>(dist(rng));
  p.binarized = binarized;
  p.alpha = Tensor<T>({cols});
  p.beta = Tensor<T>({cols});
  if (binarized) {
    p.clamp_latent();
    p.init_scales_from_weight();
  }
  return p;
}

template <typename T>
void FbiLinearParams<T>::init_scales_from_weight() {
  const std::size_t m = rows(), n = cols();
  alpha = Tensor<T>({n});
  beta = Tensor<T>({n});
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      alpha[i] += std::abs(weight.at(j, i));
      beta[i] += weight.at(j, i);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    alpha[i] /= static_cast<T>(m);
    beta[i] /= static_cast<T>(m);
  }
}

template <typename T>
void FbiLinearParams<T>::clamp_latent() {
  for (T& v : weight.data()) v = std::clamp(v, T{-1}, T{1});
}

template <typename T>
void FbiLinearParams<T>::set_requires_grad(bool on) {
  weight.set_requires_grad(on);
  alpha.set_requires_grad(on && binarized);
  beta.set_requires_grad(on && binarized);
}

template <typename T>
Tensor<T> binarize(const Tensor<T>& w) {
  Tensor<T> out(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (std::isnan(w[i])) {
      throw TensorError("binarize: NaN at flat index " + std::to_string(i));
    }
    out[i] = sign_pm1(w[i]);
  }
  return out;
}

template <typename T>
Tensor<T> effective_weight(const FbiLinearParams<T>& p) {
  require_dims(p);
  if (!p.binarized) return p.weight;
  const std::size_t m = p.rows(), n = p.cols();
  Tensor<T> out({m, n});
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      out.at(j, i) = p.alpha[i] * sign_pm1(p.weight.at(j, i)) + p.beta[i];
    }
  }
  return out;
}

template <typename T>
std::vector<T> fbi_forward(std::span<const T> x, const FbiLinearParams<T>& p) {
  require_dims(p);
  const std::size_t m = p.rows(), n = p.cols();
  if (x.size() != n) {
    throw TensorError("fbi_forward: input length " + std::to_string(x.size()) +
                      " != " + std::to_string(n));
  }
  std::vector<T> y(m, T{0});
  if (!p.binarized) {
    for (std::size_t j = 0; j < m; ++j) {
      T acc = 0;
      for (std::size_t i = 0; i < n; ++i) acc += p.weight.at(j, i) * x[i];
      y[j] = acc;
    }
    return y;
  }
  std::vector<T> scaled(n);
  T shift = 0;
  for (std::size_t i = 0; i < n; ++i) {
    scaled[i] = p.alpha[i] * x[i];
    shift += p.beta[i] * x[i];
  }
  for (std::size_t j = 0; j < m; ++j) {
    T acc = 0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += sign_pm1(p.weight.at(j, i)) * scaled[i];
    }
    y[j] = acc + shift;
  }
  return y;
}

template <typename T>
FbiGradients<T> fbi_backward_ste(std::span<const T> g_y, std::span<const T> x,
                                 const FbiLinearParams<T>& p) {
  require_dims(p);
  const std::size_t m = p.rows(), n = p.cols();
  if (x.empty()) {
    throw TensorError("fbi_backward_ste: no cached forward input");
  }
  if (x.size() != n || g_y.size() != m) {
    throw TensorError("fbi_backward_ste: dimension mismatch");
  }
  FbiGradients<T> g{Tensor<T>({m, n}), Tensor<T>({n}), Tensor<T>({n}),
                    std::vector<T>(n, T{0})};
  T g_sum = 0;
  for (std::size_t j = 0; j < m; ++j) g_sum += g_y[j];
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      const T w = p.weight.at(j, i);
      const T s = sign_pm1(w);
      g.alpha[i] += g_y[j] * s * x[i];
      g.x[i] += (p.alpha[i] * s + p.beta[i]) * g_y[j];
      g.weight.at(j, i) = std::abs(w) <= T{1} ? g_y[j] * p.alpha[i] * x[i] : T{0};
    }
  }
  for (std::size_t i = 0; i < n; ++i) g.beta[i] = g_sum * x[i];
  return g;
}

template <typename T>
Var<T> fbi_linear(Var<T> x, FbiLinearParams<T>& p) {
  require_dims(p);
  Tape<T>* tape = x.tape;
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2 || xv.dim(1) != p.cols()) {
    throw TensorError("fbi_linear: input " + shape_str(xv.shape()) +
                      " does not match weight " + shape_str(p.weight.shape()));
  }
  Var<T> w = tape->param(p.weight);
  if (!p.binarized) return matmul_nt(x, w);

  Var<T> a = tape->param(p.alpha);
  Var<T> b = tape->param(p.beta);
  const std::size_t rows = xv.dim(0), m = p.rows(), n = p.cols();
  auto w_eff = std::make_shared<Tensor<T>>(effective_weight(p));
  xv.check_finite("fbi_linear input");
  Tensor<T> out({rows, m});
  kernels::gemm_nt(rows, n, m, xv.ptr(), w_eff->ptr(), out.ptr());
  return tape->record(
      std::move(out), {x, w, a, b},
      [x, w, a, b, tape, w_eff, rows, m, n](std::span<const T> g) {
        if (tape->needs_grad(x)) {
          kernels::gemm_nn(rows, m, n, g.data(), w_eff->ptr(),
                           tape->grad_of(x).data());
        }
        const bool latent = tape->needs_grad(w);
        const bool scales = tape->needs_grad(a) || tape->needs_grad(b);
        if (!latent && !scales) return;
        // Gradient w.r.t. the effective weight, g^T x.
        std::vector<T> g_eff(m * n, T{0});
        kernels::gemm_tn(rows, m, n, g.data(), x.value().ptr(), g_eff.data());
        const Tensor<T>& wf = w.value();
        const Tensor<T>& av = a.value();
        std::span<T> gw = latent ? tape->grad_of(w) : std::span<T>{};
        std::span<T> ga = tape->needs_grad(a) ? tape->grad_of(a) : std::span<T>{};
        std::span<T> gb = tape->needs_grad(b) ? tape->grad_of(b) : std::span<T>{};
        for (std::size_t j = 0; j < m; ++j) {
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = j * n + i;
            const T s = sign_pm1(wf[k]);
            if (!ga.empty()) ga[i] += g_eff[k] * s;
            if (!gb.empty()) gb[i] += g_eff[k];
            if (latent && std::abs(wf[k]) <= T{1}) gw[k] += g_eff[k] * av[i];
          }
        }
      });
}

PackedMatrix PackedMatrix::pack(const Tensor<float>& signs,
                                std::vector<float> alpha,
                                std::vector<float> beta) {
  if (signs.rank() != 2) throw TensorError("pack: expected a matrix");
  const std::size_t m = signs.dim(0), n = signs.dim(1);
  if (alpha.size() != n || beta.size() != n) {
    throw TensorError("pack: alpha/beta length must equal " + std::to_string(n));
  }
  PackedMatrix pm;
  pm.rows_ = m;
  pm.cols_ = n;
  const std::size_t wpr = pm.words_per_row();
  pm.words_.assign(m * wpr, 0);
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t i = 0; i < n; ++i) {
      const float v = signs.at(j, i);
      if (v == 1.0f) {
        pm.words_[j * wpr + i / 64] |= std::uint64_t{1} << (i % 64);
      } else if (v != -1.0f) {
        throw TensorError("pack: entry (" + std::to_string(j) + ", " +
                          std::to_string(i) + ") is not +-1");
      }
    }
  }
  pm.alpha_ = std::move(alpha);
  pm.beta_ = std::move(beta);
  return pm;
}

PackedMatrix PackedMatrix::from_params(const FbiLinearParams<float>& p) {
  if (!p.binarized) throw TensorError("pack: layer is not binarized");
  return pack(binarize(p.weight),
              std::vector<float>(p.alpha.data().begin(), p.alpha.data().end()),
              std::vector<float>(p.beta.data().begin(), p.beta.data().end()));
}

PackedMatrix PackedMatrix::from_words(std::size_t rows, std::size_t cols,
                                      std::vector<std::uint64_t> words,
                                      std::vector<float> alpha,
                                      std::vector<float> beta) {
  PackedMatrix pm;
  pm.rows_ = rows;
  pm.cols_ = cols;
  const std::size_t wpr = pm.words_per_row();
  if (words.size() != rows * wpr) {
    throw TensorError("packed matrix: expected " + std::to_string(rows * wpr) +
                      " words, got " + std::to_string(words.size()));
  }
  if (alpha.size() != cols || beta.size() != cols) {
    throw TensorError("packed matrix: alpha/beta length mismatch");
  }
  if (cols % 64 != 0) {
    const std::uint64_t pad_mask = ~((std::uint64_t{1} << (cols % 64)) - 1);
    for (std::size_t j = 0; j < rows; ++j) {
      if (words[j * wpr + wpr - 1] & pad_mask) {
        throw TensorError("packed matrix: nonzero padding bits in row " +
                          std::to_string(j));
      }
    }
  }
  pm.words_ = std::move(words);
  pm.alpha_ = std::move(alpha);
  pm.beta_ = std::move(beta);
  return pm;
}

Tensor<float> PackedMatrix::unpack() const {
  Tensor<float> out({rows_, cols_});
  const std::size_t wpr = words_per_row();
  for (std::size_t j = 0; j < rows_; ++j) {
    for (std::size_t i = 0; i < cols_; ++i) {
      const bool bit = (words_[j * wpr + i / 64] >> (i % 64)) & 1U;
      out.at(j, i) = bit ? 1.0f : -1.0f;
    }
  }
  return out;
}

void PackedMatrix::gemv(std::span<const float> x, std::span<float> y) const {
  if (x.size() != cols_ || y.size() != rows_) {
    throw TensorError("packed gemv: dimension mismatch");
  }
  const std::size_t wpr = words_per_row();
  const std::size_t groups = wpr * 8;
  thread_local std::vector<float> scaled;
  thread_local std::vector<float> table;
  scaled.assign(groups * 8, 0.0f);
  float total = 0.0f, shift = 0.0f;
  for (std::size_t i = 0; i < cols_; ++i) {
    scaled[i] = alpha_[i] * x[i];
    total += scaled[i];
    shift += beta_[i] * x[i];
  }
  table.resize(groups * 256);
  for (std::size_t g = 0; g < groups; ++g) {
    float* t = table.data() + g * 256;
    const float* s = scaled.data() + g * 8;
    t[0] = 0.0f;
    for (unsigned b = 1; b < 256; ++b) {
      t[b] = t[b & (b - 1)] + s[std::countr_zero(b)];
    }
  }
  const float offset = shift - total;
  for (std::size_t j = 0; j < rows_; ++j) {
    const std::uint64_t* row = words_.data() + j * wpr;
    const float* t = table.data();
    float acc = 0.0f;
    for (std::size_t w = 0; w < wpr; ++w, t += 8 * 256) {
      const std::uint64_t bits = row[w];
      acc += t[0 * 256 + (bits & 0xFF)] + t[1 * 256 + ((bits >> 8) & 0xFF)] +
             t[2 * 256 + ((bits >> 16) & 0xFF)] + t[3 * 256 + ((bits >> 24) & 0xFF)] +
             t[4 * 256 + ((bits >> 32) & 0xFF)] + t[5 * 256 + ((bits >> 40) & 0xFF)] +
             t[6 * 256 + ((bits >> 48) & 0xFF)] + t[7 * 256 + (bits >> 56)];
    }
    y[j] = 2.0f * acc + offset;
  }
}

void PackedMatrix::gemv_bitscan(std::span<const float> x,
                                std::span<float> y) const {
  if (x.size() != cols_ || y.size() != rows_) {
    throw TensorError("packed gemv: dimension mismatch");
  }
  const std::size_t wpr = words_per_row();
  std::vector<float> scaled(cols_);
  float total = 0.0f, shift = 0.0f;
  for (std::size_t i = 0; i < cols_; ++i) {
    scaled[i] = alpha_[i] * x[i];
    total += scaled[i];
    shift += beta_[i] * x[i];
  }
  for (std::size_t j = 0; j < rows_; ++j) {
    float acc = 0.0f;
    for (std::size_t w = 0; w < wpr; ++w) {
      std::uint64_t bits = words_[j * wpr + w];
      while (bits) {
        acc += scaled[w * 64 + std::countr_zero(bits)];
        bits &= bits - 1;
      }
    }
    y[j] = 2.0f * acc - total + shift;
  }
}

void dense_gemv(const Tensor<float>& w, std::span<const float> x,
                std::span<float> y) {
  const std::size_t m = w.dim(0), n = w.dim(1);
  if (x.size() != n || y.size() != m) {
    throw TensorError("dense gemv: dimension mismatch");
  }
  const float* wp = w.ptr();
  for (std::size_t j = 0; j < m; ++j) {
    const float* row = wp + j * n;
    // Eight lanes of partial sums in a fixed order: vectorisable and still
    // reproducible.
    float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
      for (std::size_t l = 0; l < 8; ++l) acc[l] += row[i + l] * x[i + l];
    }
    for (; i < n; ++i) acc[0] += row[i] * x[i];
    y[j] = ((acc[0] + acc[1]) + (acc[2] + acc[3])) +
           ((acc[4] + acc[5]) + (acc[6] + acc[7]));
  }
}

#define BIMAMBA_INSTANTIATE_FBI(T)                                              \
  template struct FbiLinearParams<T>;                                           \
  template Tensor<T> binarize<T>(const Tensor<T>&);                             \
  template Tensor<T> effective_weight<T>(const FbiLinearParams<T>&);            \
  template std::vector<T> fbi_forward<T>(std::span<const T>,                    \
                                         const FbiLinearParams<T>&);            \
  template FbiGradients<T> fbi_backward_ste<T>(                                 \
      std::span<const T>, std::span<const T>, const FbiLinearParams<T>&);       \
  template Var<T> fbi_linear<T>(Var<T>, FbiLinearParams<T>&);

BIMAMBA_INSTANTIATE_FBI(float)
BIMAMBA_INSTANTIATE_FBI(double)

#undef BIMAMBA_INSTANTIATE_FBI

}  // namespace bimamba

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

// Binarized linear layer with learnable per-column scale and shift, its
// straight-through backward, and the bit-packed inference representation.
//
// The effective weight of a binarized layer is
//   W~[j, i] = alpha[i] * sign(W_f[j, i]) + beta[i]
// with sign(0) = +1, so that y = W~ x = W_b (alpha . x) + (beta . x) 1.
// alpha and beta are indexed by input column.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bimamba/rng.hpp"
#include "bimamba/tensor.hpp"

namespace bimamba {

template <typename T>
struct FbiLinearParams {
  Tensor<T> weight;  // latent W_f, rows = outputs, cols = inputs
  Tensor<T> alpha;   // length cols
  Tensor<T> beta;    // length cols
  // When false the layer is an ordinary dense linear map over `weight` and
  // alpha/beta are unused.
  bool binarized = true;

  std::size_t rows() const { return weight.dim(0); }
  std::size_t cols() const { return weight.dim(1); }

  // Gaussian latent weights, then scales initialised from them.
  static FbiLinearParams random(std::size_t rows, std::size_t cols,
                                bool binarized, T init_std, Rng& rng);

  // alpha = column mean |W_f|, beta = column mean W_f.
  void init_scales_from_weight();
  // Keeps latent weights inside the STE window [-1, 1].
  void clamp_latent();
  void set_requires_grad(bool on);
};

template <typename T>
constexpr T sign_pm1(T v) {
  return v >= T{0} ? T{1} : T{-1};
}

template <typename T>
Tensor<T> binarize(const Tensor<T>& w);

// W~ for binarized layers, W_f for dense ones.
template <typename T>
Tensor<T> effective_weight(const FbiLinearParams<T>& p);

// Single-vector forward via the scale/shift identity.
template <typename T>
std::vector<T> fbi_forward(std::span<const T> x, const FbiLinearParams<T>& p);

template <typename T>
struct FbiGradients {
  Tensor<T> weight;
  Tensor<T> alpha;
  Tensor<T> beta;
  std::vector<T> x;
};

// Backward of fbi_forward for a binarized layer. `x` is the input cached from
// the forward pass. The latent gradient is the straight-through estimate
// g_y[j] * alpha[i] * x[i], masked to zero where |W_f[j, i]| > 1.
template <typename T>
FbiGradients<T> fbi_backward_ste(std::span<const T> g_y, std::span<const T> x,
                                 const FbiLinearParams<T>& p);

// Tape op over a batch of row vectors: y[r] = W~ x[r].
template <typename T>
Var<T> fbi_linear(Var<T> x, FbiLinearParams<T>& p);

// Sign bits of a +-1 matrix, LSB-first in 64-bit words, one run of words per
// row. Bit k of word w in row j is column 64 * w + k; 1 means +1. Padding
// bits past the last column are zero.
class PackedMatrix {
 public:
  // rows, cols as two u64 values.
  static constexpr std::size_t kHeaderBytes = 16;

  PackedMatrix() = default;

  static PackedMatrix pack(const Tensor<float>& signs, std::vector<float> alpha,
                           std::vector<float> beta);
  static PackedMatrix from_params(const FbiLinearParams<float>& p);
  // Validates word count and zero padding.
  static PackedMatrix from_words(std::size_t rows, std::size_t cols,
                                 std::vector<std::uint64_t> words,
                                 std::vector<float> alpha,
                                 std::vector<float> beta);

  Tensor<float> unpack() const;

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t words_per_row() const { return (cols_ + 63) / 64; }
  std::span<const std::uint64_t> words() const { return words_; }
  std::span<const std::uint64_t> row_words(std::size_t row) const {
    return std::span<const std::uint64_t>(words_).subspan(
        row * words_per_row(), words_per_row());
  }
  std::span<const float> alpha() const { return alpha_; }
  std::span<const float> beta() const { return beta_; }

  std::size_t weight_bytes() const { return words_.size() * 8; }
  // Sign words plus fp32 alpha and beta plus the fixed header.
  std::size_t byte_size() const {
    return weight_bytes() + 2 * cols_ * sizeof(float) + kHeaderBytes;
  }

  // y = W~ x. With s = alpha . x and total = sum(s), each row is
  // 2 * sum_{bits set} s - total + beta . x. Partial sums over each byte of a
  // word come from a 256-entry table per byte position.
  void gemv(std::span<const float> x, std::span<float> y) const;
  // Same contract, iterating set bits of each word. Kept as a second route.
  void gemv_bitscan(std::span<const float> x, std::span<float> y) const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint64_t> words_;
  std::vector<float> alpha_;
  std::vector<float> beta_;
};

// Plain fp32 y = W x over a dense rows x cols matrix.
void dense_gemv(const Tensor<float>& w, std::span<const float> x,
                std::span<float> y);

}  // namespace bimamba

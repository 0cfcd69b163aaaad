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

// Differentiable primitives over Var<T>. Matrices are rank-2 row-major;
// "row vectors" are rank-1 tensors broadcast across the rows of a matrix.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>

#include "bimamba/tensor.hpp"

namespace bimamba {

template <typename T>
inline T sigmoid_scalar(T x) {
  return T{1} / (T{1} + std::exp(-x));
}
template <typename T>
inline T silu_scalar(T x) {
  return x * sigmoid_scalar(x);
}
// log(1 + e^x) without overflow.
template <typename T>
inline T softplus_scalar(T x) {
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

// Plain kernels, usable without a tape. All accumulate into `c`, summing in
// index order so results are reproducible bit for bit.
namespace kernels {
// c[m x n] += a[m x k] * b[k x n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c);
// c[k x n] += a[m x k]^T * g[m x n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* g, T* c);
// c[m x n] += a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c);
}  // namespace kernels

// Row-wise softmax of a plain tensor, with per-row max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x);
template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x);

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);
// a[m x k] * b[n x k]^T, i.e. y = x W^T for a weight stored out x in.
template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
// a[m x n] + v[n] (v replicated across rows; gradient summed over rows).
template <typename T>
Var<T> add_row(Var<T> a, Var<T> v);
template <typename T>
Var<T> mul_row(Var<T> a, Var<T> v);

template <typename T>
Var<T> exp(Var<T> a);
template <typename T>
Var<T> log(Var<T> a);
template <typename T>
Var<T> silu(Var<T> a);
template <typename T>
Var<T> softplus(Var<T> a);

template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);

template <typename T>
Var<T> softmax_rows(Var<T> x);
template <typename T>
Var<T> log_softmax_rows(Var<T> x);

// Columns [begin, end) of a matrix.
template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end);
// Rows of `table` selected by `ids`.
template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::int32_t> ids);
// x / rms(x) * w per row, rms = sqrt(mean(x^2) + eps).
template <typename T>
Var<T> rms_norm_rows(Var<T> x, Var<T> w, T eps);

// Mean over rows of -log softmax(logits)[row, target[row]].
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets);
// Mean over rows of -sum_v probs[row, v] * log softmax(logits)[row, v].
// `probs` is a constant: no gradient reaches whatever produced it.
template <typename T>
Var<T> soft_cross_entropy(Var<T> logits, const Tensor<T>& probs);

}  // namespace bimamba

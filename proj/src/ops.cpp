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

#include "bimamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace bimamba {
namespace {

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw TensorError(std::string(op) + ": expected rank " +
                      std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (a.shape() != b.shape()) {
    throw TensorError(std::string(op) + ": shape mismatch " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_row_vector(const Tensor<T>& a, const Tensor<T>& v,
                        const char* op) {
  require_rank(a, 2, op);
  if (v.rank() != 1 || v.dim(0) != a.dim(1)) {
    throw TensorError(std::string(op) + ": cannot broadcast " +
                      shape_str(v.shape()) + " over rows of " +
                      shape_str(a.shape()));
  }
}

// Elementwise unary op. `df` maps (input, output) to the local derivative.
template <typename T, typename F, typename DF>
Var<T> unary(Var<T> a, F f, DF df) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  Tape<T>* tape = a.tape;
  return tape->record(std::move(out), {a}, [a, df, tape](std::span<const T> g) {
    const Tensor<T>& x = a.value();
    std::span<T> ga = tape->grad_of(a);
    for (std::size_t i = 0; i < x.size(); ++i) ga[i] += g[i] * df(x[i]);
  });
}

}  // namespace

namespace kernels {

template <typename T>
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <typename T>
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* g, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      T* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
    }
  }
}

template <typename T>
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const T* a,
             const T* b, T* c) {
  std::vector<T> bt(k * n);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  }
  gemm_nn(m, k, n, a, bt.data(), c);
}

template void gemm_nn<float>(std::size_t, std::size_t, std::size_t,
                             const float*, const float*, float*);
template void gemm_nn<double>(std::size_t, std::size_t, std::size_t,
                              const double*, const double*, double*);
template void gemm_tn<float>(std::size_t, std::size_t, std::size_t,
                             const float*, const float*, float*);
template void gemm_tn<double>(std::size_t, std::size_t, std::size_t,
                              const double*, const double*, double*);
template void gemm_nt<float>(std::size_t, std::size_t, std::size_t,
                             const float*, const float*, float*);
template void gemm_nt<double>(std::size_t, std::size_t, std::size_t,
                              const double*, const double*, double*);

}  // namespace kernels

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  require_rank(x, 2, "softmax_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (cols == 0) throw TensorError("softmax_rows: empty rows");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * cols;
    T* yr = out.ptr() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      total += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= total;
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  require_rank(x, 2, "log_softmax_rows");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (cols == 0) throw TensorError("log_softmax_rows: empty rows");
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.ptr() + r * cols;
    T* yr = out.ptr() + r * cols;
    const T mx = *std::max_element(xr, xr + cols);
    T total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(xr[c] - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) yr[c] = xr[c] - lse;
  }
  return out;
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw TensorError("matmul: inner extents disagree " + shape_str(av.shape()) +
                      " * " + shape_str(bv.shape()));
  }
  av.check_finite("matmul lhs");
  bv.check_finite("matmul rhs");
  Tensor<T> out({m, n});
  kernels::gemm_nn(m, k, n, av.ptr(), bv.ptr(), out.ptr());
  Tape<T>* tape = a.tape;
  return tape->record(std::move(out), {a, b},
                      [a, b, tape, m, k, n](std::span<const T> g) {
                        if (tape->needs_grad(a)) {
                          kernels::gemm_nt(m, n, k, g.data(), b.value().ptr(),
                                           tape->grad_of(a).data());
                        }
                        if (tape->needs_grad(b)) {
                          kernels::gemm_tn(m, k, n, a.value().ptr(), g.data(),
                                           tape->grad_of(b).data());
                        }
                      });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  require_rank(av, 2, "matmul_nt");
  require_rank(bv, 2, "matmul_nt");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  if (bv.dim(1) != k) {
    throw TensorError("matmul_nt: inner extents disagree " +
                      shape_str(av.shape()) + " * " + shape_str(bv.shape()) +
                      "^T");
  }
  av.check_finite("matmul_nt lhs");
  bv.check_finite("matmul_nt rhs");
  Tensor<T> out({m, n});
  kernels::gemm_nt(m, k, n, av.ptr(), bv.ptr(), out.ptr());
  Tape<T>* tape = a.tape;
  return tape->record(std::move(out), {a, b},
                      [a, b, tape, m, k, n](std::span<const T> g) {
                        // y = a b^T: ga = g b, gb = g^T a.
                        if (tape->needs_grad(a)) {
                          kernels::gemm_nn(m, n, k, g.data(), b.value().ptr(),
                                           tape->grad_of(a).data());
                        }
                        if (tape->needs_grad(b)) {
                          kernels::gemm_tn(m, n, k, g.data(), a.value().ptr(),
                                           tape->grad_of(b).data());
                        }
                      });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  Tape<T>* tape = a.tape;
  return tape->record(std::move(out), {a, b}, [a, b, tape](std::span<const T> g) {
    for (Var<T> v : {a, b}) {
      if (!tape->needs_grad(v)) continue;
      std::span<T> gv = tape->grad_of(v);
      for (std::size_t i = 0; i < g.size(); ++i) gv[i] += g[i];
    }
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  Tape<T>* tape = a.tape;
  return tape->record(std::move(out), {a, b}, [a, b, tape](std::span<const T> g) {
    if (tape->needs_grad(a)) {
      std::span<T> ga = tape->grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tape->needs_grad(b)) {
      std::span<T> gb = tape->grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  Tape<T>* tape = a.tape;
  return tape->record(std::move(out), {a, b}, [a, b, tape](std::span<const T> g) {
    if (tape->needs_grad(a)) {
      std::span<T> ga = tape->grad_of(a);
      const Tensor<T>& bv = b.value();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape->needs_grad(b)) {
      std::span<T> gb = tape->grad_of(b);
      const Tensor<T>& av = a.value();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  return unary(a, [factor](T x) { return x * factor; },
               [factor](T) { return factor; });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> v) {
  const Tensor<T>& av = a.value();
  require_row_vector(av, v.value(), "add_row");
  const std::size_t rows = av.dim(0), cols = av.dim(1);
  Tensor<T> out(av.shape());
  const Tensor<T>& vv = v.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = av[r * cols + c] + vv[c];
  }
  Tape<T>* tape = a.tape;
  return tape->record(std::move(out), {a, v},
                      [a, v, tape, rows, cols](std::span<const T> g) {
                        if (tape->needs_grad(a)) {
                          std::span<T> ga = tape->grad_of(a);
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                        }
                        if (tape->needs_grad(v)) {
                          std::span<T> gv = tape->grad_of(v);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < cols; ++c) gv[c] += g[r * cols + c];
                          }
                        }
                      });
}

template <typename T>
Var<T> mul_row(Var<T> a, Var<T> v) {
  const Tensor<T>& av = a.value();
  require_row_vector(av, v.value(), "mul_row");
  const std::size_t rows = av.dim(0), cols = av.dim(1);
  Tensor<T> out(av.shape());
  const Tensor<T>& vv = v.value();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = av[r * cols + c] * vv[c];
  }
  Tape<T>* tape = a.tape;
  return tape->record(std::move(out), {a, v},
                      [a, v, tape, rows, cols](std::span<const T> g) {
                        const Tensor<T>& x = a.value();
                        const Tensor<T>& w = v.value();
                        if (tape->needs_grad(a)) {
                          std::span<T> ga = tape->grad_of(a);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < cols; ++c) {
                              ga[r * cols + c] += g[r * cols + c] * w[c];
                            }
                          }
                        }
                        if (tape->needs_grad(v)) {
                          std::span<T> gv = tape->grad_of(v);
                          for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t c = 0; c < cols; ++c) {
                              gv[c] += g[r * cols + c] * x[r * cols + c];
                            }
                          }
                        }
                      });
}

template <typename T>
Var<T> exp(Var<T> a) {
  return unary(a, [](T x) { return std::exp(x); },
               [](T x) { return std::exp(x); });
}

template <typename T>
Var<T> log(Var<T> a) {
  return unary(a, [](T x) { return std::log(x); }, [](T x) { return T{1} / x; });
}

template <typename T>
Var<T> silu(Var<T> a) {
  return unary(a, [](T x) { return silu_scalar(x); },
               [](T x) {
                 const T s = sigmoid_scalar(x);
                 return s * (T{1} + x * (T{1} - s));
               });
}

template <typename T>
Var<T> softplus(Var<T> a) {
  return unary(a, [](T x) { return softplus_scalar(x); },
               [](T x) { return sigmoid_scalar(x); });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (T v : a.value().data()) total += v;
  Tape<T>* tape = a.tape;
  return tape->record(Tensor<T>({1}, std::vector<T>{total}), {a},
                      [a, tape](std::span<const T> g) {
                        std::span<T> ga = tape->grad_of(a);
                        for (T& v : ga) v += g[0];
                      });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.size();
  if (n == 0) throw TensorError("mean of an empty tensor");
  return scale(sum(a), T{1} / static_cast<T>(n));
}

template <typename T>
Var<T> softmax_rows(Var<T> x) {
  Tensor<T> out = softmax_rows(x.value());
  const std::size_t rows = out.dim(0), cols = out.dim(1);
  auto probs = std::make_shared<Tensor<T>>(out);
  Tape<T>* tape = x.tape;
  return tape->record(std::move(out), {x},
                      [x, probs, tape, rows, cols](std::span<const T> g) {
                        const Tensor<T>& p = *probs;
                        std::span<T> gx = tape->grad_of(x);
                        for (std::size_t r = 0; r < rows; ++r) {
                          T dot = 0;
                          for (std::size_t c = 0; c < cols; ++c) {
                            dot += g[r * cols + c] * p[r * cols + c];
                          }
                          for (std::size_t c = 0; c < cols; ++c) {
                            gx[r * cols + c] += p[r * cols + c] * (g[r * cols + c] - dot);
                          }
                        }
                      });
}

template <typename T>
Var<T> log_softmax_rows(Var<T> x) {
  Tensor<T> out = log_softmax_rows(x.value());
  const std::size_t rows = out.dim(0), cols = out.dim(1);
  Tape<T>* tape = x.tape;
  auto probs = std::make_shared<Tensor<T>>(out.shape());
  for (std::size_t i = 0; i < out.size(); ++i) (*probs)[i] = std::exp(out[i]);
  return tape->record(std::move(out), {x},
                      [x, probs, tape, rows, cols](std::span<const T> g) {
                        std::span<T> gx = tape->grad_of(x);
                        for (std::size_t r = 0; r < rows; ++r) {
                          T gsum = 0;
                          for (std::size_t c = 0; c < cols; ++c) gsum += g[r * cols + c];
                          for (std::size_t c = 0; c < cols; ++c) {
                            gx[r * cols + c] += g[r * cols + c] - (*probs)[r * cols + c] * gsum;
                          }
                        }
                      });
}

template <typename T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  const Tensor<T>& av = a.value();
  require_rank(av, 2, "slice_cols");
  const std::size_t rows = av.dim(0), cols = av.dim(1);
  if (begin > end || end > cols) {
    throw TensorError("slice_cols: range [" + std::to_string(begin) + ", " +
                      std::to_string(end) + ") outside " + shape_str(av.shape()));
  }
  const std::size_t width = end - begin;
  Tensor<T> out({rows, width});
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(av.ptr() + r * cols + begin, width, out.ptr() + r * width);
  }
  Tape<T>* tape = a.tape;
  return tape->record(std::move(out), {a},
                      [a, tape, rows, cols, begin, width](std::span<const T> g) {
                        std::span<T> ga = tape->grad_of(a);
                        for (std::size_t r = 0; r < rows; ++r) {
                          for (std::size_t c = 0; c < width; ++c) {
                            ga[r * cols + begin + c] += g[r * width + c];
                          }
                        }
                      });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const std::int32_t> ids) {
  const Tensor<T>& tv = table.value();
  require_rank(tv, 2, "gather_rows");
  const std::size_t vocab = tv.dim(0), cols = tv.dim(1);
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  Tensor<T> out({idx.size(), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= vocab) {
      throw TensorError("gather_rows: id " + std::to_string(idx[r]) +
                        " outside table of " + std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.ptr() + idx[r] * cols, cols, out.ptr() + r * cols);
  }
  Tape<T>* tape = table.tape;
  return tape->record(std::move(out), {table},
                      [table, tape, idx = std::move(idx), cols](std::span<const T> g) {
                        std::span<T> gt = tape->grad_of(table);
                        for (std::size_t r = 0; r < idx.size(); ++r) {
                          for (std::size_t c = 0; c < cols; ++c) {
                            gt[idx[r] * cols + c] += g[r * cols + c];
                          }
                        }
                      });
}

template <typename T>
Var<T> rms_norm_rows(Var<T> x, Var<T> w, T eps) {
  const Tensor<T>& xv = x.value();
  require_row_vector(xv, w.value(), "rms_norm_rows");
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  auto inv_rms = std::make_shared<std::vector<T>>(rows);
  Tensor<T> out(xv.shape());
  const Tensor<T>& wv = w.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = 0;
    for (std::size_t c = 0; c < cols; ++c) ss += xv[r * cols + c] * xv[r * cols + c];
    const T inv = T{1} / std::sqrt(ss / static_cast<T>(cols) + eps);
    (*inv_rms)[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      out[r * cols + c] = xv[r * cols + c] * inv * wv[c];
    }
  }
  Tape<T>* tape = x.tape;
  return tape->record(
      std::move(out), {x, w}, [x, w, tape, inv_rms, rows, cols](std::span<const T> g) {
        const Tensor<T>& xv = x.value();
        const Tensor<T>& wv = w.value();
        const bool gx_on = tape->needs_grad(x);
        const bool gw_on = tape->needs_grad(w);
        std::span<T> gx = gx_on ? tape->grad_of(x) : std::span<T>{};
        std::span<T> gw = gw_on ? tape->grad_of(w) : std::span<T>{};
        for (std::size_t r = 0; r < rows; ++r) {
          const T inv = (*inv_rms)[r];
          const T* xr = xv.ptr() + r * cols;
          const T* gr = g.data() + r * cols;
          if (gw_on) {
            for (std::size_t c = 0; c < cols; ++c) gw[c] += gr[c] * xr[c] * inv;
          }
          if (gx_on) {
            // d/dx of x*inv*w: inv*w*g - x * inv^3/cols * sum(g*w*x)
            T dot = 0;
            for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * wv[c] * xr[c];
            const T k = inv * inv * inv * dot / static_cast<T>(cols);
            for (std::size_t c = 0; c < cols; ++c) {
              gx[r * cols + c] += inv * wv[c] * gr[c] - xr[c] * k;
            }
          }
        }
      });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets) {
  const Tensor<T>& lv = logits.value();
  require_rank(lv, 2, "cross_entropy");
  const std::size_t rows = lv.dim(0), cols = lv.dim(1);
  if (targets.size() != rows) {
    throw TensorError("cross_entropy: " + std::to_string(targets.size()) +
                      " targets for " + std::to_string(rows) + " rows");
  }
  if (rows == 0) throw TensorError("cross_entropy: no positions");
  auto logp = std::make_shared<Tensor<T>>(log_softmax_rows(lv));
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] < 0 || static_cast<std::size_t>(tgt[r]) >= cols) {
      throw TensorError("cross_entropy: target " + std::to_string(tgt[r]) +
                        " outside vocabulary of " + std::to_string(cols));
    }
    total -= (*logp)[r * cols + tgt[r]];
  }
  const T inv_n = T{1} / static_cast<T>(rows);
  Tape<T>* tape = logits.tape;
  return tape->record(
      Tensor<T>({1}, std::vector<T>{total * inv_n}), {logits},
      [logits, tape, logp, tgt = std::move(tgt), rows, cols, inv_n](std::span<const T> g) {
        std::span<T> gl = tape->grad_of(logits);
        const T s = g[0] * inv_n;
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            gl[r * cols + c] += s * std::exp((*logp)[r * cols + c]);
          }
          gl[r * cols + tgt[r]] -= s;
        }
      });
}

template <typename T>
Var<T> soft_cross_entropy(Var<T> logits, const Tensor<T>& probs) {
  const Tensor<T>& lv = logits.value();
  require_rank(lv, 2, "soft_cross_entropy");
  require_same_shape(lv, probs, "soft_cross_entropy");
  const std::size_t rows = lv.dim(0), cols = lv.dim(1);
  if (rows == 0) throw TensorError("soft_cross_entropy: no positions");
  auto logp = std::make_shared<Tensor<T>>(log_softmax_rows(lv));
  auto target = std::make_shared<Tensor<T>>(probs);
  T total = 0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    if (probs[i] != T{0}) total -= probs[i] * (*logp)[i];
  }
  const T inv_n = T{1} / static_cast<T>(rows);
  Tape<T>* tape = logits.tape;
  return tape->record(
      Tensor<T>({1}, std::vector<T>{total * inv_n}), {logits},
      [logits, tape, logp, target, rows, cols, inv_n](std::span<const T> g) {
        std::span<T> gl = tape->grad_of(logits);
        const T s = g[0] * inv_n;
        for (std::size_t r = 0; r < rows; ++r) {
          T mass = 0;
          for (std::size_t c = 0; c < cols; ++c) mass += (*target)[r * cols + c];
          for (std::size_t c = 0; c < cols; ++c) {
            const std::size_t i = r * cols + c;
            gl[i] += s * (mass * std::exp((*logp)[i]) - (*target)[i]);
          }
        }
      });
}

#define BIMAMBA_INSTANTIATE_OPS(T)                                             \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                        \
  template Tensor<T> log_softmax_rows<T>(const Tensor<T>&);                    \
  template Var<T> matmul<T>(Var<T>, Var<T>);                                   \
  template Var<T> matmul_nt<T>(Var<T>, Var<T>);                                \
  template Var<T> add<T>(Var<T>, Var<T>);                                      \
  template Var<T> sub<T>(Var<T>, Var<T>);                                      \
  template Var<T> mul<T>(Var<T>, Var<T>);                                      \
  template Var<T> scale<T>(Var<T>, T);                                         \
  template Var<T> add_row<T>(Var<T>, Var<T>);                                  \
  template Var<T> mul_row<T>(Var<T>, Var<T>);                                  \
  template Var<T> exp<T>(Var<T>);                                              \
  template Var<T> log<T>(Var<T>);                                              \
  template Var<T> silu<T>(Var<T>);                                             \
  template Var<T> softplus<T>(Var<T>);                                         \
  template Var<T> sum<T>(Var<T>);                                              \
  template Var<T> mean<T>(Var<T>);                                             \
  template Var<T> softmax_rows<T>(Var<T>);                                     \
  template Var<T> log_softmax_rows<T>(Var<T>);                                 \
  template Var<T> slice_cols<T>(Var<T>, std::size_t, std::size_t);             \
  template Var<T> gather_rows<T>(Var<T>, std::span<const std::int32_t>);       \
  template Var<T> rms_norm_rows<T>(Var<T>, Var<T>, T);                         \
  template Var<T> cross_entropy<T>(Var<T>, std::span<const std::int32_t>);     \
  template Var<T> soft_cross_entropy<T>(Var<T>, const Tensor<T>&);

BIMAMBA_INSTANTIATE_OPS(float)
BIMAMBA_INSTANTIATE_OPS(double)

#undef BIMAMBA_INSTANTIATE_OPS

}  // namespace bimamba

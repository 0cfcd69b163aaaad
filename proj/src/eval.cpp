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

#include "bimamba/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <thread>

#include "bimamba/fbi_linear.hpp"
#include "bimamba/rng.hpp"

namespace bimamba {
namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ns(Clock::time_point t0) {
  return std::chrono::duration<double, std::nano>(Clock::now() - t0).count();
}

// Sum of next-token NLL over targets of one window, in double.
double window_nll(BiMambaModel<float>& model, std::span<const std::int32_t> window) {
  const std::size_t L = window.size() - 1;
  const Tensor<float> logits = model.logits(window.first(L));
  const std::size_t V = logits.dim(1);
  double nll = 0;
  for (std::size_t t = 0; t < L; ++t) {
    const float* row = logits.ptr() + t * V;
    const double mx = *std::max_element(row, row + V);
    double z = 0;
    for (std::size_t v = 0; v < V; ++v) z += std::exp(static_cast<double>(row[v]) - mx);
    nll += mx + std::log(z) - static_cast<double>(row[window[t + 1]]);
  }
  return nll;
}

}  // namespace

PerplexityResult perplexity(const BiMambaModel<float>& model,
                            std::span<const std::int32_t> corpus, std::size_t seq_len,
                            std::size_t threads) {
  if (corpus.size() < 2) {
    throw EvalError("perplexity: corpus needs at least 2 tokens, got " +
                    std::to_string(corpus.size()));
  }
  if (seq_len == 0) throw EvalError("perplexity: seq_len must be positive");
  std::vector<std::span<const std::int32_t>> windows;
  for (std::size_t s = 0; s + 1 < corpus.size(); s += seq_len) {
    const std::size_t n = std::min(seq_len + 1, corpus.size() - s);
    windows.push_back(corpus.subspan(s, n));
  }
  std::vector<double> nll(windows.size(), 0.0);
  threads = std::clamp<std::size_t>(threads, 1, windows.size());
  auto worker = [&](std::size_t w0) {
    BiMambaModel<float> local = model;
    local.set_requires_grad(false);
    for (std::size_t w = w0; w < windows.size(); w += threads) {
      nll[w] = window_nll(local, windows[w]);
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker, t);
  }
  PerplexityResult r;
  for (std::size_t w = 0; w < windows.size(); ++w) {
    r.nll += nll[w];
    r.tokens += windows[w].size() - 1;
  }
  r.ppl = std::exp(r.nll / static_cast<double>(r.tokens));
  return r;
}

Stats summarize(std::span<const double> xs) {
  Stats s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Generation

namespace {

std::string describe(const ModelConfig& c) {
  std::ostringstream os;
  os << c.name << " d_model=" << c.d_model << " n_layer=" << c.n_layer
     << " scope=" << scope_name(c.scope);
  return os.str();
}

BenchResult time_path(const InferenceModel& model, std::span<const std::int32_t> prompt,
                      std::size_t n_tokens, std::size_t runs, std::string path) {
  // One untimed warmup run.
  (void)generate(model, prompt, n_tokens, 0.0, 0);
  std::vector<double> rates;
  for (std::size_t r = 0; r < runs; ++r) {
    const auto t0 = Clock::now();
    (void)generate(model, prompt, n_tokens, 0.0, 0);
    rates.push_back(static_cast<double>(n_tokens) / (elapsed_ns(t0) * 1e-9));
  }
  const Stats s = summarize(rates);
  BenchResult b;
  b.path = std::move(path);
  b.runs = runs;
  b.tokens_per_s = s.mean;
  b.tokens_per_s_std = s.stddev;
  b.weight_bytes = model.weight_bytes();
  b.peak_bytes = b.weight_bytes + model.initial_state().bytes() +
                 model.config().vocab_size * sizeof(float);
  b.config = describe(model.config());
  return b;
}

}  // namespace

GenerationBench bench_generation(const InferenceModel& packed, const InferenceModel& dense,
                                 std::span<const std::int32_t> prompt, std::size_t n_tokens,
                                 std::size_t runs) {
  if (n_tokens == 0) throw EvalError("bench_generation: n_tokens must be at least 1");
  if (runs < 5) throw EvalError("bench_generation: at least 5 timed runs are required");
  const ModelConfig& a = packed.config();
  const ModelConfig& b = dense.config();
  if (a.d_model != b.d_model || a.n_layer != b.n_layer || a.vocab_size != b.vocab_size ||
      a.n_heads != b.n_heads || a.d_state != b.d_state || a.expand != b.expand) {
    throw EvalError("bench_generation: packed and dense models have different configs");
  }
  const auto out_packed = generate(packed, prompt, n_tokens, 0.0, 0);
  const auto out_dense = generate(dense, prompt, n_tokens, 0.0, 0);
  if (out_packed != out_dense) {
    std::size_t i = 0;
    while (out_packed[i] == out_dense[i]) ++i;
    throw EvalError("bench_generation: packed and dense greedy outputs differ at position " +
                    std::to_string(i) + "; refusing to time");
  }
  GenerationBench g;
  g.tokens = out_packed;
  g.packed = time_path(packed, prompt, n_tokens, runs, "packed");
  g.dense = time_path(dense, prompt, n_tokens, runs, "dense");
  return g;
}

GemvBench bench_gemv(std::size_t rows, std::size_t cols, std::size_t runs,
                     std::uint64_t seed) {
  if (runs < 5) throw EvalError("bench_gemv: at least 5 timed runs are required");
  Rng rng = make_rng(seed, "gemv");
  auto params = FbiLinearParams<float>::random(rows, cols, true, 0.5f, rng);
  const PackedMatrix packed = PackedMatrix::from_params(params);
  const Tensor<float> dense = effective_weight(params);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  std::vector<float> x(cols), yp(rows), yd(rows);
  for (float& v : x) v = dist(rng);
  packed.gemv(x, yp);
  dense_gemv(dense, x, yd);
  GemvBench b;
  b.rows = rows;
  b.cols = cols;
  b.runs = runs;
  for (std::size_t i = 0; i < rows; ++i) {
    b.max_abs_diff = std::max(b.max_abs_diff, static_cast<double>(std::abs(yp[i] - yd[i])));
  }
  const double tol = 1e-4 * std::sqrt(static_cast<double>(cols));
  if (!(b.max_abs_diff <= tol)) {
    throw EvalError("bench_gemv: packed and dense results differ by " +
                    std::to_string(b.max_abs_diff) + "; refusing to time");
  }
  // Repeat each kernel inside a run so a run lasts well above timer noise.
  const std::size_t inner = std::max<std::size_t>(1, (1u << 24) / std::max<std::size_t>(1, rows * cols));
  auto time_kernel = [&](auto&& kernel) {
    for (std::size_t w = 0; w < inner; ++w) kernel();
    std::vector<double> ns;
    for (std::size_t r = 0; r < runs; ++r) {
      const auto t0 = Clock::now();
      for (std::size_t w = 0; w < inner; ++w) kernel();
      ns.push_back(elapsed_ns(t0) / static_cast<double>(inner));
    }
    return summarize(ns);
  };
  b.packed_ns = time_kernel([&] { packed.gemv(x, yp); });
  b.dense_ns = time_kernel([&] { dense_gemv(dense, x, yd); });
  return b;
}

// ---------------------------------------------------------------------------
// Scaling

std::vector<ScalingPoint> scaling_curve(const InferenceModel& model,
                                        std::span<const std::size_t> lengths,
                                        std::uint64_t seed, double min_aggregate_ns) {
  if (lengths.empty()) throw EvalError("scaling_curve: no lengths");
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] == 0) throw EvalError("scaling_curve: lengths must be positive");
    if (i && lengths[i] <= lengths[i - 1]) {
      throw EvalError("scaling_curve: lengths must be strictly ascending");
    }
  }
  if (min_aggregate_ns < 1e6) {
    throw EvalError("scaling_curve: aggregate time per point must be at least 1 ms");
  }
  Rng rng = make_rng(seed, "scaling");
  const std::size_t vocab = model.config().vocab_size;
  std::vector<std::int32_t> tokens(lengths.back());
  for (auto& t : tokens) t = static_cast<std::int32_t>(rng() % vocab);
  std::vector<float> logits(vocab);

  std::vector<ScalingPoint> out;
  for (std::size_t L : lengths) {
    auto run_once = [&] {
      InferenceModel::State state = model.initial_state();
      const auto t0 = Clock::now();
      for (std::size_t t = 0; t < L; ++t) model.step(tokens[t], state, logits);
      return std::make_pair(elapsed_ns(t0), state.bytes());
    };
    (void)run_once();  // warmup
    std::vector<double> per_token;
    double aggregate = 0;
    ScalingPoint p;
    p.length = L;
    while (aggregate < min_aggregate_ns || per_token.size() < 5) {
      const auto [ns, bytes] = run_once();
      aggregate += ns;
      per_token.push_back(ns / static_cast<double>(L));
      p.state_bytes = bytes;
    }
    if (aggregate < 1e6) {
      throw EvalError("scaling_curve: timer resolution insufficient at length " +
                      std::to_string(L));
    }
    std::sort(per_token.begin(), per_token.end());
    p.ns_per_token = per_token[per_token.size() / 2];
    p.repeats = per_token.size();
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Histograms

std::uint64_t HistogramReport::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

std::string HistogramReport::to_csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "bin_lo,bin_hi,count\n";
  for (std::size_t b = 0; b < counts.size(); ++b) {
    os << edges[b] << ',' << edges[b + 1] << ',' << counts[b] << '\n';
  }
  return os.str();
}

std::vector<std::uint64_t> histogram_counts(std::span<const float> values, double lo,
                                            double hi, std::size_t bins) {
  if (bins == 0) throw EvalError("histogram: bins must be positive");
  if (!(hi > lo)) throw EvalError("histogram: empty range");
  std::vector<std::uint64_t> counts(bins, 0);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (float v : values) {
    const double x = static_cast<double>(v);
    if (!(x >= lo && x <= hi)) throw EvalError("histogram: value outside range");
    auto b = static_cast<std::size_t>((x - lo) / width);
    counts[std::min(b, bins - 1)] += 1;
  }
  return counts;
}

namespace {

const FbiLinearParams<float>& projection(const BiMambaModel<float>& model, std::size_t layer,
                                         std::string_view module) {
  if (layer >= model.layers().size()) {
    throw EvalError("histogram: layer " + std::to_string(layer) + " does not exist (model has " +
                    std::to_string(model.layers().size()) + ")");
  }
  const SsdBlockParams<float>& mx = model.layers()[layer].mixer;
  if (module == "in_proj") return mx.in_proj;
  if (module == "out_proj") return mx.out_proj;
  throw EvalError("histogram: unknown module kind '" + std::string(module) +
                  "' (valid: in_proj, out_proj)");
}

std::pair<double, double> value_range(std::span<const float> a, std::span<const float> b) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (auto span : {a, b}) {
    for (float v : span) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
  }
  if (!(hi > lo)) {
    lo -= 0.5;
    hi += 0.5;
  }
  return {lo, hi};
}

}  // namespace

std::vector<float> module_weights(const BiMambaModel<float>& model, std::size_t layer,
                                  std::string_view module) {
  const FbiLinearParams<float>& p = projection(model, layer, module);
  const Tensor<float> w = p.binarized ? effective_weight(p) : p.weight;
  return {w.data().begin(), w.data().end()};
}

HistogramReport weight_histogram(const BiMambaModel<float>& model, std::size_t layer,
                                 std::string_view module, std::size_t bins) {
  const FbiLinearParams<float>& p = projection(model, layer, module);
  const std::vector<float> values = module_weights(model, layer, module);
  const auto [lo, hi] = value_range(values, {});
  HistogramReport r;
  r.layer = layer;
  r.module = std::string(module);
  r.counts = histogram_counts(values, lo, hi, bins);
  for (std::size_t b = 0; b <= bins; ++b) {
    r.edges.push_back(lo + (hi - lo) * static_cast<double>(b) / static_cast<double>(bins));
  }
  std::vector<double> xs(values.begin(), values.end());
  const Stats s = summarize(xs);
  r.mean = s.mean;
  r.stddev = s.stddev;
  std::size_t pinned = 0;
  for (float w : p.weight.data()) pinned += std::abs(w) >= 1.0f ? 1 : 0;
  r.saturation = static_cast<double>(pinned) / static_cast<double>(p.weight.size());
  return r;
}

double symmetric_kl(std::span<const std::uint64_t> p, std::span<const std::uint64_t> q) {
  if (p.size() != q.size() || p.empty()) {
    throw EvalError("symmetric_kl: histograms must share a non-empty set of bins");
  }
  double np = 0, nq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    np += static_cast<double>(p[i]) + 1.0;
    nq += static_cast<double>(q[i]) + 1.0;
  }
  double d = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = (static_cast<double>(p[i]) + 1.0) / np;
    const double qi = (static_cast<double>(q[i]) + 1.0) / nq;
    d += (pi - qi) * std::log(pi / qi);
  }
  return d;
}

double histogram_distance(const BiMambaModel<float>& reference,
                          const BiMambaModel<float>& candidate, std::size_t bins) {
  if (reference.layers().size() != candidate.layers().size()) {
    throw EvalError("histogram_distance: models have different depths");
  }
  double total = 0;
  std::size_t compared = 0;
  for (std::size_t l = 0; l < candidate.layers().size(); ++l) {
    for (std::string_view module : {"in_proj", "out_proj"}) {
      if (!projection(candidate, l, module).binarized) continue;
      const Tensor<float>& ref = projection(reference, l, module).weight;
      const std::vector<float> cand = module_weights(candidate, l, module);
      if (ref.size() != cand.size()) {
        throw EvalError("histogram_distance: layer shapes differ");
      }
      const auto [lo, hi] = value_range(ref.data(), cand);
      total += symmetric_kl(histogram_counts(ref.data(), lo, hi, bins),
                            histogram_counts(cand, lo, hi, bins));
      ++compared;
    }
  }
  if (compared == 0) throw EvalError("histogram_distance: candidate has no binarized layers");
  return total;
}

std::string scaling_csv(std::span<const ScalingPoint> points) {
  std::ostringstream os;
  os << "length,ns_per_token\n";
  for (const ScalingPoint& p : points) os << p.length << ',' << p.ns_per_token << '\n';
  return os.str();
}

std::string bench_csv(std::span<const BenchResult> results) {
  std::ostringstream os;
  os << "path,tokens_per_s,std,peak_bytes\n";
  for (const BenchResult& r : results) {
    os << r.path << ',' << r.tokens_per_s << ',' << r.tokens_per_s_std << ',' << r.peak_bytes
       << '\n';
  }
  return os.str();
}

}  // namespace bimamba

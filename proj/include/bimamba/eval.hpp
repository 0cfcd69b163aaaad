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


// Perplexity, generation and kernel benchmarks, sequence-length scaling and
// weight histograms.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bimamba/model.hpp"

namespace bimamba {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PerplexityResult {
  std::uint64_t tokens = 0;
  double nll = 0;  // total, nats
  double ppl = 0;  // exp(nll / tokens)
};

// Next-token NLL over non-overlapping windows of `seq_len` targets; every
// window starts from a fresh state. A trailing window with fewer targets is
// included. Windows are split across `threads` workers and summed in window
// order.
PerplexityResult perplexity(const BiMambaModel<float>& model,
                            std::span<const std::int32_t> corpus,
                            std::size_t seq_len, std::size_t threads = 1);

// Mean and sample standard deviation.
struct Stats {
  double mean = 0;
  double stddev = 0;
};
Stats summarize(std::span<const double> xs);

struct BenchResult {
  std::string path;
  std::size_t runs = 0;
  double tokens_per_s = 0;
  double tokens_per_s_std = 0;
  // Weights plus recurrent state plus the logits buffer.
  std::size_t peak_bytes = 0;
  std::size_t weight_bytes = 0;
  std::string config;
};

struct GenerationBench {
  BenchResult packed;
  BenchResult dense;
  // The greedy continuation both paths produced.
  std::vector<std::int32_t> tokens;
};

// Greedy generation of `n_tokens` after `prompt` on both paths. Outputs are
// compared first; any mismatch throws EvalError and nothing is timed.
GenerationBench bench_generation(const InferenceModel& packed,
                                 const InferenceModel& dense,
                                 std::span<const std::int32_t> prompt,
                                 std::size_t n_tokens = 128, std::size_t runs = 5);

struct GemvBench {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t runs = 0;
  Stats packed_ns;
  Stats dense_ns;
  double max_abs_diff = 0;
  double speedup() const { return dense_ns.mean / packed_ns.mean; }
};

// Random binarized rows x cols layer; the packed kernel is checked against
// the dense fp32 product of the same effective weight before timing.
GemvBench bench_gemv(std::size_t rows, std::size_t cols, std::size_t runs,
                     std::uint64_t seed);

struct ScalingPoint {
  std::size_t length = 0;
  double ns_per_token = 0;
  std::size_t state_bytes = 0;
  std::size_t repeats = 0;
};

// Per-token cost of the recurrent step over sequences of each length. Each
// point repeats the sequence until at least `min_aggregate_ns` has elapsed
// and reports the median repeat.
std::vector<ScalingPoint> scaling_curve(const InferenceModel& model,
                                        std::span<const std::size_t> lengths,
                                        std::uint64_t seed,
                                        double min_aggregate_ns = 2e7);

struct HistogramReport {
  std::size_t layer = 0;
  std::string module;
  std::vector<double> edges;  // bins + 1 uniform edges
  std::vector<std::uint64_t> counts;
  double mean = 0;
  double stddev = 0;
  // Fraction of latent weights pinned at the clamp boundary |W_f| = 1.
  double saturation = 0;

  std::uint64_t total() const;
  // bin_lo,bin_hi,count
  std::string to_csv() const;
};

// Counts of `values` over `bins` uniform bins spanning [lo, hi]; the last
// bin is closed.
std::vector<std::uint64_t> histogram_counts(std::span<const float> values, double lo,
                                            double hi, std::size_t bins);

// Values a projection contributes: W~ for binarized layers, raw weights
// otherwise. `module` is "in_proj" or "out_proj".
std::vector<float> module_weights(const BiMambaModel<float>& model, std::size_t layer,
                                  std::string_view module);

HistogramReport weight_histogram(const BiMambaModel<float>& model, std::size_t layer,
                                 std::string_view module, std::size_t bins);

// KL(p||q) + KL(q||p) after adding one to every count.
double symmetric_kl(std::span<const std::uint64_t> p, std::span<const std::uint64_t> q);

// Symmetric KL between `reference` raw weights and `candidate` module
// weights over shared edges, summed over every binarized projection of the
// candidate.
double histogram_distance(const BiMambaModel<float>& reference,
                          const BiMambaModel<float>& candidate, std::size_t bins);

std::string scaling_csv(std::span<const ScalingPoint> points);
std::string bench_csv(std::span<const BenchResult> results);

}  // namespace bimamba

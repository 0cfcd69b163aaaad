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

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "bimamba/eval.hpp"
#include "bimamba/ops.hpp"
#include "bimamba/store.hpp"
#include "bimamba/trainer.hpp"

namespace bimamba {
namespace {

void zero_blocks(BiMambaModel<float>& m) {
  for (auto& layer : m.layers()) {
    for (auto* lin : {&layer.mixer.in_proj, &layer.mixer.out_proj}) {
      lin->weight.fill(0);
      lin->alpha.fill(0);
      lin->beta.fill(0);
    }
  }
}

// Zero blocks; the tied head alternates 'a' and 'b' with a logit margin far
// beyond float resolution.
BiMambaModel<float> alternating_model() {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 1);
  zero_blocks(m);
  m.embedding().fill(0);
  const std::size_t d = m.config().d_model;
  float* a = m.embedding().ptr() + 'a' * d;
  float* b = m.embedding().ptr() + 'b' * d;
  a[0] = 1, a[1] = 1;
  b[0] = 1, b[1] = -1;
  m.final_norm().fill(0);
  m.final_norm()[0] = 10;
  m.final_norm()[1] = -10;
  return m;
}

double oracle_nll(BiMambaModel<float>& m, std::span<const std::int32_t> corpus,
                  std::size_t seq_len) {
  double nll = 0;
  for (std::size_t start = 0; start + 1 < corpus.size(); start += seq_len) {
    const std::size_t n = std::min(seq_len, corpus.size() - 1 - start);
    const Tensor<float> logits = m.logits(corpus.subspan(start, n));
    const std::size_t v = logits.dim(1);
    for (std::size_t t = 0; t < n; ++t) {
      double mx = -1e300;
      for (std::size_t k = 0; k < v; ++k) mx = std::max(mx, double(logits.at(t, k)));
      double z = 0;
      for (std::size_t k = 0; k < v; ++k) z += std::exp(double(logits.at(t, k)) - mx);
      nll += mx + std::log(z) - double(logits.at(t, std::size_t(corpus[start + t + 1])));
    }
  }
  return nll;
}

TEST(PerplexityTest, UniformModelGivesVocabSize) {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 2);
  zero_blocks(m);
  m.embedding().fill(0);
  const auto corpus = tokenize(synthetic_corpus(700, 2));
  const PerplexityResult r = perplexity(m, corpus, 64);
  EXPECT_EQ(r.tokens, corpus.size() - 1);
  EXPECT_NEAR(r.ppl, 258.0, 1e-6 * 258.0);
}

TEST(PerplexityTest, ZeroEntropySource) {
  const auto m = alternating_model();
  std::string text;
  for (int i = 0; i < 300; ++i) text += "ab";
  const PerplexityResult r = perplexity(m, tokenize(text), 50);
  EXPECT_GE(r.ppl, 1.0);
  EXPECT_NEAR(r.ppl, 1.0, 1e-6);
}

TEST(PerplexityTest, MatchesIndependentSummation) {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 3);
  const auto corpus = tokenize(synthetic_corpus(1000, 3));
  const PerplexityResult r = perplexity(m, corpus, 96);
  const double ref = oracle_nll(m, corpus, 96);
  EXPECT_NEAR(r.nll / double(r.tokens), ref / double(corpus.size() - 1), 1e-6);
  EXPECT_NEAR(r.ppl, std::exp(ref / double(corpus.size() - 1)), 1e-6 * r.ppl);
}

TEST(PerplexityTest, IndependentOfWorkerCountAndWindowOrder) {
  const auto m = BiMambaModel<float>::init(model_preset("tiny"), 4);
  const auto corpus = tokenize(synthetic_corpus(1500, 4));
  const std::size_t seq = 100;
  const PerplexityResult one = perplexity(m, corpus, seq, 1);
  const PerplexityResult three = perplexity(m, corpus, seq, 3);
  EXPECT_EQ(one.nll, three.nll);
  // Each window scored alone, summed in reverse order.
  double reversed = 0;
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + 1 < corpus.size(); s += seq) starts.push_back(s);
  for (auto it = starts.rbegin(); it != starts.rend(); ++it) {
    const std::size_t end = std::min(*it + seq + 1, corpus.size());
    reversed += perplexity(m, std::span(corpus).subspan(*it, end - *it), seq).nll;
  }
  EXPECT_NEAR(reversed, one.nll, 1e-9 * one.nll);
}

TEST(PerplexityTest, Errors) {
  const auto m = BiMambaModel<float>::init(model_preset("tiny"), 5);
  const std::vector<std::int32_t> one = {1};
  EXPECT_THROW(perplexity(m, {}, 16), EvalError);
  EXPECT_THROW(perplexity(m, one, 16), EvalError);
  const std::vector<std::int32_t> two = {1, 2};
  EXPECT_THROW(perplexity(m, two, 0), EvalError);
}

TEST(HistogramTest, TwoPointSupport) {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 6);
  auto& lin = m.layers()[1].mixer.out_proj;
  lin.alpha.fill(0.25f);
  lin.beta.fill(0.0f);
  const HistogramReport h = weight_histogram(m, 1, "out_proj", 16);
  std::size_t occupied = 0;
  for (auto c : h.counts) occupied += c ? 1 : 0;
  EXPECT_EQ(occupied, 2u);
  EXPECT_GT(h.counts.front(), 0u);
  EXPECT_GT(h.counts.back(), 0u);
  EXPECT_DOUBLE_EQ(h.edges.front(), -0.25);
  EXPECT_DOUBLE_EQ(h.edges.back(), 0.25);
  EXPECT_EQ(h.total(), lin.weight.size());
}

TEST(HistogramTest, CountsCoverEveryTensor) {
  ModelConfig c = model_preset("tiny");
  c.scope = BinarizationScope::kInProj;
  const auto m = BiMambaModel<float>::init(c, 7);
  for (std::size_t l = 0; l < c.n_layer; ++l) {
    for (const char* mod : {"in_proj", "out_proj"}) {
      const HistogramReport h = weight_histogram(m, l, mod, 33);
      EXPECT_EQ(h.counts.size(), 33u);
      EXPECT_EQ(h.edges.size(), 34u);
      EXPECT_EQ(h.total(), module_weights(m, l, mod).size());
      EXPECT_NE(h.to_csv().find("bin_lo,bin_hi,count"), std::string::npos);
    }
  }
  EXPECT_THROW(weight_histogram(m, 0, "conv", 8), EvalError);
  EXPECT_THROW(weight_histogram(m, 9, "in_proj", 8), EvalError);
}

TEST(HistogramTest, PackedColumnsHaveTwoValues) {
  const auto m = BiMambaModel<float>::init(model_preset("tiny"), 8);
  const auto& lin = m.layers()[0].mixer.in_proj;
  const Tensor<float> eff = effective_weight(lin);
  for (std::size_t col = 0; col < eff.dim(1); ++col) {
    std::set<float> values;
    for (std::size_t r = 0; r < eff.dim(0); ++r) values.insert(eff.at(r, col));
    EXPECT_LE(values.size(), 2u);
  }
}

TEST(HistogramTest, CountsAndDistance) {
  const std::vector<float> xs = {0.0f, 0.5f, 1.0f, 1.0f, -1.0f};
  EXPECT_EQ(histogram_counts(xs, -1, 1, 4), (std::vector<std::uint64_t>{1, 0, 1, 3}));
  EXPECT_THROW(histogram_counts(xs, 0, 1, 4), EvalError);
  const std::vector<std::uint64_t> p = {5, 0, 3}, q = {5, 0, 3};
  EXPECT_EQ(symmetric_kl(p, q), 0.0);
  const std::vector<std::uint64_t> r = {0, 8, 0};
  EXPECT_GT(symmetric_kl(p, r), 0.0);
  EXPECT_DOUBLE_EQ(symmetric_kl(p, r), symmetric_kl(r, p));
  ModelConfig c = model_preset("tiny");
  c.scope = BinarizationScope::kNone;
  const auto fp = BiMambaModel<float>::init(c, 9);
  EXPECT_THROW(histogram_distance(fp, fp, 32), EvalError);
  const auto ptb = ptb_binarize(fp, BinarizationScope::kInOutProj);
  EXPECT_GT(histogram_distance(fp, ptb, 32), 0.0);
}

TEST(BenchTest, GenerationChecksOutputsAndMemory) {
  const auto m = BiMambaModel<float>::init(model_preset("small"), 10);
  const InferenceModel packed = InferenceModel::packed(m);
  const InferenceModel dense = InferenceModel::dense(m);
  const auto prompt = tokenize("The", true);
  EXPECT_THROW(bench_generation(packed, dense, prompt, 0), EvalError);
  EXPECT_THROW(bench_generation(packed, dense, prompt, 4, 4), EvalError);
  const GenerationBench b = bench_generation(packed, dense, prompt, 8, 5);
  EXPECT_EQ(b.tokens.size(), prompt.size() + 8);
  EXPECT_EQ(b.packed.runs, 5u);
  EXPECT_GT(b.packed.tokens_per_s, 0.0);
  EXPECT_GE(b.packed.tokens_per_s_std, 0.0);
  EXPECT_LE(double(b.packed.weight_bytes), 0.25 * double(b.dense.weight_bytes));
  EXPECT_GT(b.packed.peak_bytes, b.packed.weight_bytes);
  const std::vector<BenchResult> rows = {b.packed, b.dense};
  EXPECT_EQ(bench_csv(rows).substr(0, 31), "path,tokens_per_s,std,peak_byte");
}

TEST(BenchTest, GemvKernelsAgree) {
  const GemvBench g = bench_gemv(64, 200, 5, 11);
  EXPECT_LE(g.max_abs_diff, 1e-4 * std::sqrt(200.0));
  EXPECT_GT(g.packed_ns.mean, 0.0);
  EXPECT_GT(g.speedup(), 0.0);
  EXPECT_THROW(bench_gemv(64, 200, 4, 11), EvalError);
}

TEST(ScalingTest, StateIsConstantAndArgumentsChecked) {
  const auto m = BiMambaModel<float>::init(model_preset("tiny"), 12);
  const InferenceModel inf = InferenceModel::packed(m);
  const std::vector<std::size_t> lengths = {8, 16, 32};
  const auto pts = scaling_curve(inf, lengths, 1, 1e6);
  ASSERT_EQ(pts.size(), 3u);
  for (const auto& p : pts) {
    EXPECT_EQ(p.state_bytes, pts.front().state_bytes);
    EXPECT_GE(p.repeats, 5u);
    EXPECT_GT(p.ns_per_token, 0.0);
  }
  EXPECT_EQ(pts.front().state_bytes, inf.initial_state().bytes());
  const std::vector<std::size_t> down = {16, 8};
  EXPECT_THROW(scaling_curve(inf, down, 1, 1e6), EvalError);
  EXPECT_THROW(scaling_curve(inf, lengths, 1, 1e5), EvalError);
  EXPECT_EQ(scaling_csv(pts).substr(0, 20), "length,ns_per_token\n");
}

TEST(StatsTest, MeanAndSampleDeviation) {
  const std::vector<double> xs = {1, 2, 3, 4};
  const Stats s = summarize(xs);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.stddev, std::sqrt(5.0 / 3.0), 1e-15);
}

}  // namespace
}  // namespace bimamba

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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "bimamba/model.hpp"
#include "bimamba/ops.hpp"
#include "golden.hpp"

namespace bimamba {
namespace {

std::vector<std::int32_t> sample_ids(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng = make_rng(seed, "ids");
  std::vector<std::int32_t> ids(n);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng() % vocab);
  return ids;
}

void zero_blocks(BiMambaModel<double>& m) {
  for (auto& layer : m.layers()) {
    auto& mx = layer.mixer;
    for (auto* lin : {&mx.in_proj, &mx.out_proj}) {
      lin->weight.fill(0);
      lin->alpha.fill(0);
      lin->beta.fill(0);
    }
  }
}

TEST(ConfigTest, NamedPresets) {
  const ModelConfig a = model_preset("780M");
  EXPECT_EQ(a.d_model, 1536u);
  EXPECT_EQ(a.n_layer, 48u);
  EXPECT_EQ(a.vocab_size, 32000u);
  const ModelConfig b = model_preset("1.3B");
  EXPECT_EQ(b.d_model, 2048u);
  EXPECT_EQ(b.n_layer, 48u);
  const ModelConfig c = model_preset("2.7B");
  EXPECT_EQ(c.d_model, 2560u);
  EXPECT_EQ(c.n_layer, 64u);
  EXPECT_EQ(c.vocab_size, 32000u);
  EXPECT_EQ(model_preset("tiny").d_model, 64u);
  EXPECT_EQ(model_preset("tiny").n_layer, 2u);
  EXPECT_EQ(model_preset("small").d_model, 128u);
  EXPECT_EQ(model_preset("small").n_layer, 4u);
  EXPECT_THROW(model_preset("7B"), ConfigError);
}

TEST(ConfigTest, DimensionsAreConsistent) {
  for (const std::string& name : preset_names()) {
    const ModelConfig c = model_preset(name);
    EXPECT_EQ(c.d_inner(), c.expand * c.d_model) << name;
    EXPECT_EQ(c.n_heads * c.head_dim, c.d_inner()) << name;
    EXPECT_NO_THROW(c.validate());
  }
}

TEST(ConfigTest, MapRoundtripAndScopeNames) {
  ModelConfig c = model_preset("small");
  c.scope = BinarizationScope::kInProj;
  const ModelConfig back = ModelConfig::from_map(c.to_map());
  EXPECT_EQ(back.d_model, c.d_model);
  EXPECT_EQ(back.n_heads, c.n_heads);
  EXPECT_EQ(back.scope, BinarizationScope::kInProj);
  EXPECT_EQ(parse_scope("full"), BinarizationScope::kInOutProj);
  EXPECT_EQ(parse_scope("none"), BinarizationScope::kNone);
  EXPECT_THROW(parse_scope("half"), ConfigError);
  auto kv = c.to_map();
  kv["model.n_heads"] = "7";
  EXPECT_THROW(ModelConfig::from_map(kv), ConfigError);
}

TEST(ModelTest, EmbeddingNeverBinarized) {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 1);
  for (const auto& p : m.parameters()) {
    if (p.kind == ParamKind::kEmbedding || p.kind == ParamKind::kNorm ||
        p.kind == ParamKind::kConv || p.kind == ParamKind::kA || p.kind == ParamKind::kD ||
        p.kind == ParamKind::kDtBias) {
      EXPECT_FALSE(p.latent) << p.name;
    }
  }
}

TEST(ModelTest, HeadIsTiedToEmbedding) {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 2);
  const std::vector<std::int32_t> ids = {1, 2, 3, 4};
  Tensor<float> before = m.logits(ids);
  // Zeroing the row of a token that is not in the input zeroes its logit.
  const std::size_t d = m.config().d_model;
  std::fill(m.embedding().ptr() + 200 * d, m.embedding().ptr() + 201 * d, 0.0f);
  const Tensor<float> after = m.logits(ids);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    EXPECT_EQ(after.at(t, 200), 0.0f);
    EXPECT_EQ(after.at(t, 201), before.at(t, 201));
  }
  // Only one vocab x d_model tensor exists.
  std::size_t big = 0;
  for (const auto& p : m.parameters()) big += p.tensor->shape() == Shape{258, d} ? 1 : 0;
  EXPECT_EQ(big, 1u);
}

TEST(ModelTest, PureResidualPath) {
  auto m = BiMambaModel<double>::init(model_preset("tiny"), 3);
  zero_blocks(m);
  const std::vector<std::int32_t> ids = {65};
  const Tensor<double> logits = m.logits(ids);
  const std::size_t d = m.config().d_model;
  const double* e = m.embedding().ptr() + 65 * d;
  double ss = 0;
  for (std::size_t c = 0; c < d; ++c) ss += e[c] * e[c];
  const double inv = 1.0 / std::sqrt(ss / double(d) + kNormEps);
  for (std::size_t v = 0; v < m.config().vocab_size; ++v) {
    double ref = 0;
    for (std::size_t c = 0; c < d; ++c) ref += e[c] * inv * m.embedding().at(v, c);
    EXPECT_NEAR(logits[v], ref, 1e-12);
  }
}

TEST(ModelTest, Causality) {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 4);
  auto ids = sample_ids(12, 258, 4);
  const Tensor<float> before = m.logits(ids);
  ids[7] = (ids[7] + 1) % 258;
  const Tensor<float> after = m.logits(ids);
  for (std::size_t i = 0; i < 7 * 258; ++i) ASSERT_EQ(before[i], after[i]);
}

TEST(ModelTest, BadInputsRejected) {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 5);
  const std::vector<std::int32_t> bad = {1, 258};
  EXPECT_THROW(m.logits(bad), TensorError);
  EXPECT_THROW(m.logits({}), TensorError);
}

TEST(ModelTest, GoldenLogits) {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 1234);
  const auto ids = tokenize("Bi-Mamba golden", true, false);
  const Tensor<float> logits = m.logits(ids);
  std::vector<double> values(logits.data().begin(), logits.data().end());
  testing::expect_golden("tiny_logits_seed1234.txt", values, 1e-6);
}

// Reference forward with each projection as a plain x W_f^T product.
Tensor<double> dense_reference(BiMambaModel<double>& m, std::span<const std::int32_t> ids) {
  Tape<double> tape(TapeMode::kEval);
  const double eps = kNormEps;
  Var<double> table = tape.param(m.embedding());
  Var<double> h = gather_rows(table, ids);
  const std::size_t L = ids.size();
  for (auto& layer : m.layers()) {
    auto& p = layer.mixer;
    const BlockDims& d = p.dims;
    const std::size_t di = d.d_inner, ds = d.d_state, cd = d.conv_dim();
    Var<double> u = rms_norm_rows(h, tape.param(layer.norm), eps);
    Var<double> proj = matmul_nt(u, tape.param(p.in_proj.weight));
    Var<double> z = slice_cols(proj, 0, di);
    Var<double> xbc = silu(causal_conv(slice_cols(proj, di, di + cd),
                                       tape.param(p.core.conv_weight),
                                       tape.param(p.core.conv_bias), L));
    Var<double> delta = softplus(add_row(slice_cols(proj, di + cd, d.in_proj_dim()),
                                         tape.param(p.core.dt_bias)));
    Var<double> y = ssd_scan(slice_cols(xbc, 0, di), delta, tape.param(p.core.A_log),
                             slice_cols(xbc, di, di + ds), slice_cols(xbc, di + ds, di + 2 * ds),
                             tape.param(p.core.D), L, d.head_dim);
    y = rms_norm_rows(mul(y, silu(z)), tape.param(p.core.norm_weight), eps);
    h = add(h, matmul_nt(y, tape.param(p.out_proj.weight)));
  }
  h = rms_norm_rows(h, tape.param(m.final_norm()), eps);
  return matmul_nt(h, table).value();
}

TEST(ModelTest, ScopeNoneIsPlainDenseForward) {
  ModelConfig c = model_preset("tiny");
  c.scope = BinarizationScope::kNone;
  auto m = BiMambaModel<double>::init(c, 6);
  const auto ids = sample_ids(9, 258, 6);
  const Tensor<double> a = m.logits(ids);
  const Tensor<double> b = dense_reference(m, ids);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a[i], b[i]);
}

TEST(ModelTest, GradientsReachEveryParameter) {
  ModelConfig c = model_preset("tiny");
  c.d_model = 8;
  c.n_heads = 4;
  c.head_dim = 4;
  c.d_state = 4;
  c.vocab_size = 16;
  auto m = BiMambaModel<double>::init(c, 7);
  m.set_requires_grad(true);
  const auto ids = sample_ids(8, 16, 7);
  Tape<double> tape;
  tape.backward(cross_entropy(m.forward(tape, ids, 4), std::span<const std::int32_t>(ids)));
  for (const auto& p : m.parameters()) {
    double mag = 0;
    for (double g : p.tensor->grad()) mag += std::abs(g);
    EXPECT_GT(mag, 0.0) << p.name;
  }
}

TEST(CensusTest, NamedSizeShares) {
  struct Row {
    const char* preset;
    double emb, in, out;
  };
  for (const Row& r : {Row{"780M", 9.901, 60.936, 29.031}, Row{"1.3B", 7.664, 62.270, 29.964},
                       Row{"2.7B", 4.763, 64.115, 31.039}}) {
    const Census c = param_census(accounting_preset(r.preset));
    EXPECT_NEAR(c.row("Embedding").percent, r.emb, 3.0) << r.preset;
    EXPECT_NEAR(c.row("In Proj.").percent, r.in, 3.0) << r.preset;
    EXPECT_NEAR(c.row("Out Proj.").percent, r.out, 3.0) << r.preset;
  }
  const Census big = param_census(accounting_preset("2.7B"));
  EXPECT_NEAR(big.row("In Proj.").percent + big.row("Out Proj.").percent, 95.2, 3.0);
}

TEST(CensusTest, BucketsAndSum) {
  const Census c = param_census(model_preset("small"));
  std::vector<std::string> names;
  double total = 0;
  for (const auto& r : c.rows) {
    names.push_back(r.bucket);
    total += r.percent;
  }
  EXPECT_EQ(names, (std::vector<std::string>{"Embedding", "LN", "dt_bias", "A", "D", "Conv1d",
                                              "In Proj.", "Out Proj."}));
  EXPECT_NEAR(total, 100.0, 0.01);
}

TEST(CensusTest, TinyMatchesEnumeration) {
  const ModelConfig c = model_preset("tiny");
  auto m = BiMambaModel<float>::init(c, 8);
  std::map<std::string, std::uint64_t> counts;
  std::uint64_t total = 0;
  for (const auto& p : m.parameters()) {
    if (p.kind == ParamKind::kScale) continue;
    const char* bucket = "";
    switch (p.kind) {
      case ParamKind::kEmbedding: bucket = "Embedding"; break;
      case ParamKind::kNorm: bucket = "LN"; break;
      case ParamKind::kDtBias: bucket = "dt_bias"; break;
      case ParamKind::kA: bucket = "A"; break;
      case ParamKind::kD: bucket = "D"; break;
      case ParamKind::kConv: bucket = "Conv1d"; break;
      case ParamKind::kInProj: bucket = "In Proj."; break;
      case ParamKind::kOutProj: bucket = "Out Proj."; break;
      case ParamKind::kScale: break;
    }
    counts[bucket] += p.tensor->size();
    total += p.tensor->size();
  }
  const Census census = param_census(c);
  EXPECT_EQ(census.total, total);
  for (const auto& r : census.rows) {
    EXPECT_EQ(r.count, counts[r.bucket]) << r.bucket;
    EXPECT_NEAR(r.percent, 100.0 * double(counts[r.bucket]) / double(total), 1e-9);
  }
}

TEST(CensusTest, InvariantToScope) {
  ModelConfig c = model_preset("1.3B");
  const Census full = param_census(c);
  for (auto s : {BinarizationScope::kNone, BinarizationScope::kInProj}) {
    c.scope = s;
    const Census other = param_census(c);
    for (std::size_t i = 0; i < full.rows.size(); ++i) {
      EXPECT_EQ(other.rows[i].count, full.rows[i].count);
    }
  }
}

TEST(CensusTest, OperationCountLinearInLength) {
  const ModelConfig c = model_preset("small");
  const std::uint64_t base = block_forward_ops(c, 128);
  EXPECT_GT(base, 0u);
  for (std::size_t k : {2u, 3u, 16u}) EXPECT_EQ(block_forward_ops(c, 128 * k), k * base);
}

TEST(TokenizerTest, ByteValues) {
  EXPECT_EQ(tokenize("Ab"), (std::vector<std::int32_t>{65, 98}));
  EXPECT_EQ(tokenize("Ab", true, true), (std::vector<std::int32_t>{kBosId, 65, 98, kEosId}));
  EXPECT_TRUE(tokenize("").empty());
  EXPECT_EQ(tokenize("", true, true), (std::vector<std::int32_t>{kBosId, kEosId}));
}

TEST(TokenizerTest, RoundtripOnRandomBytes) {
  Rng rng = make_rng(9, "bytes");
  for (int i = 0; i < 1000; ++i) {
    std::string s(rng() % 64, '\0');
    for (char& ch : s) ch = static_cast<char>(rng() & 0xff);
    ASSERT_EQ(detokenize(tokenize(s, true, true)), s);
  }
}

TEST(TokenizerTest, OutOfVocabularyRejected) {
  const std::vector<std::int32_t> ids = {65, 258};
  EXPECT_THROW(detokenize(ids), TensorError);
}

TEST(GenerateTest, GreedyIsDeterministicAndKeepsPrompt) {
  const auto m = BiMambaModel<float>::init(model_preset("tiny"), 10);
  const InferenceModel inf = InferenceModel::dense(m);
  const auto prompt = tokenize("The fox", true);
  const auto a = generate(inf, prompt, 12, 0.0, 1);
  const auto b = generate(inf, prompt, 12, 0.0, 2);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), prompt.size() + 12);
  EXPECT_TRUE(std::equal(prompt.begin(), prompt.end(), a.begin()));
}

TEST(GenerateTest, GreedyMatchesReForward) {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 11);
  const InferenceModel inf = InferenceModel::dense(m);
  const auto prompt = tokenize("a", true);
  const auto out = generate(inf, prompt, 16, 0.0, 0);
  std::vector<std::int32_t> seq(prompt.begin(), prompt.end());
  for (std::size_t k = 0; k < 16; ++k) {
    const Tensor<float> logits = m.logits(seq);
    const float* last = logits.ptr() + (seq.size() - 1) * logits.dim(1);
    const auto next = static_cast<std::int32_t>(std::max_element(last, last + logits.dim(1)) - last);
    ASSERT_EQ(next, out[seq.size()]) << "step " << k;
    seq.push_back(next);
  }
}

TEST(GenerateTest, BadArgumentsRejected) {
  const auto m = BiMambaModel<float>::init(model_preset("tiny"), 12);
  const InferenceModel inf = InferenceModel::dense(m);
  const std::vector<std::int32_t> prompt = {1};
  EXPECT_THROW(generate(inf, prompt, 0, 0.0, 0), TensorError);
  const std::vector<std::int32_t> bad = {300};
  EXPECT_THROW(generate(inf, bad, 4, 0.0, 0), TensorError);
}

TEST(InferenceTest, PackedAndDenseStepsAgree) {
  const auto m = BiMambaModel<float>::init(model_preset("tiny"), 13);
  const InferenceModel dense = InferenceModel::dense(m);
  const InferenceModel packed = InferenceModel::packed(m);
  auto sd = dense.initial_state();
  auto sp = packed.initial_state();
  std::vector<float> ld(258), lp(258);
  for (std::int32_t tok : tokenize("packed path check")) {
    dense.step(tok, sd, ld);
    packed.step(tok, sp, lp);
    for (std::size_t v = 0; v < 258; ++v) ASSERT_NEAR(ld[v], lp[v], 1e-4);
  }
  EXPECT_LT(packed.weight_bytes(), dense.weight_bytes());
}

TEST(InferenceTest, StepMatchesForward) {
  auto m = BiMambaModel<float>::init(model_preset("tiny"), 14);
  const InferenceModel inf = InferenceModel::dense(m);
  const auto ids = sample_ids(20, 258, 14);
  const Tensor<float> ref = m.logits(ids);
  auto st = inf.initial_state();
  std::vector<float> logits(258);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    inf.step(ids[t], st, logits);
    for (std::size_t v = 0; v < 258; ++v) ASSERT_NEAR(logits[v], ref.at(t, v), 1e-4);
  }
}

}  // namespace
}  // namespace bimamba

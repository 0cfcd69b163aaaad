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
#include <numeric>
#include <set>
#include <sstream>

#include "bimamba/eval.hpp"
#include "bimamba/ops.hpp"
#include "bimamba/trainer.hpp"
#include "golden.hpp"

namespace bimamba {
namespace {

ModelConfig micro_config(BinarizationScope scope = BinarizationScope::kNone) {
  ModelConfig c = model_preset("tiny");
  c.name = "micro";
  c.d_model = 32;
  c.n_layer = 1;
  c.n_heads = 2;
  c.head_dim = 32;
  c.d_state = 8;
  c.scope = scope;
  return c;
}

TrainConfig quick_config(std::size_t steps, std::size_t seq_len = 16) {
  TrainConfig cfg = TrainConfig::desk(steps);
  cfg.seq_len = seq_len;
  cfg.tokens_per_batch = 4 * seq_len;
  cfg.seed = 5;
  return cfg;
}

std::vector<std::int32_t> repeated(std::string_view unit, std::size_t bytes) {
  std::string text;
  while (text.size() < bytes) text += unit;
  return tokenize(text);
}

std::vector<std::vector<std::int32_t>> windows_from(std::span<const std::int32_t> tokens,
                                                    std::size_t count, std::size_t len) {
  std::vector<std::vector<std::int32_t>> out;
  for (std::size_t i = 0; i < count; ++i) {
    out.emplace_back(tokens.begin() + i * len, tokens.begin() + i * len + len + 1);
  }
  return out;
}

TEST(DistillLossTest, UniformTeacherAndStudent) {
  const Tensor<double> zeros({3, 4});
  EXPECT_NEAR(distill_loss_value(zeros, zeros), std::log(4.0), 1e-12);
  EXPECT_NEAR(distill_loss_value(zeros, zeros), 1.386294, 1e-6);
}

TEST(DistillLossTest, OneHotTeacherUniformStudent) {
  Tensor<double> teacher({1, 4}, -1e4);
  teacher[2] = 0;
  EXPECT_NEAR(distill_loss_value(teacher, Tensor<double>({1, 4})), 1.386294, 1e-6);
  EXPECT_NEAR(distill_loss_value(teacher, teacher), 0.0, 1e-12);
}

TEST(DistillLossTest, HandExample) {
  const Tensor<double> teacher({1, 2}, {std::log(0.7), std::log(0.3)});
  const Tensor<double> student({1, 2}, {std::log(0.6), std::log(0.4)});
  EXPECT_NEAR(distill_loss_value(teacher, student),
              -(0.7 * std::log(0.6) + 0.3 * std::log(0.4)), 1e-12);
  EXPECT_NEAR(distill_loss_value(teacher, student), 0.632465, 1e-6);
  EXPECT_THROW(distill_loss_value(teacher, Tensor<double>({1, 3})), TensorError);
  EXPECT_THROW(distill_loss_value(Tensor<double>({0, 2}), Tensor<double>({0, 2})), TensorError);
}

TEST(DistillLossTest, TwoClassExample) {
  // Teacher softmax(0, 1), student softmax(0, 0): cross-entropy log 2.
  const Tensor<double> teacher({1, 2}, {0.0, 1.0});
  const Tensor<double> student({1, 2}, {0.0, 0.0});
  EXPECT_NEAR(distill_loss_value(teacher, student), std::log(2.0), 1e-12);
  // Student softmax(0, 1) against itself: the entropy of (0.2689, 0.7311).
  const double p = 1.0 / (1.0 + std::exp(1.0));
  const double entropy = -(p * std::log(p) + (1 - p) * std::log(1 - p));
  EXPECT_NEAR(distill_loss_value(teacher, teacher), entropy, 1e-12);
  EXPECT_NEAR(entropy, 0.582203, 1e-6);
}

TEST(DistillLossTest, MinimisedAtTeacher) {
  Rng rng = make_rng(1, "gibbs");
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> t({2, 7}), s({2, 7});
    for (auto& v : t.data()) v = n(rng);
    for (auto& v : s.data()) v = n(rng);
    EXPECT_GE(distill_loss_value(t, s), distill_loss_value(t, t) - 1e-12);
  }
}

TEST(DistillLossTest, TapeMatchesPlainValueAndGradient) {
  Rng rng = make_rng(2, "tape");
  std::normal_distribution<double> n;
  Tensor<double> t({3, 5}), s({3, 5});
  for (auto& v : t.data()) v = n(rng);
  for (auto& v : s.data()) v = n(rng);
  s.set_requires_grad(true);
  Tape<double> tape;
  Var<double> loss = distill_loss(t, tape.param(s));
  EXPECT_NEAR(loss.value()[0], distill_loss_value(t, s), 1e-12);
  tape.backward(loss);
  // d/ds = (softmax(s) - softmax(t)) / rows.
  const Tensor<double> ps = softmax_rows(s), pt = softmax_rows(t);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_NEAR(s.grad()[i], (ps[i] - pt[i]) / 3.0, 1e-12);
  }
}

TEST(ScheduleTest, Endpoints) {
  const TrainConfig cfg;
  EXPECT_NEAR(lr_at(cfg.warmup_steps, cfg), cfg.peak_lr, 1e-15);
  EXPECT_NEAR(lr_at(cfg.total_steps, cfg), cfg.final_lr, 1e-15);
  EXPECT_NEAR(lr_at(cfg.warmup_steps / 2, cfg), cfg.peak_lr / 2, 1e-15);
  const std::size_t mid = (cfg.warmup_steps + cfg.total_steps) / 2;
  EXPECT_NEAR(lr_at(mid, cfg), (cfg.peak_lr + cfg.final_lr) / 2, 1e-12);
  EXPECT_EQ(lr_at(0, cfg), 0.0);
  EXPECT_THROW(lr_at(cfg.total_steps + 1, cfg), ConfigError);
}

TEST(ScheduleTest, MonotoneAfterWarmup) {
  const TrainConfig cfg = TrainConfig::desk(1000);
  double prev = lr_at(cfg.warmup_steps, cfg);
  for (std::size_t s = cfg.warmup_steps + 1; s <= cfg.total_steps; ++s) {
    const double lr = lr_at(s, cfg);
    ASSERT_LE(lr, prev + 1e-18);
    ASSERT_GE(lr, cfg.final_lr - 1e-18);
    prev = lr;
  }
}

TEST(TrainConfigTest, DefaultsAndDesk) {
  const TrainConfig d;
  EXPECT_EQ(d.peak_lr, 2.5e-4);
  EXPECT_EQ(d.final_lr, 2.5e-5);
  EXPECT_EQ(d.warmup_steps, 2000u);
  EXPECT_EQ(d.adam_beta2, 0.95);
  EXPECT_EQ(d.grad_clip_norm, 1.0);
  EXPECT_EQ(d.seq_len, 2048u);
  EXPECT_EQ(d.sequences_per_batch(), 256u);
  const TrainConfig desk = TrainConfig::desk(500);
  EXPECT_EQ(desk.warmup_steps, 50u);
  EXPECT_NEAR(desk.peak_lr / desk.final_lr, 10.0, 1e-12);
  EXPECT_NO_THROW(desk.validate());
}

TEST(TrainConfigTest, MapOverrides) {
  std::map<std::string, std::string> kv = {{"train.peak_lr", "1e-3"}, {"train.seed", "9"}};
  TrainConfig c = TrainConfig::from_map(kv, TrainConfig{});
  EXPECT_EQ(c.peak_lr, 1e-3);
  EXPECT_NEAR(c.final_lr, 1e-4, 1e-18);
  EXPECT_EQ(c.seed, 9u);
  kv["train.final_lr"] = "5e-4";
  EXPECT_EQ(TrainConfig::from_map(kv, TrainConfig{}).final_lr, 5e-4);
  TrainConfig bad;
  bad.tokens_per_batch = 1000;
  bad.seq_len = 3000;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(CorpusTest, WindowShapeAndDeterminism) {
  std::vector<std::int32_t> tokens(1000);
  std::iota(tokens.begin(), tokens.end(), 0);
  CorpusStream a(tokens, 32, 7), b(tokens, 32, 7), c(tokens, 32, 8);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto wa = a.next_window();
    ASSERT_EQ(wa.size(), 33u);
    for (std::size_t k = 1; k < wa.size(); ++k) ASSERT_EQ(wa[k], wa[k - 1] + 1);
    EXPECT_EQ(wa, b.next_window());
    differs = differs || wa != c.next_window();
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(a.tokens_seen(), 100u * 32u);
  EXPECT_GE(a.epoch(), 1u);
}

TEST(CorpusTest, EpochVisitsEveryWindowOnce) {
  std::vector<std::int32_t> tokens(16 * 10 + 1);
  std::iota(tokens.begin(), tokens.end(), 0);
  CorpusStream s(tokens, 16, 1);
  std::set<std::int32_t> starts;
  for (std::size_t i = 0; i < s.windows_per_epoch(); ++i) starts.insert(s.next_window()[0]);
  EXPECT_EQ(starts.size(), s.windows_per_epoch());
  EXPECT_THROW(CorpusStream(std::vector<std::int32_t>(10), 16, 1), TrainingError);
}

TEST(CorpusTest, SyntheticTextIsDeterministicAndSplits) {
  const std::string a = synthetic_corpus(5000, 3);
  EXPECT_EQ(a.size(), 5000u);
  EXPECT_EQ(a, synthetic_corpus(5000, 3));
  EXPECT_NE(a, synthetic_corpus(5000, 4));
  const auto tokens = tokenize(a);
  const CorpusSplit split = split_corpus(tokens, 0.1);
  EXPECT_EQ(split.train.size() + split.heldout.size(), tokens.size());
  EXPECT_EQ(split.heldout.size(), 500u);
  EXPECT_EQ(split.heldout.front(), tokens[4500]);
  EXPECT_THROW(read_text_file("/nonexistent/corpus.txt"), TrainingError);
}

TEST(TrainStepTest, ZeroLearningRateLeavesParametersUnchanged) {
  auto model = BiMambaModel<float>::init(micro_config(BinarizationScope::kInOutProj), 1);
  const auto before = model;
  const auto tokens = tokenize(synthetic_corpus(2000, 1));
  TrainConfig cfg = quick_config(10);
  cfg.peak_lr = 0;
  cfg.final_lr = 0;
  Adam<float> opt(cfg);
  const auto windows = windows_from(tokens, 4, cfg.seq_len);
  const StepResult r = train_step<float>(model, nullptr, windows, opt, cfg, 1);
  EXPECT_EQ(r.lr, 0.0);
  EXPECT_GT(r.grad_norm_raw, 0.0);
  const auto pa = model.parameters();
  const auto pb = before.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t k = 0; k < pa[i].tensor->size(); ++k) {
      ASSERT_EQ((*pa[i].tensor)[k], (*pb[i].tensor)[k]) << pa[i].name;
    }
  }
}

TEST(TrainStepTest, ClippedNormNeverAboveThreshold) {
  auto model = BiMambaModel<float>::init(micro_config(BinarizationScope::kInOutProj), 2);
  const auto tokens = tokenize(synthetic_corpus(4000, 2));
  TrainConfig cfg = quick_config(20);
  cfg.grad_clip_norm = 0.05;
  Adam<float> opt(cfg);
  for (std::size_t step = 1; step <= 5; ++step) {
    const auto windows = windows_from(tokens, 4, cfg.seq_len);
    const StepResult r = train_step<float>(model, nullptr, windows, opt, cfg, step);
    EXPECT_LE(r.grad_norm, cfg.grad_clip_norm + 1e-6);
    EXPECT_NEAR(r.grad_norm, std::min(r.grad_norm_raw, cfg.grad_clip_norm), 1e-6);
  }
}

TEST(TrainStepTest, LatentWeightsStayClamped) {
  auto model = BiMambaModel<float>::init(micro_config(BinarizationScope::kInOutProj), 3);
  const auto tokens = tokenize(synthetic_corpus(4000, 3));
  TrainConfig cfg = quick_config(20);
  cfg.peak_lr = 0.5;
  cfg.final_lr = 0.05;
  Adam<float> opt(cfg);
  for (std::size_t step = 1; step <= 5; ++step) {
    train_step<float>(model, nullptr, windows_from(tokens, 4, cfg.seq_len), opt, cfg, step);
  }
  for (const auto& p : model.parameters()) {
    if (!p.latent) continue;
    for (float v : p.tensor->data()) ASSERT_LE(std::abs(v), 1.0f) << p.name;
  }
}

TEST(TrainStepTest, MicroBatchesMatchFullBatch) {
  const auto tokens = tokenize(synthetic_corpus(4000, 4));
  TrainConfig full = quick_config(10);
  TrainConfig micro = full;
  micro.micro_batch_tokens = full.seq_len;
  auto a = BiMambaModel<double>::init(micro_config(BinarizationScope::kInOutProj), 4);
  auto b = a;
  Adam<double> oa(full), ob(micro);
  const auto windows = windows_from(tokens, 4, full.seq_len);
  const StepResult ra = train_step<double>(a, nullptr, windows, oa, full, 3);
  const StepResult rb = train_step<double>(b, nullptr, windows, ob, micro, 3);
  EXPECT_NEAR(ra.loss, rb.loss, 1e-12);
  EXPECT_NEAR(ra.grad_norm_raw, rb.grad_norm_raw, 1e-10);
  const auto pa = a.parameters();
  const auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t k = 0; k < pa[i].tensor->size(); ++k) {
      ASSERT_NEAR((*pa[i].tensor)[k], (*pb[i].tensor)[k], 1e-10) << pa[i].name;
    }
  }
}

TEST(TrainStepTest, NonFiniteLossNamesStep) {
  auto model = BiMambaModel<float>::init(micro_config(), 5);
  model.embedding()[0] = std::numeric_limits<float>::quiet_NaN();
  const std::vector<std::int32_t> tokens(200, 0);
  TrainConfig cfg = quick_config(10);
  Adam<float> opt(cfg);
  try {
    train_step<float>(model, nullptr, windows_from(tokens, 4, cfg.seq_len), opt, cfg, 7);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("step 7"), std::string::npos) << e.what();
    EXPECT_NE(std::string(e.what()).find("embedding"), std::string::npos) << e.what();
  }
}

TEST(TrainStepTest, GoldenFirstStep) {
  auto model = BiMambaModel<float>::init(micro_config(BinarizationScope::kInOutProj), 6);
  const auto tokens = tokenize(synthetic_corpus(2000, 6));
  const TrainConfig cfg = quick_config(10);
  Adam<float> opt(cfg);
  const StepResult r =
      train_step<float>(model, nullptr, windows_from(tokens, 4, cfg.seq_len), opt, cfg, 1);
  testing::expect_golden("micro_first_step.txt", {r.loss, r.grad_norm_raw}, 1e-5);
}

TEST(TeacherTest, LearnsPeriodicText) {
  const auto tokens = repeated("abc", 3000);
  TrainConfig cfg = quick_config(150);
  cfg.peak_lr = 1e-2;
  cfg.final_lr = 1e-3;
  std::ostringstream log;
  std::vector<double> losses;
  const auto model = train_teacher(micro_config(), tokens, cfg, {&log, 0, {}, &losses});
  ASSERT_EQ(losses.size(), 150u);
  EXPECT_LT(losses.back(), losses.front());
  EXPECT_EQ(log.str().substr(0, log.str().find('\n')), "step\tlr\tloss\tgrad_norm\ttokens_seen");
  const auto test = repeated("abc", 600);
  EXPECT_LE(perplexity(model, test, 64).ppl, 1.3);
}

TEST(TeacherTest, RejectsBinarizedConfig) {
  const auto tokens = repeated("abc", 1000);
  EXPECT_THROW(train_teacher(micro_config(BinarizationScope::kInProj), tokens, quick_config(2)),
               ConfigError);
}

TEST(DistillTest, TeacherUnchangedAndRunDeterministic) {
  const auto tokens = tokenize(synthetic_corpus(6000, 7));
  const TrainConfig cfg = quick_config(6);
  const auto teacher = train_teacher(micro_config(), tokens, cfg);
  const auto snapshot = teacher;
  std::size_t checkpoints = 0;
  TrainHooks hooks;
  hooks.checkpoint_every = 3;
  hooks.on_checkpoint = [&](std::size_t, const BiMambaModel<float>&) { ++checkpoints; };
  const auto s1 = distill(micro_config(BinarizationScope::kInOutProj), &teacher, tokens, cfg, hooks);
  const auto s2 = distill(micro_config(BinarizationScope::kInOutProj), &teacher, tokens, cfg);
  EXPECT_EQ(checkpoints, 2u);
  const auto pt = teacher.parameters();
  const auto ps = snapshot.parameters();
  for (std::size_t i = 0; i < pt.size(); ++i) {
    for (std::size_t k = 0; k < pt[i].tensor->size(); ++k) {
      ASSERT_EQ((*pt[i].tensor)[k], (*ps[i].tensor)[k]) << pt[i].name;
    }
  }
  const auto p1 = s1.parameters();
  const auto p2 = s2.parameters();
  for (std::size_t i = 0; i < p1.size(); ++i) {
    for (std::size_t k = 0; k < p1[i].tensor->size(); ++k) {
      ASSERT_EQ((*p1[i].tensor)[k], (*p2[i].tensor)[k]) << p1[i].name;
    }
  }
}

TEST(DistillTest, VocabularyMismatchRejected) {
  const auto tokens = repeated("abcd", 2000);
  const TrainConfig cfg = quick_config(2);
  const auto teacher = train_teacher(micro_config(), tokens, cfg);
  ModelConfig other = micro_config(BinarizationScope::kInOutProj);
  other.vocab_size = 300;
  EXPECT_THROW(distill(other, &teacher, tokens, cfg), TrainingError);
}

TEST(DistillTest, DivergenceIsReported) {
  const auto tokens = tokenize(synthetic_corpus(6000, 8));
  TrainConfig cfg = quick_config(700);
  cfg.warmup_steps = 1;
  cfg.peak_lr = 5.0;
  cfg.final_lr = 5.0;
  EXPECT_THROW(train_teacher(micro_config(), tokens, cfg), TrainingError);
}

}  // namespace
}  // namespace bimamba

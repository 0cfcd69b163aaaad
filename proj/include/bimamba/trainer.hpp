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


// Training loop pieces: schedule, corpus windows, Adam, distillation loss,
// and the teacher / student drivers built on them.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "bimamba/model.hpp"
#include "bimamba/rng.hpp"
#include "bimamba/tensor.hpp"

namespace bimamba {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  double peak_lr = 2.5e-4;
  double final_lr = 2.5e-5;
  std::size_t warmup_steps = 2000;
  std::size_t total_steps = 210000;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip_norm = 1.0;
  std::size_t tokens_per_batch = 524288;
  std::size_t seq_len = 2048;
  // Tokens per forward/backward pass; batches larger than this accumulate.
  // Zero means the whole batch in one pass.
  std::size_t micro_batch_tokens = 0;
  std::uint64_t seed = 0;

  // Small-machine schedule: `steps` total, a tenth of them warmup, the same
  // peak/final ratio of 10.
  static TrainConfig desk(std::size_t steps, double peak_lr = 3e-3);

  std::size_t sequences_per_batch() const;
  std::size_t sequences_per_micro_batch() const;
  void validate() const;
  std::map<std::string, std::string> to_map() const;
  // Applies `train.*` keys over `base`; train.peak_lr also moves final_lr
  // so that the ratio of 10 is kept.
  static TrainConfig from_map(const std::map<std::string, std::string>& kv,
                              TrainConfig base);
};

// Linear warmup from 0 to peak, then cosine from peak to final at
// total_steps.
double lr_at(std::size_t step, const TrainConfig& cfg);

// Fixed-length training windows over a token sequence. Window starts are a
// stride-seq_len grid, visited in a seeded random order that is reshuffled
// each epoch.
class CorpusStream {
 public:
  CorpusStream(std::vector<std::int32_t> tokens, std::size_t seq_len,
               std::uint64_t seed);

  // seq_len + 1 tokens: inputs followed by their next-token targets.
  std::vector<std::int32_t> next_window();
  std::size_t seq_len() const { return seq_len_; }
  std::size_t windows_per_epoch() const { return starts_.size(); }
  std::size_t epoch() const { return epoch_; }
  std::uint64_t tokens_seen() const { return tokens_seen_; }

 private:
  void reshuffle();

  std::vector<std::int32_t> tokens_;
  std::size_t seq_len_;
  std::uint64_t seed_;
  std::vector<std::size_t> starts_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::uint64_t tokens_seen_ = 0;
};

// Deterministic English-like text: sentences drawn from a fixed lexicon by a
// small seeded grammar. Stand-in for a downloaded corpus.
std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed);
// Whole file as bytes; throws TrainingError when unreadable or empty.
std::string read_text_file(const std::string& path);

struct CorpusSplit {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> heldout;
};
// The last `heldout_fraction` of the tokens is held out.
CorpusSplit split_corpus(std::span<const std::int32_t> tokens,
                         double heldout_fraction);

// Mean over positions of -sum_v p_teacher[v] * log p_student[v], with both
// distributions the softmax of the given logits. No gradient reaches the
// teacher.
template <typename T>
Var<T> distill_loss(const Tensor<T>& teacher_logits, Var<T> student_logits);
// Plain evaluation, for checks without a tape.
double distill_loss_value(const Tensor<double>& teacher_logits,
                          const Tensor<double>& student_logits);

template <typename T>
class Adam {
 public:
  Adam(double beta1, double beta2, double eps)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}
  explicit Adam(const TrainConfig& cfg)
      : Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) {}

  // One update of every parameter that has a gradient. Moments are keyed by
  // parameter name.
  void step(std::span<const NamedParam<T>> params, double lr);
  std::size_t steps_taken() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  double beta1_;
  double beta2_;
  double eps_;
  std::size_t t_ = 0;
  std::unordered_map<std::string, Moments> moments_;
};

struct StepResult {
  double loss = 0;
  double lr = 0;
  double grad_norm_raw = 0;
  // Global gradient norm after clipping; never above the clip threshold.
  double grad_norm = 0;
};

// One optimizer step on a batch of windows (each seq_len + 1 tokens). With a
// teacher the loss is distill_loss against its logits; without, next-token
// cross-entropy. Gradients of micro-batches are averaged. The teacher is only
// read. `step` indexes the schedule, 1..total_steps.
template <typename T>
StepResult train_step(BiMambaModel<T>& model, BiMambaModel<T>* teacher,
                      std::span<const std::vector<std::int32_t>> windows,
                      Adam<T>& opt, const TrainConfig& cfg, std::size_t step);

struct TrainHooks {
  // Receives the tab-separated per-step log, header included.
  std::ostream* log = nullptr;
  std::size_t checkpoint_every = 0;
  std::function<void(std::size_t step, const BiMambaModel<float>&)> on_checkpoint;
  // When set, receives every step's loss in order.
  std::vector<double>* losses = nullptr;
};

// Full-precision next-token training. Throws TrainingError when the loss
// stays above its first value for 500 consecutive steps.
BiMambaModel<float> train_teacher(const ModelConfig& config,
                                  std::span<const std::int32_t> corpus,
                                  const TrainConfig& cfg,
                                  const TrainHooks& hooks = {});

// Binarization-aware training of a fresh student against `teacher`. A null
// teacher gives the plain next-token ablation.
BiMambaModel<float> distill(const ModelConfig& student_config,
                            const BiMambaModel<float>* teacher,
                            std::span<const std::int32_t> corpus,
                            const TrainConfig& cfg, const TrainHooks& hooks = {});

}  // namespace bimamba

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

#include "bimamba/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

#include "bimamba/ops.hpp"

namespace bimamba {
namespace {

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected a number, got '" + value + "'");
  }
}

std::size_t parse_count(const std::string& key, const std::string& value) {
  const double v = parse_double(key, value);
  if (v < 0 || v != std::floor(v)) {
    throw ConfigError("config key " + key + ": expected a non-negative integer, got '" +
                      value + "'");
  }
  return static_cast<std::size_t>(v);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// TrainConfig and schedule

TrainConfig TrainConfig::desk(std::size_t steps, double peak_lr) {
  TrainConfig c;
  c.peak_lr = peak_lr;
  c.final_lr = peak_lr / 10.0;
  c.total_steps = steps;
  c.warmup_steps = std::max<std::size_t>(1, steps / 10);
  c.seq_len = 64;
  c.tokens_per_batch = 16 * 64;
  c.micro_batch_tokens = 0;
  return c;
}

std::size_t TrainConfig::sequences_per_batch() const {
  return std::max<std::size_t>(1, tokens_per_batch / seq_len);
}

std::size_t TrainConfig::sequences_per_micro_batch() const {
  if (micro_batch_tokens == 0) return sequences_per_batch();
  return std::clamp<std::size_t>(micro_batch_tokens / seq_len, 1, sequences_per_batch());
}

void TrainConfig::validate() const {
  if (!(peak_lr >= 0) || !(final_lr >= 0) || !std::isfinite(peak_lr) ||
      !std::isfinite(final_lr)) {
    throw ConfigError("train config: learning rates must be finite and non-negative");
  }
  if (total_steps == 0) throw ConfigError("train config: steps must be positive");
  if (warmup_steps > total_steps) {
    throw ConfigError("train config: warmup " + std::to_string(warmup_steps) +
                      " exceeds total steps " + std::to_string(total_steps));
  }
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw ConfigError("train config: Adam betas must lie in [0, 1)");
  }
  if (!(grad_clip_norm > 0)) throw ConfigError("train config: clip must be positive");
  if (seq_len == 0) throw ConfigError("train config: seq_len must be positive");
  if (tokens_per_batch < seq_len) {
    throw ConfigError("train config: batch_tokens " + std::to_string(tokens_per_batch) +
                      " is smaller than seq_len " + std::to_string(seq_len));
  }
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  return {
      {"train.peak_lr", fmt(peak_lr)},
      {"train.final_lr", fmt(final_lr)},
      {"train.warmup", std::to_string(warmup_steps)},
      {"train.steps", std::to_string(total_steps)},
      {"train.batch_tokens", std::to_string(tokens_per_batch)},
      {"train.micro_batch_tokens", std::to_string(micro_batch_tokens)},
      {"train.seq_len", std::to_string(seq_len)},
      {"train.clip", fmt(grad_clip_norm)},
      {"train.beta1", fmt(adam_beta1)},
      {"train.beta2", fmt(adam_beta2)},
      {"train.seed", std::to_string(seed)},
  };
}

TrainConfig TrainConfig::from_map(const std::map<std::string, std::string>& kv,
                                  TrainConfig c) {
  for (const auto& [key, value] : kv) {
    if (key == "train.peak_lr") {
      c.peak_lr = parse_double(key, value);
      c.final_lr = c.peak_lr / 10.0;
    } else if (key == "train.warmup") {
      c.warmup_steps = parse_count(key, value);
    } else if (key == "train.steps") {
      c.total_steps = parse_count(key, value);
    } else if (key == "train.batch_tokens") {
      c.tokens_per_batch = parse_count(key, value);
    } else if (key == "train.micro_batch_tokens") {
      c.micro_batch_tokens = parse_count(key, value);
    } else if (key == "train.seq_len") {
      c.seq_len = parse_count(key, value);
    } else if (key == "train.clip") {
      c.grad_clip_norm = parse_double(key, value);
    } else if (key == "train.beta1") {
      c.adam_beta1 = parse_double(key, value);
    } else if (key == "train.beta2") {
      c.adam_beta2 = parse_double(key, value);
    } else if (key == "train.seed") {
      c.seed = parse_count(key, value);
    }
  }
  // final_lr is derived; an explicit value wins.
  if (auto it = kv.find("train.final_lr"); it != kv.end()) {
    c.final_lr = parse_double(it->first, it->second);
  }
  c.validate();
  return c;
}

double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) {
    throw ConfigError("lr_at: step " + std::to_string(step) + " beyond total " +
                      std::to_string(cfg.total_steps));
  }
  if (step < cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const std::size_t span = cfg.total_steps - cfg.warmup_steps;
  if (span == 0) return cfg.peak_lr;
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  return cfg.final_lr +
         0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// Corpus

CorpusStream::CorpusStream(std::vector<std::int32_t> tokens, std::size_t seq_len,
                           std::uint64_t seed)
    : tokens_(std::move(tokens)), seq_len_(seq_len), seed_(seed) {
  if (seq_len_ == 0) throw TrainingError("corpus stream: seq_len must be positive");
  if (tokens_.size() < seq_len_ + 1) {
    throw TrainingError("corpus stream: " + std::to_string(tokens_.size()) +
                        " tokens cannot fill one window of " +
                        std::to_string(seq_len_ + 1));
  }
  for (std::size_t s = 0; s + seq_len_ + 1 <= tokens_.size(); s += seq_len_) {
    starts_.push_back(s);
  }
  reshuffle();
}

void CorpusStream::reshuffle() {
  Rng rng = make_rng(seed_, "epoch" + std::to_string(epoch_));
  std::sort(starts_.begin(), starts_.end());
  std::shuffle(starts_.begin(), starts_.end(), rng);
  cursor_ = 0;
}

std::vector<std::int32_t> CorpusStream::next_window() {
  if (cursor_ == starts_.size()) {
    ++epoch_;
    reshuffle();
  }
  const std::size_t s = starts_[cursor_++];
  tokens_seen_ += seq_len_;
  return {tokens_.begin() + static_cast<std::ptrdiff_t>(s),
          tokens_.begin() + static_cast<std::ptrdiff_t>(s + seq_len_ + 1)};
}

namespace {

constexpr std::array<const char*, 40> kSingularNouns = {
    "river", "farmer", "king", "ship", "garden", "child", "horse", "city",
    "winter", "mountain", "teacher", "soldier", "lamp", "letter", "forest", "bird",
    "captain", "window", "merchant", "road", "bridge", "doctor", "village", "storm",
    "sister", "queen", "wolf", "house", "stranger", "priest", "sailor", "baker",
    "tower", "field", "machine", "painter", "fox", "clock", "judge", "island"};
constexpr std::array<const char*, 28> kAdjectives = {
    "old", "quiet", "bright", "cold", "small", "ancient", "gentle", "dark",
    "green", "proud", "strange", "heavy", "broken", "golden", "young", "wild",
    "silent", "narrow", "patient", "hungry", "tall", "red", "distant", "careful",
    "weary", "clever", "empty", "little"};
// Present tense, third person singular; the plural drops the final "s".
constexpr std::array<const char*, 24> kVerbs = {
    "watches", "follows", "remembers", "carries", "finds", "leaves", "builds",
    "crosses", "guards", "answers", "visits", "paints", "hears", "loves",
    "fears", "calls", "meets", "helps", "reaches", "keeps", "opens", "mends",
    "sees", "holds"};
constexpr std::array<const char*, 14> kPrepositions = {
    "near", "beyond", "under", "beside", "behind", "across", "toward",
    "above", "inside", "along", "through", "around", "past", "within"};
constexpr std::array<const char*, 12> kAdverbs = {
    "slowly", "often", "again", "always", "never", "softly", "early", "late",
    "together", "alone", "today", "still"};
constexpr std::array<const char*, 6> kConnectives = {
    "and", "but", "while", "because", "so", "yet"};

class TextGen {
 public:
  explicit TextGen(std::uint64_t seed) : rng_(make_rng(seed, "synthetic")) {}

  std::size_t uniform(std::size_t n) { return static_cast<std::size_t>(rng_() % n); }
  double unit() { return static_cast<double>(rng_() >> 11) * 0x1.0p-53; }
  // Zipf-like: low indices dominate.
  std::size_t zipf(std::size_t n) {
    const double u = unit();
    return std::min(n - 1, static_cast<std::size_t>(std::pow(u, 2.2) * static_cast<double>(n)));
  }

  std::string noun(bool plural) {
    // Nouns cluster around the paragraph topic.
    const std::size_t idx = unit() < 0.6 ? (topic_ + zipf(8)) % kSingularNouns.size()
                                         : zipf(kSingularNouns.size());
    std::string w = kSingularNouns[idx];
    if (!plural) return w;
    if (w == "child") return "children";
    if (w == "wolf") return "wolves";
    if (w == "fox") return "foxes";
    if (w == "city") return "cities";
    return w + "s";
  }

  std::string noun_phrase(bool plural) {
    std::string np = plural ? (unit() < 0.5 ? "the " : "some ") : (unit() < 0.7 ? "the " : "a ");
    if (unit() < 0.45) np += std::string(kAdjectives[zipf(kAdjectives.size())]) + " ";
    np += noun(plural);
    if (np.rfind("a ", 0) == 0 && std::string("aeiou").find(np[2]) != std::string::npos) {
      np.insert(1, "n");
    }
    return np;
  }

  std::string verb(bool plural) {
    std::string v = kVerbs[zipf(kVerbs.size())];
    if (!plural) return v;
    if (v.size() > 3 && v.compare(v.size() - 3, 3, "hes") == 0) return v.substr(0, v.size() - 2);
    if (v.size() > 3 && v.compare(v.size() - 3, 3, "ses") == 0) return v.substr(0, v.size() - 2);
    if (v.size() > 3 && v.compare(v.size() - 3, 3, "ies") == 0) {
      return v.substr(0, v.size() - 3) + "y";
    }
    return v.substr(0, v.size() - 1);
  }

  std::string clause() {
    const bool plural = unit() < 0.35;
    std::string c = noun_phrase(plural) + " ";
    if (unit() < 0.25) c += std::string(kAdverbs[zipf(kAdverbs.size())]) + " ";
    c += verb(plural) + " " + noun_phrase(unit() < 0.3);
    if (unit() < 0.4) {
      c += std::string(" ") + kPrepositions[zipf(kPrepositions.size())] + " " +
           noun_phrase(unit() < 0.3);
    }
    return c;
  }

  std::string sentence() {
    std::string s = clause();
    if (unit() < 0.3) {
      s += (unit() < 0.5 ? ", " : " ") + std::string(kConnectives[zipf(kConnectives.size())]) +
           " " + clause();
    }
    s[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(s[0])));
    s += unit() < 0.9 ? "." : "!";
    return s;
  }

  std::string paragraph() {
    topic_ = uniform(kSingularNouns.size());
    std::string p;
    const std::size_t n = 3 + uniform(5);
    for (std::size_t i = 0; i < n; ++i) {
      if (i) p += ' ';
      p += sentence();
    }
    return p + "\n\n";
  }

 private:
  Rng rng_;
  std::size_t topic_ = 0;
};

}  // namespace

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  TextGen gen(seed);
  std::string out;
  out.reserve(bytes + 1024);
  while (out.size() < bytes) out += gen.paragraph();
  out.resize(bytes);
  return out;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TrainingError("cannot open corpus file " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty()) throw TrainingError("corpus file " + path + " is empty");
  return text;
}

CorpusSplit split_corpus(std::span<const std::int32_t> tokens, double heldout_fraction) {
  if (!(heldout_fraction > 0 && heldout_fraction < 1)) {
    throw TrainingError("split_corpus: held-out fraction must lie in (0, 1)");
  }
  const auto n_held = static_cast<std::size_t>(static_cast<double>(tokens.size()) *
                                               heldout_fraction);
  if (n_held < 2 || tokens.size() - n_held < 2) {
    throw TrainingError("split_corpus: corpus of " + std::to_string(tokens.size()) +
                        " tokens is too small to split");
  }
  CorpusSplit split;
  split.train.assign(tokens.begin(), tokens.end() - static_cast<std::ptrdiff_t>(n_held));
  split.heldout.assign(tokens.end() - static_cast<std::ptrdiff_t>(n_held), tokens.end());
  return split;
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Var<T> distill_loss(const Tensor<T>& teacher_logits, Var<T> student_logits) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw TensorError("distill_loss: teacher logits " + shape_str(teacher_logits.shape()) +
                      " vs student logits " + shape_str(student_logits.shape()));
  }
  if (teacher_logits.rank() != 2 || teacher_logits.dim(0) == 0) {
    throw TensorError("distill_loss: no positions");
  }
  // Cross-entropy; KL(teacher || student) differs from it by the teacher entropy,
  // a constant with respect to the student.
  return soft_cross_entropy(student_logits, softmax_rows(teacher_logits));
}

double distill_loss_value(const Tensor<double>& teacher_logits,
                          const Tensor<double>& student_logits) {
  Tape<double> tape(TapeMode::kEval);
  return distill_loss(teacher_logits, tape.constant(student_logits)).value()[0];
}

template <typename T>
void Adam<T>::step(std::span<const NamedParam<T>> params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const NamedParam<T>& p : params) {
    Tensor<T>& w = *p.tensor;
    if (!w.requires_grad() || !w.has_grad()) continue;
    Moments& mo = moments_[p.name];
    if (mo.m.size() != w.size()) {
      mo.m.assign(w.size(), 0.0);
      mo.v.assign(w.size(), 0.0);
    }
    std::span<const T> g = w.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * gi;
      mo.v[i] = beta2_ * mo.v[i] + (1.0 - beta2_) * gi * gi;
      const double update = (mo.m[i] / bc1) / (std::sqrt(mo.v[i] / bc2) + eps_);
      w[i] -= static_cast<T>(lr * update);
    }
  }
}

template class Adam<float>;
template class Adam<double>;

// ---------------------------------------------------------------------------
// Steps

namespace {

template <typename T>
std::string first_non_finite(const BiMambaModel<T>& model) {
  for (const ConstNamedParam<T>& p : model.parameters()) {
    if (!p.tensor->all_finite()) return p.name + " (value)";
    if (p.tensor->has_grad()) {
      for (T g : p.tensor->grad()) {
        if (!std::isfinite(g)) return p.name + " (gradient)";
      }
    }
  }
  return "none among parameters or gradients";
}

}  // namespace

template <typename T>
StepResult train_step(BiMambaModel<T>& model, BiMambaModel<T>* teacher,
                      std::span<const std::vector<std::int32_t>> windows,
                      Adam<T>& opt, const TrainConfig& cfg, std::size_t step) {
  if (windows.empty()) throw TrainingError("train_step: empty batch");
  const std::size_t win = windows[0].size();
  if (win < 2) throw TrainingError("train_step: windows need at least 2 tokens");
  for (const auto& w : windows) {
    if (w.size() != win) throw TrainingError("train_step: ragged batch");
  }
  if (teacher && teacher->config().vocab_size != model.config().vocab_size) {
    throw TrainingError("train_step: teacher and student vocabularies differ");
  }
  const std::size_t L = win - 1;
  const std::size_t n = windows.size();
  const std::size_t per_micro =
      cfg.micro_batch_tokens == 0 ? n : std::max<std::size_t>(1, cfg.micro_batch_tokens / L);

  StepResult r;
  r.lr = lr_at(step, cfg);
  model.set_requires_grad(true);
  model.zero_grad();
  for (std::size_t start = 0; start < n; start += per_micro) {
    const std::size_t count = std::min(per_micro, n - start);
    std::vector<std::int32_t> inputs, targets;
    inputs.reserve(count * L);
    targets.reserve(count * L);
    for (std::size_t s = start; s < start + count; ++s) {
      inputs.insert(inputs.end(), windows[s].begin(), windows[s].end() - 1);
      targets.insert(targets.end(), windows[s].begin() + 1, windows[s].end());
    }
    Tape<T> tape;
    Var<T> loss;
    try {
      Var<T> logits = model.forward(tape, inputs, L);
      loss = teacher ? distill_loss(teacher->logits(inputs), logits)
                     : cross_entropy(logits, std::span<const std::int32_t>(targets));
    } catch (const TensorError& e) {
      throw TrainingError("forward failed at step " + std::to_string(step) + ": " + e.what() +
                          "; first non-finite tensor: " + first_non_finite(model));
    }
    const T weight = static_cast<T>(static_cast<double>(count) / static_cast<double>(n));
    Var<T> weighted = scale(loss, weight);
    const double value = static_cast<double>(loss.value()[0]);
    if (!std::isfinite(value)) {
      throw TrainingError("non-finite loss at step " + std::to_string(step) +
                          "; first non-finite tensor: " + first_non_finite(model));
    }
    r.loss += value * static_cast<double>(weight);
    tape.backward(weighted);
  }

  auto params = model.parameters();
  double sq = 0;
  for (const NamedParam<T>& p : params) {
    if (!p.tensor->has_grad()) continue;
    for (T g : p.tensor->grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  r.grad_norm_raw = std::sqrt(sq);
  if (!std::isfinite(r.grad_norm_raw)) {
    throw TrainingError("non-finite gradient at step " + std::to_string(step) +
                        "; first non-finite tensor: " + first_non_finite(model));
  }
  r.grad_norm = r.grad_norm_raw;
  if (r.grad_norm_raw > cfg.grad_clip_norm) {
    const T factor = static_cast<T>(cfg.grad_clip_norm / r.grad_norm_raw);
    double clipped = 0;
    for (const NamedParam<T>& p : params) {
      if (!p.tensor->has_grad()) continue;
      for (T& g : p.tensor->grad()) {
        g *= factor;
        clipped += static_cast<double>(g) * static_cast<double>(g);
      }
    }
    r.grad_norm = std::sqrt(clipped);
  }
  opt.step(params, r.lr);
  model.clamp_latent();
  return r;
}

template StepResult train_step(BiMambaModel<float>&, BiMambaModel<float>*,
                               std::span<const std::vector<std::int32_t>>, Adam<float>&,
                               const TrainConfig&, std::size_t);
template StepResult train_step(BiMambaModel<double>&, BiMambaModel<double>*,
                               std::span<const std::vector<std::int32_t>>, Adam<double>&,
                               const TrainConfig&, std::size_t);
template Var<float> distill_loss(const Tensor<float>&, Var<float>);
template Var<double> distill_loss(const Tensor<double>&, Var<double>);

// ---------------------------------------------------------------------------
// Drivers

namespace {

void run_training(BiMambaModel<float>& model, BiMambaModel<float>* teacher,
                  std::span<const std::int32_t> corpus, const TrainConfig& cfg,
                  const TrainHooks& hooks, bool divergence_check) {
  cfg.validate();
  CorpusStream stream(std::vector<std::int32_t>(corpus.begin(), corpus.end()), cfg.seq_len,
                      derive_seed(cfg.seed, "corpus"));
  Adam<float> opt(cfg);
  if (hooks.log) *hooks.log << "step\tlr\tloss\tgrad_norm\ttokens_seen\n";
  const std::size_t batch = cfg.sequences_per_batch();
  double initial = 0;
  std::size_t above = 0;
  std::vector<std::vector<std::int32_t>> windows(batch);
  for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
    for (auto& w : windows) w = stream.next_window();
    const StepResult r = train_step<float>(model, teacher, windows, opt, cfg, step);
    if (hooks.losses) hooks.losses->push_back(r.loss);
    if (hooks.log) {
      *hooks.log << step << '\t' << r.lr << '\t' << r.loss << '\t' << r.grad_norm << '\t'
                 << stream.tokens_seen() << '\n';
    }
    if (divergence_check) {
      if (step == 1) {
        initial = r.loss;
      } else if (r.loss > initial) {
        if (++above >= 500) {
          throw TrainingError("training diverged: loss above its initial value " +
                              std::to_string(initial) + " for 500 consecutive steps (step " +
                              std::to_string(step) + ")");
        }
      } else {
        above = 0;
      }
    }
    if (hooks.checkpoint_every && hooks.on_checkpoint && step % hooks.checkpoint_every == 0) {
      hooks.on_checkpoint(step, model);
    }
  }
  model.set_requires_grad(false);
  model.zero_grad();
}

}  // namespace

BiMambaModel<float> train_teacher(const ModelConfig& config,
                                  std::span<const std::int32_t> corpus,
                                  const TrainConfig& cfg, const TrainHooks& hooks) {
  if (config.scope != BinarizationScope::kNone) {
    throw ConfigError("train_teacher: teacher must be full precision (scope none), got " +
                      std::string(scope_name(config.scope)));
  }
  auto model = BiMambaModel<float>::init(config, derive_seed(cfg.seed, "teacher"));
  run_training(model, nullptr, corpus, cfg, hooks, true);
  return model;
}

BiMambaModel<float> distill(const ModelConfig& student_config,
                            const BiMambaModel<float>* teacher,
                            std::span<const std::int32_t> corpus, const TrainConfig& cfg,
                            const TrainHooks& hooks) {
  auto model = BiMambaModel<float>::init(student_config, derive_seed(cfg.seed, "student"));
  if (!teacher) {
    run_training(model, nullptr, corpus, cfg, hooks, true);
    return model;
  }
  // Working copy: tape leaves bind mutable tensors; the caller's teacher is
  // never touched.
  BiMambaModel<float> frozen = *teacher;
  frozen.set_requires_grad(false);
  run_training(model, &frozen, corpus, cfg, hooks, true);
  return model;
}

}  // namespace bimamba

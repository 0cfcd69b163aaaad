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


// bimamba: command-line entry point for the training, binarization,
// packing, evaluation and reporting pipeline.
//
// Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "bimamba/eval.hpp"
#include "bimamba/model.hpp"
#include "bimamba/store.hpp"
#include "bimamba/trainer.hpp"

#ifndef BIMAMBA_VERSION
#define BIMAMBA_VERSION "0.1.0"
#endif

namespace fs = std::filesystem;
using bimamba::BinarizationScope;
using bimamba::ConfigError;
using bimamba::ModelConfig;
using bimamba::TrainConfig;
using KeyValues = std::map<std::string, std::string>;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

const std::vector<std::string>& valid_keys() {
  static const std::vector<std::string> keys = {
      "model.name",  "model.d_model",   "model.n_layer",     "model.vocab",
      "model.n_heads", "model.d_state", "model.d_conv",      "model.expand",
      "model.scope", "model.precision", "train.peak_lr",     "train.final_lr",
      "train.warmup", "train.steps",    "train.batch_tokens", "train.micro_batch_tokens",
      "train.seq_len", "train.clip",    "train.beta1",       "train.beta2",
      "train.seed",  "io.out_dir",      "io.corpus"};
  return keys;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

void check_key(const std::string& key, const std::string& origin) {
  const auto& keys = valid_keys();
  if (std::find(keys.begin(), keys.end(), key) != keys.end()) return;
  std::string list;
  for (const auto& k : keys) list += (list.empty() ? "" : ", ") + k;
  throw UsageError(origin + ": unknown config key '" + key + "'; valid keys: " + list);
}

void flatten_json(const nlohmann::json& j, const std::string& prefix, KeyValues& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string key = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      flatten_json(v, key, out);
    } else if (v.is_string()) {
      out[key] = v.get<std::string>();
    } else {
      out[key] = v.dump();
    }
  }
}

// `key = value` lines (# comments), or JSON when the file starts with '{'.
KeyValues read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  KeyValues kv;
  if (trim(text).rfind('{', 0) == 0) {
    try {
      flatten_json(nlohmann::json::parse(text), "", kv);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("config file " + path + ": " + e.what());
    }
  } else {
    std::istringstream lines(text);
    std::size_t lineno = 0;
    for (std::string line; std::getline(lines, line);) {
      ++lineno;
      line = trim(line.substr(0, line.find('#')));
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) {
        throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
      }
      kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
  }
  for (const auto& [k, v] : kv) check_key(k, path);
  return kv;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string canonical(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

// Options shared by every subcommand.
struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::string preset;
  std::string scope;
  std::size_t vocab = 0;
  std::optional<std::uint64_t> seed;
  std::size_t threads = 0;
  std::string corpus;
  std::optional<std::size_t> steps;

  // Config file, then --set overrides, then dedicated flags.
  KeyValues merged;

  void add_to(CLI::App* app, bool model_flags, bool train_flags) {
    app->add_option("--config", config_path, "Config file (key = value lines or JSON)")
        ->check(CLI::ExistingFile);
    app->add_option("--set", overrides, "Override a config key, key=value (repeatable)");
    app->add_option("--out", out_dir, "Output directory (io.out_dir), default 'out'");
    app->add_option("--seed", seed, "Root seed for every stochastic component");
    app->add_option("--threads", threads,
                    "Worker threads for evaluation (default BIMAMBA_THREADS or 1)");
    if (model_flags) {
      app->add_option("--preset", preset, "Model preset: tiny, small, 780M, 1.3B, 2.7B");
      app->add_option("--scope", scope, "Binarization scope: none, in_proj, full");
      app->add_option("--vocab", vocab, "Vocabulary size override");
    }
    if (train_flags) {
      app->add_option("--corpus", corpus, "Training text file (io.corpus), default synthetic");
      app->add_option("--steps", steps, "Optimizer steps (train.steps)");
    }
  }

  void resolve() {
    if (!config_path.empty()) merged = read_config_file(config_path);
    for (const std::string& o : overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + o + "'");
      const std::string key = trim(o.substr(0, eq));
      check_key(key, "--set");
      merged[key] = trim(o.substr(eq + 1));
    }
    if (!preset.empty()) merged["model.name"] = preset;
    if (!scope.empty()) merged["model.scope"] = scope;
    if (vocab) merged["model.vocab"] = std::to_string(vocab);
    if (!corpus.empty()) merged["io.corpus"] = corpus;
    if (steps) merged["train.steps"] = std::to_string(*steps);
    if (seed) merged["train.seed"] = std::to_string(*seed);
    if (!out_dir.empty()) merged["io.out_dir"] = out_dir;
    if (!merged.count("io.out_dir")) merged["io.out_dir"] = "out";
    if (threads == 0) {
      if (const char* env = std::getenv("BIMAMBA_THREADS"); env && *env) {
        try {
          threads = std::stoul(env);
        } catch (const std::exception&) {
          throw UsageError(std::string("BIMAMBA_THREADS must be a positive integer, got '") +
                           env + "'");
        }
      }
      if (threads == 0) threads = 1;
    }
  }

  std::uint64_t root_seed() const {
    auto it = merged.find("train.seed");
    return it == merged.end() ? 0 : std::stoull(it->second);
  }

  KeyValues section(const std::string& prefix) const {
    KeyValues out;
    for (const auto& [k, v] : merged) {
      if (k.rfind(prefix, 0) == 0) out[k] = v;
    }
    return out;
  }

  // Preset first, then model.* keys. Named sizes use the accounting
  // vocabulary when `accounting` is set.
  ModelConfig model_config(const std::string& default_preset, bool accounting = false) const {
    KeyValues kv = section("model.");
    const std::string name = kv.count("model.name") ? kv["model.name"] : default_preset;
    ModelConfig base;
    const auto names = bimamba::preset_names();
    if (std::find(names.begin(), names.end(), name) == names.end()) {
      throw UsageError("unknown preset '" + name + "'; presets: tiny, small, 780M, 1.3B, 2.7B");
    }
    base = accounting ? bimamba::accounting_preset(name) : bimamba::model_preset(name);
    KeyValues full = base.to_map();
    for (const auto& [k, v] : kv) full[k] = v;
    full["model.name"] = name;
    ModelConfig c = ModelConfig::from_map(full);
    if (!kv.count("model.n_heads") && (kv.count("model.d_model") || kv.count("model.expand"))) {
      // Keep the preset head width when the width changes.
      full["model.n_heads"] = std::to_string(c.d_inner() / base.head_dim);
      c = ModelConfig::from_map(full);
    }
    return c;
  }

  TrainConfig train_config(std::size_t default_steps) const {
    const KeyValues kv = section("train.");
    std::size_t total = default_steps;
    if (auto it = kv.find("train.steps"); it != kv.end()) total = std::stoul(it->second);
    TrainConfig base = TrainConfig::desk(total);
    base.seq_len = 64;
    base.tokens_per_batch = 2048;
    TrainConfig cfg = TrainConfig::from_map(kv, base);
    cfg.validate();
    return cfg;
  }

  std::string corpus_path() const {
    auto it = merged.find("io.corpus");
    return it == merged.end() ? "" : it->second;
  }
  fs::path out() const { return merged.at("io.out_dir"); }
};

// Files are written as "<name>.incomplete" and renamed only when the whole
// command succeeds.
class Outputs {
 public:
  explicit Outputs(fs::path dir) : dir_(std::move(dir)) { fs::create_directories(dir_); }

  fs::path pending(const std::string& name) {
    names_.push_back(name);
    return dir_ / (name + ".incomplete");
  }
  void text(const std::string& name, const std::string& content) {
    std::ofstream f(pending(name), std::ios::binary);
    f << content;
    if (!f) throw std::runtime_error("cannot write " + (dir_ / name).string());
  }
  void checkpoint(const std::string& name, const bimamba::BiMambaModel<float>& m, bool packed) {
    const auto bytes = bimamba::serialize_checkpoint(m, packed);
    std::ofstream f(pending(name), std::ios::binary);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("cannot write " + (dir_ / name).string());
  }
  void commit() {
    for (const auto& n : names_) fs::rename(dir_ / (n + ".incomplete"), dir_ / n);
  }
  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::vector<std::string> names_;
};

struct Corpus {
  std::string source;
  bimamba::CorpusSplit split;
};

Corpus load_corpus(const Common& common) {
  Corpus c;
  std::string text;
  const std::string path = common.corpus_path();
  if (path.empty()) {
    text = bimamba::synthetic_corpus(1 << 20, 1);
    c.source = "synthetic:1048576:1";
  } else {
    text = bimamba::read_text_file(path);
    c.source = path;
  }
  const auto tokens = bimamba::tokenize(text);
  c.split = bimamba::split_corpus(tokens, 0.05);
  return c;
}

std::span<const std::int32_t> eval_slice(const Corpus& c, std::size_t max_tokens) {
  return std::span<const std::int32_t>(c.split.heldout.data(),
                                       std::min(max_tokens, c.split.heldout.size()));
}

nlohmann::json manifest(const std::string& command, const Common& common,
                        const KeyValues& effective) {
  nlohmann::json m;
  m["command"] = command;
  m["version"] = BIMAMBA_VERSION;
  m["seed"] = common.root_seed();
  m["config"] = effective;
  m["config_hash"] = hex64(fnv1a(canonical(effective)));
  return m;
}

KeyValues effective_config(const Common& common, const ModelConfig* model,
                           const TrainConfig* train) {
  KeyValues kv;
  if (model) kv.merge(model->to_map());
  if (train) kv.merge(train->to_map());
  kv["io.out_dir"] = common.out().string();
  if (!common.corpus_path().empty()) kv["io.corpus"] = common.corpus_path();
  return kv;
}

void finish(Outputs& out, nlohmann::json m) {
  out.text("manifest.json", m.dump(2) + "\n");
  out.commit();
}

bimamba::BiMambaModel<float> load_model(const std::string& path) {
  return bimamba::read_checkpoint(path).model;
}

// ---------------------------------------------------------------------------
// Subcommands

void train_command(const std::string& name, Common& common, const std::string& teacher_path,
                   bool no_teacher, std::size_t checkpoint_every) {
  const bool teacher_run = name == "train-teacher";
  ModelConfig mc = common.model_config("tiny");
  if (teacher_run && !common.merged.count("model.scope")) mc.scope = BinarizationScope::kNone;
  if (!teacher_run && !common.merged.count("model.scope")) mc.scope = BinarizationScope::kInOutProj;
  TrainConfig tc = common.train_config(teacher_run ? 4000 : 2000);
  if (!teacher_run && teacher_path.empty() && !no_teacher) {
    throw UsageError("distill needs --teacher PATH (or --no-teacher for the next-token ablation)");
  }
  const Corpus corpus = load_corpus(common);
  Outputs out(common.out());
  std::ofstream log(out.pending("train_log.tsv"));
  bimamba::TrainHooks hooks;
  hooks.log = &log;
  hooks.checkpoint_every = checkpoint_every;
  const std::string stem = teacher_run ? "teacher" : "student";
  hooks.on_checkpoint = [&](std::size_t step, const bimamba::BiMambaModel<float>& m) {
    bimamba::write_checkpoint(m, (out.dir() / (stem + "_step" + std::to_string(step) + ".bmb")).string(),
                              false);
  };
  bimamba::BiMambaModel<float> model;
  std::optional<bimamba::BiMambaModel<float>> teacher;
  if (teacher_run) {
    model = bimamba::train_teacher(mc, corpus.split.train, tc, hooks);
  } else {
    if (!no_teacher) teacher = load_model(teacher_path);
    model = bimamba::distill(mc, teacher ? &*teacher : nullptr, corpus.split.train, tc, hooks);
  }
  log.close();
  const double ppl = bimamba::perplexity(model, eval_slice(corpus, 16384), 64, common.threads).ppl;
  out.checkpoint(stem + ".bmb", model, false);
  KeyValues eff = effective_config(common, &mc, &tc);
  auto m = manifest(name, common, eff);
  m["corpus"] = corpus.source;
  m["heldout_ppl"] = ppl;
  if (!teacher_run) m["teacher"] = no_teacher ? "none" : teacher_path;
  out.text("eval.txt", "heldout_ppl=" + std::to_string(ppl) + "\n");
  finish(out, m);
  std::cout << stem << " held-out ppl " << ppl << " -> " << (out.dir() / (stem + ".bmb")).string()
            << "\n";
}

void ptb_command(Common& common, const std::string& model_path) {
  const auto teacher = load_model(model_path);
  const BinarizationScope scope = common.scope.empty() ? BinarizationScope::kInOutProj
                                                       : bimamba::parse_scope(common.scope);
  const auto model = bimamba::ptb_binarize(teacher, scope);
  Outputs out(common.out());
  out.checkpoint("ptb.bmb", model, false);
  auto m = manifest("ptb", common, effective_config(common, &model.config(), nullptr));
  m["input"] = model_path;
  finish(out, m);
  std::cout << "ptb (" << bimamba::scope_name(scope) << ") -> " << (out.dir() / "ptb.bmb").string()
            << "\n";
}

void pack_command(Common& common, const std::string& model_path) {
  const auto model = load_model(model_path);
  if (model.config().scope == BinarizationScope::kNone) {
    throw UsageError("pack: " + model_path + " has no binarized projections");
  }
  Outputs out(common.out());
  out.checkpoint("packed.bmb", model, true);
  auto m = manifest("pack", common, effective_config(common, &model.config(), nullptr));
  m["input"] = model_path;
  finish(out, m);
  std::cout << "packed " << fs::file_size(out.dir() / "packed.bmb") << " bytes (from "
            << fs::file_size(model_path) << ") -> " << (out.dir() / "packed.bmb").string() << "\n";
}

void ppl_command(Common& common, const std::string& model_path, std::size_t seq_len,
                 std::size_t max_tokens) {
  const auto model = load_model(model_path);
  const Corpus corpus = load_corpus(common);
  const auto r = bimamba::perplexity(model, eval_slice(corpus, max_tokens), seq_len, common.threads);
  Outputs out(common.out());
  std::ostringstream kv;
  kv << std::setprecision(10) << "tokens=" << r.tokens << "\nnll=" << r.nll << "\nppl=" << r.ppl
     << "\n";
  out.text("ppl.txt", kv.str());
  auto m = manifest("ppl", common, effective_config(common, &model.config(), nullptr));
  m["input"] = model_path;
  m["corpus"] = corpus.source;
  m["ppl"] = r.ppl;
  finish(out, m);
  std::cout << kv.str();
}

bimamba::BiMambaModel<float> model_or_preset(Common& common, const std::string& model_path) {
  if (!model_path.empty()) return load_model(model_path);
  return bimamba::BiMambaModel<float>::init(common.model_config("small"), common.root_seed());
}

void bench_command(Common& common, const std::string& model_path, std::size_t n_tokens,
                   std::size_t runs, std::vector<std::size_t> gemv_dims) {
  const auto model = model_or_preset(common, model_path);
  if (model.config().scope == BinarizationScope::kNone) {
    throw UsageError("bench: model has no binarized projections to pack");
  }
  const auto packed = bimamba::InferenceModel::packed(model);
  const auto dense = bimamba::InferenceModel::dense(model);
  const auto g = bimamba::bench_generation(packed, dense, bimamba::tokenize("The", true), n_tokens,
                                           runs);
  std::ostringstream gemv;
  gemv << "rows,cols,runs,packed_ns,packed_std,dense_ns,dense_std,speedup,max_abs_diff\n";
  for (std::size_t d : gemv_dims) {
    const auto b = bimamba::bench_gemv(d, d, runs, common.root_seed() + d);
    gemv << b.rows << ',' << b.cols << ',' << b.runs << ',' << b.packed_ns.mean << ','
         << b.packed_ns.stddev << ',' << b.dense_ns.mean << ',' << b.dense_ns.stddev << ','
         << b.speedup() << ',' << b.max_abs_diff << '\n';
  }
  const std::vector<bimamba::BenchResult> rows = {g.packed, g.dense};
  Outputs out(common.out());
  out.text("bench.csv", bimamba::bench_csv(rows));
  out.text("gemv.csv", gemv.str());
  finish(out, manifest("bench", common, effective_config(common, &model.config(), nullptr)));
  std::cout << bimamba::bench_csv(rows) << gemv.str();
}

void scaling_command(Common& common, const std::string& model_path,
                     std::vector<std::size_t> lengths) {
  const auto model = model_or_preset(common, model_path);
  const auto inf = model.config().scope == BinarizationScope::kNone
                       ? bimamba::InferenceModel::dense(model)
                       : bimamba::InferenceModel::packed(model);
  const auto pts = bimamba::scaling_curve(inf, lengths, common.root_seed());
  Outputs out(common.out());
  out.text("scaling.csv", bimamba::scaling_csv(pts));
  auto m = manifest("scaling", common, effective_config(common, &model.config(), nullptr));
  m["state_bytes"] = pts.front().state_bytes;
  m["ratio_last_first"] = pts.back().ns_per_token / pts.front().ns_per_token;
  finish(out, m);
  std::cout << bimamba::scaling_csv(pts);
}

void census_command(Common& common) {
  const ModelConfig c = common.model_config("2.7B", true);
  const bimamba::Census census = bimamba::param_census(c);
  std::ostringstream tsv;
  tsv << "bucket\tparams\tpercent\n";
  for (const auto& r : census.rows) {
    tsv << r.bucket << '\t' << r.count << '\t' << std::fixed << std::setprecision(4) << r.percent
        << '\n';
  }
  tsv << "total\t" << census.total << "\t100.0000\n";
  Outputs out(common.out());
  out.text("census.tsv", tsv.str());
  finish(out, manifest("census", common, effective_config(common, &c, nullptr)));
  std::cout << "# " << c.name << " (vocab " << c.vocab_size << ")\n" << tsv.str();
}

void storage_command(Common& common) {
  const ModelConfig c = common.model_config("2.7B", true);
  const BinarizationScope scope = common.scope.empty() ? BinarizationScope::kInOutProj
                                                       : bimamba::parse_scope(common.scope);
  const bimamba::StorageReport r = bimamba::storage_report(c, scope);
  Outputs out(common.out());
  out.text("storage.tsv", r.to_tsv());
  out.text("storage.txt", r.to_kv());
  finish(out, manifest("storage-report", common, effective_config(common, &c, nullptr)));
  std::cout << r.to_tsv() << '\n' << r.to_kv();
}

void hist_command(Common& common, const std::string& model_path, const std::string& reference,
                  std::size_t layer, const std::string& module, std::size_t bins) {
  const auto model = load_model(model_path);
  Outputs out(common.out());
  auto m = manifest("hist", common, effective_config(common, &model.config(), nullptr));
  const std::vector<std::string> modules =
      module == "all" ? std::vector<std::string>{"in_proj", "out_proj"}
                      : std::vector<std::string>{module};
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    if (layer != SIZE_MAX && l != layer) continue;
    for (const auto& mod : modules) {
      const auto h = bimamba::weight_histogram(model, l, mod, bins);
      out.text("hist_layer" + std::to_string(l) + "_" + mod + ".csv", h.to_csv());
      std::cout << "layer " << l << ' ' << mod << ": mean " << h.mean << " std " << h.stddev
                << " saturation " << h.saturation << '\n';
    }
  }
  if (!reference.empty()) {
    const double d = bimamba::histogram_distance(load_model(reference), model, bins);
    m["reference"] = reference;
    m["symmetric_kl"] = d;
    std::cout << "symmetric KL vs " << reference << ": " << d << '\n';
  }
  finish(out, m);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bimamba: binarized Mamba-2 training, packing and evaluation"};
  app.set_version_flag("--version", BIMAMBA_VERSION);
  app.require_subcommand(1);

  Common common;
  std::string teacher, model_path, reference, module = "all";
  bool no_teacher = false;
  std::size_t checkpoint_every = 0, seq_len = 64, max_tokens = 16384, n_tokens = 128, runs = 5,
              bins = 64, layer = SIZE_MAX;
  std::vector<std::size_t> lengths = {256, 512, 1024, 2048}, gemv_dims = {1024, 2048};

  auto* train = app.add_subcommand("train-teacher", "Train a full-precision teacher");
  common.add_to(train, true, true);
  train->add_option("--checkpoint-every", checkpoint_every, "Write an intermediate checkpoint every N steps");

  auto* distill = app.add_subcommand("distill", "Binarization-aware training by distillation");
  common.add_to(distill, true, true);
  distill->add_option("--teacher", teacher, "Teacher checkpoint")->check(CLI::ExistingFile);
  distill->add_flag("--no-teacher", no_teacher, "Train on next-token targets instead of a teacher");
  distill->add_option("--checkpoint-every", checkpoint_every, "Write an intermediate checkpoint every N steps");

  auto* ptb = app.add_subcommand("ptb", "Post-training binarization of a full-precision model");
  common.add_to(ptb, false, false);
  ptb->add_option("--model", model_path, "Full-precision checkpoint")->required()->check(CLI::ExistingFile);
  ptb->add_option("--scope", common.scope, "Binarization scope: in_proj or full (default full)");

  auto* pack = app.add_subcommand("pack", "Store binarized projections as sign bits");
  common.add_to(pack, false, false);
  pack->add_option("--model", model_path, "Binarized checkpoint")->required()->check(CLI::ExistingFile);

  auto* ppl = app.add_subcommand("ppl", "Held-out perplexity of a checkpoint");
  common.add_to(ppl, false, false);
  ppl->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  ppl->add_option("--corpus", common.corpus, "Text file; the last 5% is evaluated");
  ppl->add_option("--seq-len", seq_len, "Window length in targets");
  ppl->add_option("--max-tokens", max_tokens, "Held-out tokens to score");

  auto* bench = app.add_subcommand("bench", "Packed vs dense generation and GEMV timing");
  common.add_to(bench, true, false);
  bench->add_option("--model", model_path, "Binarized checkpoint (default: random init of --preset, small)")
      ->check(CLI::ExistingFile);
  bench->add_option("--tokens", n_tokens, "Generated tokens per run");
  bench->add_option("--runs", runs, "Timed runs (at least 5)");
  bench->add_option("--gemv-dims", gemv_dims, "Square GEMV sizes to time");

  auto* scaling = app.add_subcommand("scaling", "Per-token step time against sequence length");
  common.add_to(scaling, true, false);
  scaling->add_option("--model", model_path, "Checkpoint (default: random init of --preset, small)")
      ->check(CLI::ExistingFile);
  scaling->add_option("--lengths", lengths, "Strictly ascending sequence lengths");

  auto* census = app.add_subcommand("census", "Parameter share per module kind");
  common.add_to(census, true, false);

  auto* storage = app.add_subcommand("storage-report", "Storage of the 16-bit baseline vs binarized");
  common.add_to(storage, true, false);

  auto* hist = app.add_subcommand("hist", "Weight histograms of the projections");
  common.add_to(hist, false, false);
  hist->add_option("--model", model_path, "Checkpoint")->required()->check(CLI::ExistingFile);
  hist->add_option("--reference", reference, "Full-precision checkpoint for the KL distance")
      ->check(CLI::ExistingFile);
  hist->add_option("--layer", layer, "Layer index (default: every layer)");
  hist->add_option("--module", module, "in_proj, out_proj or all");
  hist->add_option("--bins", bins, "Uniform bin count");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    common.resolve();
    if (train->parsed()) {
      train_command("train-teacher", common, "", false, checkpoint_every);
    } else if (distill->parsed()) {
      train_command("distill", common, teacher, no_teacher, checkpoint_every);
    } else if (ptb->parsed()) {
      ptb_command(common, model_path);
    } else if (pack->parsed()) {
      pack_command(common, model_path);
    } else if (ppl->parsed()) {
      ppl_command(common, model_path, seq_len, max_tokens);
    } else if (bench->parsed()) {
      bench_command(common, model_path, n_tokens, runs, gemv_dims);
    } else if (scaling->parsed()) {
      scaling_command(common, model_path, lengths);
    } else if (census->parsed()) {
      census_command(common);
    } else if (storage->parsed()) {
      storage_command(common);
    } else if (hist->parsed()) {
      hist_command(common, model_path, reference, layer, module, bins);
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

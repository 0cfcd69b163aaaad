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

#include "bimamba/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "bimamba/ops.hpp"
#include "bimamba/rng.hpp"

namespace bimamba {
namespace {

std::size_t parse_size(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": expected a non-negative integer, got '" +
                      value + "'");
  }
}

ModelConfig named_size(std::string name, std::size_t d_model, std::size_t n_layer) {
  ModelConfig c;
  c.name = std::move(name);
  c.d_model = d_model;
  c.n_layer = n_layer;
  c.vocab_size = 32000;
  c.expand = 2;
  c.head_dim = 64;
  c.n_heads = c.d_inner() / c.head_dim;
  c.d_state = 128;
  c.d_conv = 4;
  c.scope = BinarizationScope::kInOutProj;
  return c;
}

ModelConfig desk_size(std::string name, std::size_t d_model, std::size_t n_layer) {
  ModelConfig c;
  c.name = std::move(name);
  c.d_model = d_model;
  c.n_layer = n_layer;
  c.vocab_size = kByteVocab;
  c.expand = 2;
  c.head_dim = 32;
  c.n_heads = c.d_inner() / c.head_dim;
  c.d_state = 16;
  c.d_conv = 4;
  c.scope = BinarizationScope::kInOutProj;
  return c;
}

}  // namespace

std::string_view scope_name(BinarizationScope scope) {
  switch (scope) {
    case BinarizationScope::kNone:
      return "none";
    case BinarizationScope::kInProj:
      return "in_proj";
    case BinarizationScope::kInOutProj:
      return "in_proj_and_out_proj";
  }
  return "none";
}

BinarizationScope parse_scope(std::string_view text) {
  if (text == "none") return BinarizationScope::kNone;
  if (text == "in_proj" || text == "inproj") return BinarizationScope::kInProj;
  if (text == "in_proj_and_out_proj" || text == "full") {
    return BinarizationScope::kInOutProj;
  }
  throw ConfigError("unknown binarization scope '" + std::string(text) +
                    "' (valid: none, in_proj, in_proj_and_out_proj, full)");
}

BlockDims ModelConfig::block_dims() const {
  BlockDims d;
  d.d_model = d_model;
  d.d_inner = d_inner();
  d.n_heads = n_heads;
  d.head_dim = head_dim;
  d.d_state = d_state;
  d.d_conv = d_conv;
  return d;
}

void ModelConfig::validate() const {
  if (d_model == 0 || n_layer == 0 || vocab_size == 0 || expand == 0 ||
      n_heads == 0 || d_state == 0 || d_conv == 0) {
    throw ConfigError("model config '" + name + "': all dimensions must be positive");
  }
  if (n_heads * head_dim != d_inner()) {
    throw ConfigError("model config '" + name + "': d_inner " +
                      std::to_string(d_inner()) + " is not n_heads * head_dim (" +
                      std::to_string(n_heads) + " * " + std::to_string(head_dim) + ")");
  }
  if (precision != "fp32" && precision != "fp64") {
    throw ConfigError("model config '" + name + "': unknown precision " + precision);
  }
}

std::map<std::string, std::string> ModelConfig::to_map() const {
  return {
      {"model.name", name},
      {"model.d_model", std::to_string(d_model)},
      {"model.n_layer", std::to_string(n_layer)},
      {"model.vocab", std::to_string(vocab_size)},
      {"model.n_heads", std::to_string(n_heads)},
      {"model.d_state", std::to_string(d_state)},
      {"model.d_conv", std::to_string(d_conv)},
      {"model.expand", std::to_string(expand)},
      {"model.scope", std::string(scope_name(scope))},
      {"model.precision", precision},
  };
}

ModelConfig ModelConfig::from_map(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  auto it = kv.find("model.name");
  if (it != kv.end()) {
    // Start from the preset when the name is one.
    const auto names = preset_names();
    if (std::find(names.begin(), names.end(), it->second) != names.end()) {
      c = model_preset(it->second);
    } else {
      c.name = it->second;
    }
  }
  for (const auto& [key, value] : kv) {
    if (key == "model.name") continue;
    if (key == "model.d_model") c.d_model = parse_size(key, value);
    else if (key == "model.n_layer") c.n_layer = parse_size(key, value);
    else if (key == "model.vocab") c.vocab_size = parse_size(key, value);
    else if (key == "model.n_heads") c.n_heads = parse_size(key, value);
    else if (key == "model.d_state") c.d_state = parse_size(key, value);
    else if (key == "model.d_conv") c.d_conv = parse_size(key, value);
    else if (key == "model.expand") c.expand = parse_size(key, value);
    else if (key == "model.scope") c.scope = parse_scope(value);
    else if (key == "model.precision") c.precision = value;
  }
  if (c.n_heads == 0 || c.d_inner() % c.n_heads != 0) {
    throw ConfigError("model config: d_inner " + std::to_string(c.d_inner()) +
                      " not divisible by n_heads " + std::to_string(c.n_heads));
  }
  c.head_dim = c.d_inner() / c.n_heads;
  c.validate();
  return c;
}

std::vector<std::string> preset_names() {
  return {"tiny", "small", "780M", "1.3B", "2.7B"};
}

ModelConfig model_preset(std::string_view name) {
  if (name == "tiny") return desk_size("tiny", 64, 2);
  if (name == "small") return desk_size("small", 128, 4);
  if (name == "780M") return named_size("780M", 1536, 48);
  if (name == "1.3B") return named_size("1.3B", 2048, 48);
  if (name == "2.7B") return named_size("2.7B", 2560, 64);
  throw ConfigError("unknown preset '" + std::string(name) +
                    "' (valid: tiny, small, 780M, 1.3B, 2.7B)");
}

ModelConfig accounting_preset(std::string_view name) {
  ModelConfig c = model_preset(name);
  if (name == "780M" || name == "1.3B" || name == "2.7B") {
    c.vocab_size = kReferenceMamba2Vocab;
  }
  return c;
}

// ---------------------------------------------------------------------------
// BiMambaModel

template <typename T>
BiMambaModel<T> BiMambaModel<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  BiMambaModel m;
  m.config_ = config;
  Rng emb_rng = make_rng(seed, "embedding");
  std::normal_distribution<double> emb_dist(0.0, 0.02);
  m.embedding_ = Tensor<T>({config.vocab_size, config.d_model});
  for (T& v : m.embedding_.data()) v = static_cast<T>(emb_dist(emb_rng));
  const BlockDims dims = config.block_dims();
  for (std::size_t i = 0; i < config.n_layer; ++i) {
    Rng rng = make_rng(seed, "layer" + std::to_string(i));
    ResidualLayer<T> layer;
    layer.norm = Tensor<T>({config.d_model}, T{1});
    layer.mixer = SsdBlockParams<T>::init(dims, config.binarize_in_proj(),
                                          config.binarize_out_proj(), rng);
    m.layers_.push_back(std::move(layer));
  }
  m.final_norm_ = Tensor<T>({config.d_model}, T{1});
  return m;
}

template <typename T>
Var<T> BiMambaModel<T>::forward(Tape<T>& tape, std::span<const std::int32_t> ids,
                                std::size_t seq_len) {
  if (ids.empty()) throw TensorError("model forward: empty input");
  if (seq_len == 0 || ids.size() % seq_len != 0) {
    throw TensorError("model forward: " + std::to_string(ids.size()) +
                      " ids are not whole sequences of " + std::to_string(seq_len));
  }
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw TensorError("model forward: token id " + std::to_string(id) +
                        " outside vocabulary of " + std::to_string(config_.vocab_size));
    }
  }
  const T eps = static_cast<T>(kNormEps);
  Var<T> table = tape.param(embedding_);
  Var<T> h = gather_rows(table, ids);
  for (ResidualLayer<T>& layer : layers_) {
    Var<T> mixed = block_forward(rms_norm_rows(h, tape.param(layer.norm), eps),
                                 layer.mixer, seq_len);
    h = add(h, mixed);
  }
  h = rms_norm_rows(h, tape.param(final_norm_), eps);
  return matmul_nt(h, table);
}

template <typename T>
Tensor<T> BiMambaModel<T>::logits(std::span<const std::int32_t> ids) {
  Tape<T> tape(TapeMode::kEval);
  return forward(tape, ids, ids.size()).value();
}

template <typename T>
template <typename Self, typename Out>
void BiMambaModel<T>::collect(Self& self, Out& out) {
  out.push_back({"embedding", &self.embedding_, ParamKind::kEmbedding, false});
  for (std::size_t i = 0; i < self.layers_.size(); ++i) {
    auto& layer = self.layers_[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    auto& mx = layer.mixer;
    out.push_back({pre + "norm", &layer.norm, ParamKind::kNorm, false});
    auto proj = [&](const std::string& name, auto& lin, ParamKind kind) {
      out.push_back({pre + name + ".weight", &lin.weight, kind, lin.binarized});
      if (lin.binarized) {
        out.push_back({pre + name + ".alpha", &lin.alpha, ParamKind::kScale, false});
        out.push_back({pre + name + ".beta", &lin.beta, ParamKind::kScale, false});
      }
    };
    proj("in_proj", mx.in_proj, ParamKind::kInProj);
    out.push_back({pre + "conv.weight", &mx.core.conv_weight, ParamKind::kConv, false});
    out.push_back({pre + "conv.bias", &mx.core.conv_bias, ParamKind::kConv, false});
    out.push_back({pre + "A_log", &mx.core.A_log, ParamKind::kA, false});
    out.push_back({pre + "D", &mx.core.D, ParamKind::kD, false});
    out.push_back({pre + "dt_bias", &mx.core.dt_bias, ParamKind::kDtBias, false});
    out.push_back({pre + "gate_norm", &mx.core.norm_weight, ParamKind::kNorm, false});
    proj("out_proj", mx.out_proj, ParamKind::kOutProj);
  }
  out.push_back({"final_norm", &self.final_norm_, ParamKind::kNorm, false});
}

template <typename T>
std::vector<NamedParam<T>> BiMambaModel<T>::parameters() {
  std::vector<NamedParam<T>> out;
  collect(*this, out);
  return out;
}

template <typename T>
std::vector<ConstNamedParam<T>> BiMambaModel<T>::parameters() const {
  std::vector<ConstNamedParam<T>> out;
  collect(*this, out);
  return out;
}

template <typename T>
void BiMambaModel<T>::set_requires_grad(bool on) {
  for (auto& p : parameters()) p.tensor->set_requires_grad(on);
}

template <typename T>
void BiMambaModel<T>::zero_grad() {
  for (auto& p : parameters()) p.tensor->zero_grad();
}

template <typename T>
void BiMambaModel<T>::clamp_latent() {
  for (ResidualLayer<T>& layer : layers_) {
    if (layer.mixer.in_proj.binarized) layer.mixer.in_proj.clamp_latent();
    if (layer.mixer.out_proj.binarized) layer.mixer.out_proj.clamp_latent();
  }
}

template <typename T>
void BiMambaModel<T>::set_scope(BinarizationScope scope) {
  config_.scope = scope;
  for (ResidualLayer<T>& layer : layers_) {
    auto apply = [](FbiLinearParams<T>& lin, bool on) {
      if (on && !lin.binarized) {
        lin.binarized = true;
        lin.init_scales_from_weight();
      } else if (!on) {
        lin.binarized = false;
      }
    };
    apply(layer.mixer.in_proj, config_.binarize_in_proj());
    apply(layer.mixer.out_proj, config_.binarize_out_proj());
  }
}

template <typename T>
void BiMambaModel<T>::validate() const {
  config_.validate();
  if (embedding_.shape() != Shape{config_.vocab_size, config_.d_model}) {
    throw ConfigError("model: embedding shape " + shape_str(embedding_.shape()) +
                      " does not match config");
  }
  if (layers_.size() != config_.n_layer) throw ConfigError("model: layer count mismatch");
  const BlockDims dims = config_.block_dims();
  for (const ResidualLayer<T>& layer : layers_) {
    if (layer.norm.size() != config_.d_model) throw ConfigError("model: norm size mismatch");
    if (layer.mixer.dims.d_model != dims.d_model || layer.mixer.dims.d_inner != dims.d_inner ||
        layer.mixer.dims.n_heads != dims.n_heads || layer.mixer.dims.d_state != dims.d_state ||
        layer.mixer.dims.d_conv != dims.d_conv) {
      throw ConfigError("model: block dims do not match config");
    }
    layer.mixer.validate();
    if (layer.mixer.in_proj.binarized != config_.binarize_in_proj() ||
        layer.mixer.out_proj.binarized != config_.binarize_out_proj()) {
      throw ConfigError("model: binarization of projections does not match scope " +
                        std::string(scope_name(config_.scope)));
    }
  }
  if (final_norm_.size() != config_.d_model) throw ConfigError("model: final norm size mismatch");
}

template <typename T>
template <typename U>
BiMambaModel<U> BiMambaModel<T>::cast() const {
  BiMambaModel<U> out;
  out.config_ = config_;
  out.config_.precision = sizeof(U) == 8 ? "fp64" : "fp32";
  out.embedding_ = embedding_.template cast<U>();
  out.final_norm_ = final_norm_.template cast<U>();
  auto lin = [](const FbiLinearParams<T>& src) {
    FbiLinearParams<U> d;
    d.weight = src.weight.template cast<U>();
    d.alpha = src.alpha.template cast<U>();
    d.beta = src.beta.template cast<U>();
    d.binarized = src.binarized;
    return d;
  };
  for (const ResidualLayer<T>& layer : layers_) {
    ResidualLayer<U> l;
    l.norm = layer.norm.template cast<U>();
    l.mixer.dims = layer.mixer.dims;
    l.mixer.in_proj = lin(layer.mixer.in_proj);
    l.mixer.out_proj = lin(layer.mixer.out_proj);
    const SsdCoreParams<T>& c = layer.mixer.core;
    l.mixer.core.conv_weight = c.conv_weight.template cast<U>();
    l.mixer.core.conv_bias = c.conv_bias.template cast<U>();
    l.mixer.core.A_log = c.A_log.template cast<U>();
    l.mixer.core.D = c.D.template cast<U>();
    l.mixer.core.dt_bias = c.dt_bias.template cast<U>();
    l.mixer.core.norm_weight = c.norm_weight.template cast<U>();
    out.layers_.push_back(std::move(l));
  }
  return out;
}

template class BiMambaModel<float>;
template class BiMambaModel<double>;
template BiMambaModel<double> BiMambaModel<float>::cast<double>() const;
template BiMambaModel<float> BiMambaModel<double>::cast<float>() const;
template BiMambaModel<float> BiMambaModel<float>::cast<float>() const;

// ---------------------------------------------------------------------------
// Inference

void LinearWeights::apply(std::span<const float> x, std::span<float> y) const {
  if (const auto* p = std::get_if<PackedMatrix>(&w_)) {
    p->gemv(x, y);
  } else {
    dense_gemv(std::get<Tensor<float>>(w_), x, y);
  }
}

std::size_t LinearWeights::bytes() const {
  if (const auto* p = std::get_if<PackedMatrix>(&w_)) return p->byte_size();
  return std::get<Tensor<float>>(w_).size() * sizeof(float);
}

std::size_t InferenceModel::State::bytes() const {
  std::size_t total = 0;
  for (const auto& s : layers) total += s.bytes();
  return total;
}

namespace {

InferenceModel build_inference(const BiMambaModel<float>& model, bool pack,
                               ModelConfig& config, Tensor<float>& embedding,
                               std::vector<InferenceLayer>& layers,
                               Tensor<float>& final_norm) {
  model.validate();
  config = model.config();
  embedding = model.embedding();
  final_norm = model.final_norm();
  layers.clear();
  auto weights = [pack](const FbiLinearParams<float>& lin) {
    if (pack && lin.binarized) return LinearWeights(PackedMatrix::from_params(lin));
    return LinearWeights(effective_weight(lin));
  };
  for (const ResidualLayer<float>& layer : model.layers()) {
    InferenceLayer l;
    l.dims = layer.mixer.dims;
    l.norm = layer.norm;
    l.in_proj = weights(layer.mixer.in_proj);
    l.core = layer.mixer.core;
    l.out_proj = weights(layer.mixer.out_proj);
    layers.push_back(std::move(l));
  }
  return {};
}

}  // namespace

InferenceModel InferenceModel::dense(const BiMambaModel<float>& model) {
  InferenceModel m;
  build_inference(model, false, m.config_, m.embedding_, m.layers_, m.final_norm_);
  return m;
}

InferenceModel InferenceModel::packed(const BiMambaModel<float>& model) {
  InferenceModel m;
  build_inference(model, true, m.config_, m.embedding_, m.layers_, m.final_norm_);
  return m;
}

InferenceModel::State InferenceModel::initial_state() const {
  State s;
  for (const InferenceLayer& l : layers_) s.layers.push_back(RecurrentState<float>::zeros(l.dims));
  return s;
}

void InferenceModel::step(std::int32_t token, State& state,
                          std::span<float> logits) const {
  const std::size_t d = config_.d_model;
  if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab_size) {
    throw TensorError("inference step: token id " + std::to_string(token) +
                      " outside vocabulary");
  }
  if (state.layers.size() != layers_.size()) {
    throw TensorError("inference step: state has wrong layer count");
  }
  if (logits.size() != config_.vocab_size) throw TensorError("inference step: logits size");
  std::vector<float> h(embedding_.ptr() + token * d, embedding_.ptr() + (token + 1) * d);
  std::vector<float> normed(d), mixed(d);
  auto rms = [d](const std::vector<float>& x, const Tensor<float>& w, std::vector<float>& out) {
    float ss = 0;
    for (std::size_t c = 0; c < d; ++c) ss += x[c] * x[c];
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(d) + static_cast<float>(kNormEps));
    for (std::size_t c = 0; c < d; ++c) out[c] = x[c] * inv * w[c];
  };
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const InferenceLayer& l = layers_[i];
    rms(h, l.norm, normed);
    detail::block_step_with<float>(
        l.dims, l.core,
        [&l](std::span<const float> x, std::span<float> y) { l.in_proj.apply(x, y); },
        [&l](std::span<const float> x, std::span<float> y) { l.out_proj.apply(x, y); },
        std::span<const float>(normed), state.layers[i], std::span<float>(mixed));
    for (std::size_t c = 0; c < d; ++c) h[c] += mixed[c];
  }
  rms(h, final_norm_, normed);
  dense_gemv(embedding_, normed, logits);
}

std::size_t InferenceModel::weight_bytes() const {
  std::size_t total = (embedding_.size() + final_norm_.size()) * sizeof(float);
  for (const InferenceLayer& l : layers_) {
    total += l.norm.size() * sizeof(float);
    total += l.in_proj.bytes() + l.out_proj.bytes();
    const SsdCoreParams<float>& c = l.core;
    total += (c.conv_weight.size() + c.conv_bias.size() + c.A_log.size() + c.D.size() +
              c.dt_bias.size() + c.norm_weight.size()) *
             sizeof(float);
  }
  return total;
}

std::vector<std::int32_t> generate(const InferenceModel& model,
                                   std::span<const std::int32_t> prompt,
                                   std::size_t n_new, double temperature,
                                   std::uint64_t seed) {
  if (n_new == 0) throw TensorError("generate: n_new must be at least 1");
  if (prompt.empty()) throw TensorError("generate: empty prompt");
  if (temperature < 0.0) throw TensorError("generate: negative temperature");
  const std::size_t vocab = model.config().vocab_size;
  for (std::int32_t id : prompt) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw TensorError("generate: prompt id " + std::to_string(id) +
                        " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Rng rng = make_rng(seed, "generate");
  std::vector<std::int32_t> out(prompt.begin(), prompt.end());
  InferenceModel::State state = model.initial_state();
  std::vector<float> logits(vocab);
  for (std::int32_t id : prompt) model.step(id, state, logits);
  for (std::size_t n = 0; n < n_new; ++n) {
    std::int32_t next = 0;
    if (temperature == 0.0) {
      next = static_cast<std::int32_t>(std::max_element(logits.begin(), logits.end()) -
                                       logits.begin());
    } else {
      const float mx = *std::max_element(logits.begin(), logits.end());
      std::vector<double> w(vocab);
      for (std::size_t v = 0; v < vocab; ++v) {
        w[v] = std::exp((static_cast<double>(logits[v]) - mx) / temperature);
      }
      std::discrete_distribution<std::int32_t> pick(w.begin(), w.end());
      next = pick(rng);
    }
    out.push_back(next);
    if (n + 1 < n_new) model.step(next, state, logits);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Census

const CensusRow& Census::row(std::string_view bucket) const {
  for (const CensusRow& r : rows) {
    if (r.bucket == bucket) return r;
  }
  throw ConfigError("census has no bucket '" + std::string(bucket) + "'");
}

Census param_census(const ModelConfig& c) {
  c.validate();
  const std::uint64_t L = c.n_layer, dm = c.d_model, di = c.d_inner();
  const std::uint64_t h = c.n_heads, ds = c.d_state, conv = di + 2 * ds;
  Census census;
  census.rows = {
      {"Embedding", c.vocab_size * dm, 0.0},
      {"LN", L * (dm + di) + dm, 0.0},
      {"dt_bias", L * h, 0.0},
      {"A", L * h, 0.0},
      {"D", L * h, 0.0},
      {"Conv1d", L * conv * (c.d_conv + 1), 0.0},
      {"In Proj.", L * dm * (2 * di + 2 * ds + h), 0.0},
      {"Out Proj.", L * di * dm, 0.0},
  };
  for (const CensusRow& r : census.rows) census.total += r.count;
  for (CensusRow& r : census.rows) {
    r.percent = 100.0 * static_cast<double>(r.count) / static_cast<double>(census.total);
  }
  return census;
}

std::uint64_t block_forward_ops(const ModelConfig& c, std::size_t L) {
  const std::uint64_t dm = c.d_model, di = c.d_inner(), ds = c.d_state, h = c.n_heads;
  const std::uint64_t conv = di + 2 * ds, proj = 2 * di + 2 * ds + h;
  const std::uint64_t per_token = dm * proj        // in_proj
                                  + conv * c.d_conv  // depthwise conv
                                  + 2 * di * ds      // state update and readout
                                  + di               // D skip
                                  + 2 * di           // gate and norm
                                  + di * dm;         // out_proj
  return per_token * static_cast<std::uint64_t>(L);
}

// ---------------------------------------------------------------------------
// Tokenizer

std::vector<std::int32_t> tokenize(std::string_view text, bool add_bos, bool add_eos) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size() + 2);
  if (add_bos) ids.push_back(kBosId);
  for (char ch : text) ids.push_back(static_cast<unsigned char>(ch));
  if (add_eos) ids.push_back(kEosId);
  return ids;
}

std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= kByteVocab) {
      throw TensorError("detokenize: id " + std::to_string(id) + " outside byte vocabulary");
    }
    if (id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

}  // namespace bimamba

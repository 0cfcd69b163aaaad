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

// The full language model: embedding, pre-norm residual stack of SSD blocks,
// final RMSNorm and a head tied to the embedding. Also the recurrent
// inference model, the parameter census and the byte tokenizer.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "bimamba/fbi_linear.hpp"
#include "bimamba/ssd_block.hpp"
#include "bimamba/tensor.hpp"

namespace bimamba {

enum class BinarizationScope { kNone, kInProj, kInOutProj };

std::string_view scope_name(BinarizationScope scope);
// Accepts none | in_proj | in_proj_and_out_proj, plus the aliases inproj and
// full.
BinarizationScope parse_scope(std::string_view text);

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::string name = "custom";
  std::size_t d_model = 64;
  std::size_t n_layer = 2;
  std::size_t vocab_size = 258;
  std::size_t n_heads = 4;
  std::size_t head_dim = 32;
  std::size_t d_state = 16;
  std::size_t d_conv = 4;
  std::size_t expand = 2;
  BinarizationScope scope = BinarizationScope::kInOutProj;
  std::string precision = "fp32";

  std::size_t d_inner() const { return expand * d_model; }
  bool binarize_in_proj() const { return scope != BinarizationScope::kNone; }
  bool binarize_out_proj() const { return scope == BinarizationScope::kInOutProj; }
  BlockDims block_dims() const;
  void validate() const;

  // Flat key-value form, one `model.<key> = value` per line.
  std::map<std::string, std::string> to_map() const;
  static ModelConfig from_map(const std::map<std::string, std::string>& kv);
};

// Vocabulary of the reference Mamba-2 checkpoints (GPT-NeoX, padded to a
// multiple of 16). Parameter shares and storage sizes of the named sizes
// are accounted against these checkpoints.
inline constexpr std::size_t kReferenceMamba2Vocab = 50288;

// "780M", "1.3B", "2.7B" (the binarized model sizes) and the desk presets
// "tiny" and "small".
ModelConfig model_preset(std::string_view name);
std::vector<std::string> preset_names();
// Config used for parameter and storage accounting of a preset: identical to
// model_preset except that the named sizes use the reference Mamba-2
// vocabulary.
ModelConfig accounting_preset(std::string_view name);

enum class ParamKind {
  kEmbedding,
  kNorm,
  kDtBias,
  kA,
  kD,
  kConv,
  kInProj,
  kOutProj,
  kScale,  // alpha / beta of a binarized projection
};

template <typename TensorT>
struct NamedParamT {
  std::string name;
  TensorT* tensor = nullptr;
  ParamKind kind = ParamKind::kNorm;
  // Latent weight of a binarized projection: clamped after updates.
  bool latent = false;
};
template <typename T>
using NamedParam = NamedParamT<Tensor<T>>;
template <typename T>
using ConstNamedParam = NamedParamT<const Tensor<T>>;

template <typename T>
struct ResidualLayer {
  Tensor<T> norm;  // pre-norm weight, d_model
  SsdBlockParams<T> mixer;
};

template <typename T>
class BiMambaModel {
 public:
  BiMambaModel() = default;

  static BiMambaModel init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  Tensor<T>& embedding() { return embedding_; }
  const Tensor<T>& embedding() const { return embedding_; }
  std::vector<ResidualLayer<T>>& layers() { return layers_; }
  const std::vector<ResidualLayer<T>>& layers() const { return layers_; }
  Tensor<T>& final_norm() { return final_norm_; }
  const Tensor<T>& final_norm() const { return final_norm_; }

  // Logits for `ids`, read as consecutive sequences of `seq_len` tokens.
  // Returns rows x vocab. The head reuses the embedding leaf.
  Var<T> forward(Tape<T>& tape, std::span<const std::int32_t> ids,
                 std::size_t seq_len);
  // Single-sequence evaluation without gradients.
  Tensor<T> logits(std::span<const std::int32_t> ids);

  std::vector<NamedParam<T>> parameters();
  std::vector<ConstNamedParam<T>> parameters() const;
  void set_requires_grad(bool on);
  void zero_grad();
  void clamp_latent();
  // Changes which projections are binarized. Newly binarized layers get
  // scales initialised from their weights.
  void set_scope(BinarizationScope scope);
  void validate() const;

  template <typename U>
  BiMambaModel<U> cast() const;

 private:
  template <typename U>
  friend class BiMambaModel;

  template <typename Self, typename Out>
  static void collect(Self& self, Out& out);

  ModelConfig config_;
  Tensor<T> embedding_;  // vocab x d_model, also the output head
  std::vector<ResidualLayer<T>> layers_;
  Tensor<T> final_norm_;
};

// Weights of one projection at inference time.
class LinearWeights {
 public:
  LinearWeights() = default;
  explicit LinearWeights(Tensor<float> dense) : w_(std::move(dense)) {}
  explicit LinearWeights(PackedMatrix packed) : w_(std::move(packed)) {}

  void apply(std::span<const float> x, std::span<float> y) const;
  bool packed() const { return std::holds_alternative<PackedMatrix>(w_); }
  std::size_t bytes() const;

 private:
  std::variant<Tensor<float>, PackedMatrix> w_;
};

struct InferenceLayer {
  BlockDims dims;
  Tensor<float> norm;
  LinearWeights in_proj;
  SsdCoreParams<float> core;
  LinearWeights out_proj;
};

// Token-at-a-time model over fp32 weights. The dense form materialises W~
// for every projection; the packed form keeps binarized projections as sign
// bits plus scales.
class InferenceModel {
 public:
  struct State {
    std::vector<RecurrentState<float>> layers;
    std::size_t bytes() const;
  };

  static InferenceModel dense(const BiMambaModel<float>& model);
  static InferenceModel packed(const BiMambaModel<float>& model);

  const ModelConfig& config() const { return config_; }
  State initial_state() const;
  // Feeds one token and writes next-token logits.
  void step(std::int32_t token, State& state, std::span<float> logits) const;
  // Bytes held by weight buffers.
  std::size_t weight_bytes() const;

 private:
  ModelConfig config_;
  Tensor<float> embedding_;
  std::vector<InferenceLayer> layers_;
  Tensor<float> final_norm_;
};

// Greedy when temperature == 0, otherwise softmax sampling at the given
// temperature from a stream seeded by `seed`. Output starts with `prompt`.
std::vector<std::int32_t> generate(const InferenceModel& model,
                                   std::span<const std::int32_t> prompt,
                                   std::size_t n_new, double temperature,
                                   std::uint64_t seed = 0);

struct CensusRow {
  std::string bucket;
  std::uint64_t count = 0;
  double percent = 0.0;
};

struct Census {
  std::vector<CensusRow> rows;  // Embedding, LN, dt_bias, A, D, Conv1d, In Proj., Out Proj.
  std::uint64_t total = 0;

  const CensusRow& row(std::string_view bucket) const;
};

// Counts parameters of the architecture by module kind. Binarization scales
// are not architecture parameters and are excluded.
Census param_census(const ModelConfig& config);

// Multiply-accumulate style operation count of one block's forward pass over
// L tokens.
std::uint64_t block_forward_ops(const ModelConfig& config, std::size_t L);

// Byte-level tokenizer: ids 0..255 are bytes.
inline constexpr std::int32_t kBosId = 256;
inline constexpr std::int32_t kEosId = 257;
inline constexpr std::size_t kByteVocab = 258;

std::vector<std::int32_t> tokenize(std::string_view text, bool add_bos = false,
                                   bool add_eos = false);
// Special ids are dropped; ids outside the vocabulary are an error.
std::string detokenize(std::span<const std::int32_t> ids);

extern template class BiMambaModel<float>;
extern template class BiMambaModel<double>;

}  // namespace bimamba

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


// Post-training binarization, the checkpoint container and the storage
// calculator.
//
// Checkpoint layout, all integers little-endian:
//   "BMB1"                      magic
//   u32                         format version (kCheckpointVersion)
//   u32 n, n bytes              config block, "key=value\n" lines
//   u32                         tensor count
//   per tensor:
//     u32 n, n bytes            name
//     u32                       dtype tag (DType)
//     u32                       rank
//     u64 x rank                extents
//     u64                       byte length
//     u64                       absolute byte offset, a multiple of 64
//   payload                     tensors at their offsets, zero filled between

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bimamba/fbi_linear.hpp"
#include "bimamba/model.hpp"

namespace bimamba {

// PTB: every in-scope linear gets W_b = sign(W_f), alpha = column mean |W_f|,
// beta = column mean W_f; everything else is copied. Layers already
// binarized are recomputed from their latent weights, so the map is
// idempotent. Throws ConfigError when the model has binarized layers outside
// `scope`.
BiMambaModel<float> ptb_binarize(const BiMambaModel<float>& model,
                                 BinarizationScope scope);

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 64;

enum class DType : std::uint32_t {
  kFp32 = 0,
  kPackedBits = 1,
  kFp32Alpha = 2,
  kFp32Beta = 3,
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DirectoryEntry {
  std::string name;
  DType dtype = DType::kFp32;
  std::vector<std::uint64_t> extents;
  std::uint64_t byte_length = 0;
  std::uint64_t offset = 0;
};

struct CheckpointHeader {
  std::uint32_t version = 0;
  std::map<std::string, std::string> config;
  std::vector<DirectoryEntry> directory;
};

struct LoadedCheckpoint {
  BiMambaModel<float> model;
  bool packed = false;
  // Packed projections by weight name; empty for unpacked checkpoints. In
  // the model those weights hold the unpacked signs.
  std::map<std::string, PackedMatrix> packed_weights;
};

// With `packed`, binarized projection weights are stored as sign bits and
// their latent values are dropped.
std::vector<std::uint8_t> serialize_checkpoint(const BiMambaModel<float>& model,
                                               bool packed);
// Validates magic, version and the whole directory before reading payload.
CheckpointHeader parse_checkpoint_header(std::span<const std::uint8_t> bytes);
LoadedCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

// Writes via a temporary "<path>.incomplete" that is renamed on success.
void write_checkpoint(const BiMambaModel<float>& model, const std::string& path,
                      bool packed);
LoadedCheckpoint read_checkpoint(const std::string& path);

struct StorageBucket {
  std::string name;
  std::uint64_t params = 0;
  bool binarized = false;
  std::uint64_t baseline_bytes = 0;
  std::uint64_t stored_bytes = 0;
};

struct StorageReport {
  std::string model;
  BinarizationScope scope = BinarizationScope::kNone;
  std::vector<StorageBucket> buckets;
  std::uint64_t total_params = 0;
  std::uint64_t binarized_params = 0;
  std::uint64_t scale_bytes = 0;  // alpha and beta, fp32
  std::uint64_t baseline_bytes = 0;
  std::uint64_t binarized_bytes = 0;

  // 1 - binarized / baseline, in percent.
  double compression_percent() const;
  // Binary gigabytes (2^30 bytes).
  double baseline_gb() const;
  double binarized_gb() const;

  std::string to_tsv() const;
  std::string to_kv() const;
};

// Baseline stores every parameter in 16 bits. Binarized projections cost one
// bit per weight plus fp32 alpha and beta per input column.
StorageReport storage_report(const ModelConfig& config, BinarizationScope scope);

}  // namespace bimamba

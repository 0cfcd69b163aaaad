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

#include "bimamba/store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <set>
#include <sstream>

namespace bimamba {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

// ---------------------------------------------------------------------------
// PTB

BiMambaModel<float> ptb_binarize(const BiMambaModel<float>& model,
                                 BinarizationScope scope) {
  const ModelConfig& c = model.config();
  const bool in_scope_in = scope != BinarizationScope::kNone;
  const bool in_scope_out = scope == BinarizationScope::kInOutProj;
  if ((c.binarize_in_proj() && !in_scope_in) || (c.binarize_out_proj() && !in_scope_out)) {
    throw ConfigError("ptb_binarize: model is binarized as " +
                      std::string(scope_name(c.scope)) + ", wider than requested scope " +
                      std::string(scope_name(scope)));
  }
  BiMambaModel<float> out = model;
  out.set_requires_grad(false);
  out.set_scope(scope);
  for (ResidualLayer<float>& layer : out.layers()) {
    if (in_scope_in) layer.mixer.in_proj.init_scales_from_weight();
    if (in_scope_out) layer.mixer.out_proj.init_scales_from_weight();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Byte helpers

namespace {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(U));
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void put_raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void pad_to(std::size_t offset) {
    if (bytes_.size() < offset) bytes_.resize(offset, 0);
  }
  std::size_t size() const { return bytes_.size(); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <typename U>
  U get(const std::string& what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_string(const std::string& what, std::size_t max_len) {
    const auto n = get<std::uint32_t>(what + " length");
    if (n > max_len) {
      throw CheckpointError("checkpoint: " + what + " length " + std::to_string(n) +
                            " exceeds limit " + std::to_string(max_len));
    }
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError("checkpoint truncated while reading " + what + " at byte " +
                            std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

constexpr std::size_t kMaxNameBytes = 4096;
constexpr std::size_t kMaxConfigBytes = 1 << 20;
constexpr std::uint32_t kMaxRank = 8;

std::size_t align_up(std::size_t v) {
  return (v + kPayloadAlignment - 1) / kPayloadAlignment * kPayloadAlignment;
}

struct PendingTensor {
  DirectoryEntry entry;
  const void* data = nullptr;
  std::vector<std::uint64_t> words;  // owned payload for packed weights
};

std::string config_text(const BiMambaModel<float>& model, bool packed) {
  std::map<std::string, std::string> kv = model.config().to_map();
  kv["checkpoint.packed"] = packed ? "1" : "0";
  std::string text;
  for (const auto& [k, v] : kv) text += k + "=" + v + "\n";
  return text;
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw CheckpointError("checkpoint config: malformed line '" + line + "'");
    }
    if (!kv.emplace(line.substr(0, eq), line.substr(eq + 1)).second) {
      throw CheckpointError("checkpoint config: duplicate key " + line.substr(0, eq));
    }
  }
  return kv;
}

std::size_t element_bytes(DType dtype, const std::vector<std::uint64_t>& extents,
                          const std::string& name) {
  std::uint64_t count = 1;
  for (std::uint64_t e : extents) {
    if (e != 0 && count > (std::uint64_t{1} << 40) / e) {
      throw CheckpointError("checkpoint tensor '" + name + "': extents overflow");
    }
    count *= e;
  }
  if (dtype == DType::kPackedBits) {
    if (extents.size() != 2) {
      throw CheckpointError("checkpoint tensor '" + name + "': packed bits need rank 2");
    }
    return static_cast<std::size_t>(extents[0] * ((extents[1] + 63) / 64) * 8);
  }
  return static_cast<std::size_t>(count * 4);
}

}  // namespace

// ---------------------------------------------------------------------------
// Writer

std::vector<std::uint8_t> serialize_checkpoint(const BiMambaModel<float>& model,
                                               bool packed) {
  model.validate();
  std::vector<PendingTensor> tensors;
  for (const ConstNamedParam<float>& p : model.parameters()) {
    PendingTensor t;
    t.entry.name = p.name;
    for (std::size_t e : p.tensor->shape()) t.entry.extents.push_back(e);
    if (p.kind == ParamKind::kScale) {
      const bool is_alpha = p.name.size() >= 6 && p.name.ends_with(".alpha");
      t.entry.dtype = is_alpha ? DType::kFp32Alpha : DType::kFp32Beta;
    }
    if (packed && p.latent) {
      t.entry.dtype = DType::kPackedBits;
      const Tensor<float> signs = binarize(*p.tensor);
      const std::size_t cols = signs.dim(1);
      PackedMatrix pm = PackedMatrix::pack(signs, std::vector<float>(cols, 1.0f),
                                           std::vector<float>(cols, 0.0f));
      t.words.assign(pm.words().begin(), pm.words().end());
      t.entry.byte_length = t.words.size() * 8;
    } else {
      t.data = p.tensor->ptr();
      t.entry.byte_length = p.tensor->size() * sizeof(float);
    }
    tensors.push_back(std::move(t));
  }

  const std::string config = config_text(model, packed);
  std::size_t header = 4 + 4 + 4 + config.size() + 4;
  for (const PendingTensor& t : tensors) {
    header += 4 + t.entry.name.size() + 4 + 4 + 8 * t.entry.extents.size() + 8 + 8;
  }
  std::size_t offset = align_up(header);
  for (PendingTensor& t : tensors) {
    t.entry.offset = offset;
    offset = align_up(offset + t.entry.byte_length);
  }

  ByteWriter w;
  w.put_raw("BMB1", 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(config);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const PendingTensor& t : tensors) {
    w.put_string(t.entry.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.entry.dtype));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(t.entry.extents.size()));
    for (std::uint64_t e : t.entry.extents) w.put<std::uint64_t>(e);
    w.put<std::uint64_t>(t.entry.byte_length);
    w.put<std::uint64_t>(t.entry.offset);
  }
  for (const PendingTensor& t : tensors) {
    w.pad_to(t.entry.offset);
    w.put_raw(t.words.empty() ? t.data : t.words.data(), t.entry.byte_length);
  }
  return std::move(w.bytes());
}

void write_checkpoint(const BiMambaModel<float>& model, const std::string& path,
                      bool packed) {
  const std::vector<std::uint8_t> bytes = serialize_checkpoint(model, packed);
  const std::string tmp = path + ".incomplete";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open " + tmp + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Reader

CheckpointHeader parse_checkpoint_header(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  char magic[4];
  for (char& ch : magic) ch = static_cast<char>(r.get<std::uint8_t>("magic"));
  if (std::memcmp(magic, "BMB1", 4) != 0) {
    throw CheckpointError("checkpoint: bad magic (not a BMB1 file)");
  }
  CheckpointHeader h;
  h.version = r.get<std::uint32_t>("version");
  if (h.version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported format version " +
                          std::to_string(h.version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  h.config = parse_config_text(r.get_string("config block", kMaxConfigBytes));
  const auto count = r.get<std::uint32_t>("tensor count");
  // Smallest possible entry is 32 bytes; reject counts the file cannot hold.
  if (static_cast<std::uint64_t>(count) * 32 > bytes.size()) {
    throw CheckpointError("checkpoint: tensor count " + std::to_string(count) +
                          " exceeds what the file can hold");
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    DirectoryEntry e;
    e.name = r.get_string("name of tensor #" + std::to_string(i), kMaxNameBytes);
    const std::string who = "checkpoint tensor '" + e.name + "'";
    const auto tag = r.get<std::uint32_t>(e.name + " dtype");
    if (tag > static_cast<std::uint32_t>(DType::kFp32Beta)) {
      throw CheckpointError(who + ": unknown dtype tag " + std::to_string(tag));
    }
    e.dtype = static_cast<DType>(tag);
    const auto rank = r.get<std::uint32_t>(e.name + " rank");
    if (rank == 0 || rank > kMaxRank) {
      throw CheckpointError(who + ": invalid rank " + std::to_string(rank));
    }
    for (std::uint32_t k = 0; k < rank; ++k) e.extents.push_back(r.get<std::uint64_t>(e.name + " extent"));
    e.byte_length = r.get<std::uint64_t>(e.name + " byte length");
    e.offset = r.get<std::uint64_t>(e.name + " offset");
    if (e.byte_length != element_bytes(e.dtype, e.extents, e.name)) {
      throw CheckpointError(who + ": byte length " + std::to_string(e.byte_length) +
                            " does not match its extents and dtype");
    }
    if (e.offset % kPayloadAlignment != 0) {
      throw CheckpointError(who + ": offset " + std::to_string(e.offset) +
                            " is not 64-byte aligned");
    }
    if (e.offset > bytes.size() || e.byte_length > bytes.size() - e.offset) {
      throw CheckpointError(who + ": payload [" + std::to_string(e.offset) + ", +" +
                            std::to_string(e.byte_length) + ") runs past end of file (" +
                            std::to_string(bytes.size()) + " bytes)");
    }
    h.directory.push_back(std::move(e));
  }
  const std::size_t header_end = r.pos();
  std::vector<const DirectoryEntry*> by_offset;
  std::set<std::string> names;
  for (const DirectoryEntry& e : h.directory) {
    if (!names.insert(e.name).second) {
      throw CheckpointError("checkpoint tensor '" + e.name + "': duplicate name");
    }
    if (e.offset < header_end) {
      throw CheckpointError("checkpoint tensor '" + e.name + "': payload overlaps the header");
    }
    by_offset.push_back(&e);
  }
  std::sort(by_offset.begin(), by_offset.end(),
            [](const DirectoryEntry* a, const DirectoryEntry* b) { return a->offset < b->offset; });
  for (std::size_t i = 1; i < by_offset.size(); ++i) {
    const DirectoryEntry& prev = *by_offset[i - 1];
    if (prev.offset + prev.byte_length > by_offset[i]->offset) {
      throw CheckpointError("checkpoint tensor '" + by_offset[i]->name +
                            "': payload overlaps tensor '" + prev.name + "'");
    }
  }
  return h;
}

LoadedCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  const CheckpointHeader h = parse_checkpoint_header(bytes);
  std::map<std::string, std::string> model_kv;
  bool packed = false;
  const auto valid_keys = ModelConfig{}.to_map();
  for (const auto& [k, v] : h.config) {
    if (k == "checkpoint.packed") {
      if (v != "0" && v != "1") throw CheckpointError("checkpoint config: bad packed flag " + v);
      packed = v == "1";
    } else if (valid_keys.count(k)) {
      model_kv[k] = v;
    } else {
      throw CheckpointError("checkpoint config: unknown key " + k);
    }
  }
  ModelConfig config;
  try {
    config = ModelConfig::from_map(model_kv);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }

  LoadedCheckpoint out;
  out.packed = packed;
  out.model = BiMambaModel<float>::init(config, 0);
  std::map<std::string, const DirectoryEntry*> dir;
  for (const DirectoryEntry& e : h.directory) dir[e.name] = &e;

  auto params = out.model.parameters();
  if (params.size() != dir.size()) {
    throw CheckpointError("checkpoint: directory lists " + std::to_string(dir.size()) +
                          " tensors, model needs " + std::to_string(params.size()));
  }
  std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> scales;
  for (const NamedParam<float>& p : params) {
    auto it = dir.find(p.name);
    if (it == dir.end()) {
      throw CheckpointError("checkpoint tensor '" + p.name + "': missing from directory");
    }
    const DirectoryEntry& e = *it->second;
    const std::string who = "checkpoint tensor '" + e.name + "'";
    std::vector<std::uint64_t> want(p.tensor->shape().begin(), p.tensor->shape().end());
    if (e.extents != want) {
      throw CheckpointError(who + ": extents do not match the configured model");
    }
    DType expected = DType::kFp32;
    if (p.kind == ParamKind::kScale) {
      expected = p.name.ends_with(".alpha") ? DType::kFp32Alpha : DType::kFp32Beta;
    } else if (packed && p.latent) {
      expected = DType::kPackedBits;
    }
    if (e.dtype != expected) {
      throw CheckpointError(who + ": dtype tag " +
                            std::to_string(static_cast<std::uint32_t>(e.dtype)) +
                            " where " + std::to_string(static_cast<std::uint32_t>(expected)) +
                            " is required");
    }
    const std::uint8_t* src = bytes.data() + e.offset;
    if (e.dtype == DType::kPackedBits) {
      std::vector<std::uint64_t> words(e.byte_length / 8);
      std::memcpy(words.data(), src, e.byte_length);
      const std::size_t cols = static_cast<std::size_t>(e.extents[1]);
      PackedMatrix pm;
      try {
        pm = PackedMatrix::from_words(static_cast<std::size_t>(e.extents[0]), cols,
                                      std::move(words), std::vector<float>(cols, 1.0f),
                                      std::vector<float>(cols, 0.0f));
      } catch (const TensorError& err) {
        throw CheckpointError(who + ": " + err.what());
      }
      *p.tensor = pm.unpack();
      out.packed_weights[p.name] = std::move(pm);
    } else {
      std::memcpy(p.tensor->ptr(), src, e.byte_length);
    }
  }
  // Packed matrices carry the real scales once every tensor is loaded.
  for (auto& [name, pm] : out.packed_weights) {
    const std::string base = name.substr(0, name.size() - std::string(".weight").size());
    for (const NamedParam<float>& p : params) {
      if (p.name == base + ".alpha") {
        const auto& alpha = *p.tensor;
        scales[name].first.assign(alpha.data().begin(), alpha.data().end());
      } else if (p.name == base + ".beta") {
        const auto& beta = *p.tensor;
        scales[name].second.assign(beta.data().begin(), beta.data().end());
      }
    }
    std::vector<std::uint64_t> words(pm.words().begin(), pm.words().end());
    pm = PackedMatrix::from_words(pm.rows(), pm.cols(), std::move(words),
                                  std::move(scales[name].first), std::move(scales[name].second));
  }
  try {
    out.model.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }
  return out;
}

LoadedCheckpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Storage

double StorageReport::compression_percent() const {
  if (baseline_bytes == 0) return 0.0;
  return 100.0 * (1.0 - static_cast<double>(binarized_bytes) /
                            static_cast<double>(baseline_bytes));
}

double StorageReport::baseline_gb() const {
  return static_cast<double>(baseline_bytes) / static_cast<double>(1ull << 30);
}

double StorageReport::binarized_gb() const {
  return static_cast<double>(binarized_bytes) / static_cast<double>(1ull << 30);
}

std::string StorageReport::to_tsv() const {
  std::ostringstream os;
  os << "# baseline: every parameter stored in 16 bits; GB = 2^30 bytes\n";
  os << "bucket\tparams\tbinarized\tbaseline_bytes\tstored_bytes\n";
  for (const StorageBucket& b : buckets) {
    os << b.name << '\t' << b.params << '\t' << (b.binarized ? 1 : 0) << '\t'
       << b.baseline_bytes << '\t' << b.stored_bytes << '\n';
  }
  os << "alpha_beta\t-\t-\t0\t" << scale_bytes << '\n';
  os << std::fixed << std::setprecision(2);
  os << "total\t" << total_params << "\t-\t" << baseline_bytes << '\t' << binarized_bytes
     << '\n';
  return os.str();
}

std::string StorageReport::to_kv() const {
  std::ostringstream os;
  os << "model=" << model << '\n'
     << "scope=" << scope_name(scope) << '\n'
     << "baseline_bits_per_param=16\n"
     << "total_params=" << total_params << '\n'
     << "binarized_params=" << binarized_params << '\n'
     << "alpha_beta_bytes=" << scale_bytes << '\n'
     << "baseline_bytes=" << baseline_bytes << '\n'
     << "binarized_bytes=" << binarized_bytes << '\n'
     << std::fixed << std::setprecision(2) << "baseline_gb=" << baseline_gb() << '\n'
     << "binarized_gb=" << binarized_gb() << '\n'
     << std::setprecision(1) << "compression_percent=" << compression_percent() << '\n';
  return os.str();
}

StorageReport storage_report(const ModelConfig& config, BinarizationScope scope) {
  ModelConfig c = config;
  c.scope = scope;
  const Census census = param_census(c);
  StorageReport rep;
  rep.model = c.name;
  rep.scope = scope;
  rep.total_params = census.total;
  for (const CensusRow& row : census.rows) {
    StorageBucket b;
    b.name = row.bucket;
    b.params = row.count;
    b.binarized = (row.bucket == "In Proj." && c.binarize_in_proj()) ||
                  (row.bucket == "Out Proj." && c.binarize_out_proj());
    b.baseline_bytes = row.count * 2;
    b.stored_bytes = b.binarized ? (row.count + 7) / 8 : row.count * 2;
    if (b.binarized) rep.binarized_params += row.count;
    rep.baseline_bytes += b.baseline_bytes;
    rep.binarized_bytes += b.stored_bytes;
    rep.buckets.push_back(std::move(b));
  }
  // One alpha and one beta per input column of each binarized projection.
  const std::uint64_t L = c.n_layer;
  if (c.binarize_in_proj()) rep.scale_bytes += L * 2 * c.d_model * 4;
  if (c.binarize_out_proj()) rep.scale_bytes += L * 2 * c.d_inner() * 4;
  rep.binarized_bytes += rep.scale_bytes;
  return rep;
}

}  // namespace bimamba

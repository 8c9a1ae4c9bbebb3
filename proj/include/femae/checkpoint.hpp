#pragma once

// Checkpoint archive, format version 1:
//   line 1   "FEMAE-CKPT 1"
//   line 2   JSON manifest: config echo, metadata, tensor table (name, shape,
//            dtype, offset, bytes), payload size and CRC-32 of the payload
//   rest     concatenated little-endian float32 tensor data
// Optimizer moments are stored as ordinary tensors named adam.m.<param> / adam.v.<param>.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <sstream>
#include <type_traits>
#include <string>
#include <vector>

#include <json.hpp>

#include "femae/config.hpp"
#include "femae/errors.hpp"
#include "femae/network.hpp"
#include "femae/optim.hpp"
#include "femae/tensor.hpp"

namespace femae {

inline constexpr const char* kCheckpointMagic = "FEMAE-CKPT";
inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointName = "model.ckpt";

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct Checkpoint {
  ModelConfig config;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor<float>* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t.value;
    return nullptr;
  }
};

namespace ckpt_detail {

inline std::uint32_t crc32_of(const std::string& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos), n);
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFFu));
}

inline float get_f32(const char* p) {
  std::uint32_t u = 0;
  for (int i = 0; i < 4; ++i) u |= std::uint32_t(static_cast<unsigned char>(p[i])) << (8 * i);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

}  // namespace ckpt_detail

/// Serialized bytes of a checkpoint. Deterministic: equal checkpoints give equal bytes.
inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string payload;
  nlohmann::json table = nlohmann::json::array();
  std::set<std::string> names;
  for (const auto& t : ck.tensors) {
    if (!names.insert(t.name).second) throw UsageError("duplicate tensor name '" + t.name + "' in checkpoint");
    table.push_back({{"name", t.name},
                     {"shape", t.value.shape()},
                     {"dtype", "f32"},
                     {"offset", payload.size()},
                     {"bytes", t.value.size() * 4}});
    for (float v : t.value.storage()) ckpt_detail::put_f32(payload, v);
  }
  nlohmann::json config = nlohmann::json::object();
  for (const auto& [k, v] : model_items(ck.config)) config[k] = v;
  nlohmann::json manifest = {{"format", kCheckpointVersion}, {"config", config},       {"meta", ck.meta},
                             {"tensors", table},            {"payload_bytes", payload.size()},
                             {"crc32", ckpt_detail::crc32_of(payload)}};
  return std::string(kCheckpointMagic) + " " + std::to_string(kCheckpointVersion) + "\n" + manifest.dump() + "\n" +
         payload;
}

/// Parses checkpoint bytes. The manifest is validated before any payload is read.
inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& source = "checkpoint") {
  auto fail = [&](const std::string& m) { throw LoadError(source + ": " + m); };
  const auto nl1 = bytes.find('\n');
  if (nl1 == std::string::npos) fail("not a checkpoint (no header line)");
  std::istringstream header(bytes.substr(0, nl1));
  std::string magic;
  int version = 0;
  header >> magic >> version;
  if (magic != kCheckpointMagic) fail("not a checkpoint (bad magic '" + magic + "')");
  if (version != kCheckpointVersion) {
    fail("unsupported format version " + std::to_string(version) + " (expected " +
         std::to_string(kCheckpointVersion) + ")");
  }
  const auto nl2 = bytes.find('\n', nl1 + 1);
  if (nl2 == std::string::npos) fail("truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(nl1 + 1, nl2 - nl1 - 1));
  } catch (const std::exception& e) {
    fail(std::string("malformed manifest: ") + e.what());
  }
  Checkpoint ck;
  std::size_t payload_bytes = 0;
  std::uint32_t crc = 0;
  try {
    if (manifest.at("format").get<int>() != kCheckpointVersion) fail("manifest format version mismatch");
    std::vector<std::pair<std::string, std::string>> items;
    for (const auto& [k, v] : manifest.at("config").items()) items.emplace_back(k, v.get<std::string>());
    ck.config = model_from_items(items);
    ck.meta = manifest.at("meta");
    payload_bytes = manifest.at("payload_bytes").get<std::size_t>();
    crc = manifest.at("crc32").get<std::uint32_t>();
    std::size_t expect_offset = 0;
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<Shape>();
      if (t.at("dtype").get<std::string>() != "f32") fail("tensor '" + name + "' has unsupported dtype");
      const auto offset = t.at("offset").get<std::size_t>();
      const auto nbytes = t.at("bytes").get<std::size_t>();
      if (offset != expect_offset || nbytes != shape_numel(shape) * 4) fail("inconsistent tensor table at '" + name + "'");
      expect_offset += nbytes;
      ck.tensors.push_back({name, Tensor<float>(shape)});
    }
    if (expect_offset != payload_bytes) fail("tensor table does not cover the payload");
  } catch (const LoadError&) {
    throw;
  } catch (const std::exception& e) {
    fail(std::string("invalid manifest: ") + e.what());
  }
  const std::size_t have = bytes.size() - (nl2 + 1);
  if (have < payload_bytes) {
    fail("truncated payload: expected " + std::to_string(payload_bytes) + " bytes, found " + std::to_string(have));
  }
  if (have > payload_bytes) fail("trailing bytes after payload");
  const std::string payload = bytes.substr(nl2 + 1);
  if (ckpt_detail::crc32_of(payload) != crc) fail("payload checksum mismatch (file is corrupted)");
  std::size_t pos = 0;
  for (auto& t : ck.tensors) {
    for (auto& v : t.value.storage()) {
      v = ckpt_detail::get_f32(payload.data() + pos);
      pos += 4;
    }
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write checkpoint '" + path.string() + "'");
  const std::string bytes = encode_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw UsageError("write failed for '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open checkpoint '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint
// ---------------------------------------------------------------------------

/// Snapshot of every model parameter, plus optimizer moments when `adam` is given.
template <typename T>
Checkpoint capture(const PointFemae<T>& model, const std::type_identity_t<AdamState<T>>* adam = nullptr,
                   nlohmann::json meta = nlohmann::json::object()) {
  Checkpoint ck;
  ck.config = model.config();
  ck.meta = std::move(meta);
  for (const auto& e : model.params().entries()) ck.tensors.push_back({e.param->name, e.param->value.template cast<float>()});
  if (adam) {
    ck.meta["adam_step"] = adam->step;
    for (const auto& [name, m] : adam->m) ck.tensors.push_back({"adam.m." + name, m.template cast<float>()});
    for (const auto& [name, v] : adam->v) ck.tensors.push_back({"adam.v." + name, v.template cast<float>()});
  }
  return ck;
}

/// Full: every tensor. Encoder: embedder, positional encoder, transformer, LEM and encoder norm only.
enum class RestoreScope { Full, Encoder };

namespace ckpt_detail {

inline bool encoder_group(ParamGroup g) {
  return g == ParamGroup::Embedder || g == ParamGroup::PosEncoder || g == ParamGroup::Transformer ||
         g == ParamGroup::Lem || g == ParamGroup::EncoderNorm;
}

// Keys that do not change any stored tensor shape or meaning for the given scope.
inline bool ignorable_key(const std::string& k, RestoreScope scope) {
  if (k == "init_seed" || k == "mask_ratio" || k == "local_blocks" || k == "points") return true;
  if (scope == RestoreScope::Encoder) return k == "num_classes" || k == "head_hidden" || k == "decoder_depth";
  return false;
}

}  // namespace ckpt_detail

/// Copies checkpoint tensors into `model` (and `adam` when given). Mismatched
/// configuration keys, missing or unknown tensors and shape mismatches are LoadErrors.
template <typename T>
void restore(PointFemae<T>& model, const Checkpoint& ck, std::type_identity_t<AdamState<T>>* adam = nullptr,
             RestoreScope scope = RestoreScope::Full) {
  const auto want = model_items(model.config());
  const auto have = model_items(ck.config);
  for (std::size_t i = 0; i < want.size(); ++i) {
    if (ckpt_detail::ignorable_key(want[i].first, scope)) continue;
    if (want[i].second != have[i].second) {
      throw LoadError("checkpoint config mismatch: " + want[i].first + " is " + have[i].second +
                      " in the checkpoint but " + want[i].second + " in the model");
    }
  }
  std::set<std::string> used;
  for (const auto& e : model.params().entries()) {
    if (scope == RestoreScope::Encoder && !ckpt_detail::encoder_group(e.group)) continue;
    const Tensor<float>* t = ck.find(e.param->name);
    if (!t) throw LoadError("checkpoint has no tensor '" + e.param->name + "'");
    if (t->shape() != e.param->value.shape()) {
      throw LoadError("tensor '" + e.param->name + "' has shape " + shape_str(t->shape()) + " in the checkpoint, model expects " +
                      shape_str(e.param->value.shape()));
    }
    e.param->value = t->template cast<T>();
    used.insert(e.param->name);
  }
  for (const auto& t : ck.tensors) {
    if (t.name.rfind("adam.", 0) == 0) continue;
    if (!model.params().find(t.name)) throw LoadError("unknown tensor name '" + t.name + "' in checkpoint");
  }
  if (adam) {
    *adam = AdamState<T>{};
    if (ck.meta.contains("adam_step")) adam->step = ck.meta["adam_step"].get<std::size_t>();
    for (const auto& t : ck.tensors) {
      const bool is_m = t.name.rfind("adam.m.", 0) == 0, is_v = t.name.rfind("adam.v.", 0) == 0;
      if (!is_m && !is_v) continue;
      const std::string pname = t.name.substr(7);
      if (!model.params().find(pname)) throw LoadError("optimizer state for unknown tensor '" + pname + "'");
      (is_m ? adam->m : adam->v)[pname] = t.value.template cast<T>();
    }
  }
}

}  // namespace femae

#pragma once

// MVCK checkpoint files: "MVCK", u16 version, u32-length JSON metadata, u32
// tensor count, then per tensor: u16-length name, u8 dtype (0 = f32,
// 1 = f64), u8 rank, u32 dims, little-endian payload.

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "mindvis/autograd.hpp"

namespace mindvis {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, Tensor> tensors;
  // Tensors listed here are stored as f32; everything else as f64.
  std::map<std::string, DType> dtypes;

  bool operator==(const Checkpoint& o) const { return meta == o.meta && tensors == o.tensors; }
};

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::vector<unsigned char> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Copies every parameter value under `prefix + name`.
void put_params(Checkpoint& ckpt, const ParamStore& store, const std::string& prefix = "");
// Loads values for every parameter of the store; a missing name or a shape
// mismatch is an error. Extra checkpoint tensors are ignored unless strict.
void get_params(const Checkpoint& ckpt, ParamStore& store, const std::string& prefix = "", bool strict = false);

// Throws ConfigError when the checkpoint was written under another config.
void require_config_hash(const Checkpoint& ckpt, const std::string& expected);

std::string sha1_hex(const std::string& data);

}  // namespace mindvis

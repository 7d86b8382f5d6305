#include "mindvis/checkpoint.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>

#include "mindvis/binio.hpp"
#include "mindvis/errors.hpp"

namespace mindvis {

namespace {
constexpr char kMagic[4] = {'M', 'V', 'C', 'K'};
constexpr std::uint16_t kVersion = 1;
}  // namespace

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.bytes(kMagic, 4);
  w.put<std::uint16_t>(kVersion);
  w.str32(ckpt.meta.dump());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    auto it = ckpt.dtypes.find(name);
    const DType dt = it == ckpt.dtypes.end() ? DType::F64 : it->second;
    w.str16(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(dt));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.ndim()));
    for (int d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    if (dt == DType::F32) {
      for (double v : t.storage()) w.put<float>(static_cast<float>(v));
    } else {
      w.bytes(t.storage().data(), t.size() * sizeof(double));
    }
  }
  return w.buffer();
}

Checkpoint decode_checkpoint(std::vector<unsigned char> bytes) {
  binio::Reader r(std::move(bytes), "checkpoint");
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kMagic)) throw FormatError("checkpoint: bad magic (not an MVCK file)");
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) {
    throw VersionError("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                       std::to_string(kVersion) + ")");
  }
  Checkpoint c;
  try {
    c.meta = nlohmann::json::parse(r.str32());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("checkpoint: metadata is not valid JSON: ") + e.what());
  }
  const auto n = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str16();
    const auto dt = r.get<std::uint8_t>();
    if (dt > 1) throw FormatError("checkpoint: unknown dtype code for " + name);
    const auto rank = r.get<std::uint8_t>();
    std::vector<int> shape;
    std::size_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      shape.push_back(static_cast<int>(r.get<std::uint32_t>()));
      numel *= static_cast<std::size_t>(shape.back());
    }
    if (numel * (dt ? 8 : 4) > r.remaining()) throw TruncatedError("checkpoint: tensor " + name + " runs past end of file");
    Tensor t(shape);
    if (dt == 0) {
      for (double& v : t.values()) v = static_cast<double>(r.get<float>());
      c.dtypes[name] = DType::F32;
    } else {
      r.bytes(t.storage().data(), numel * sizeof(double));
    }
    if (!c.tensors.emplace(std::move(name), std::move(t)).second) throw FormatError("checkpoint: duplicate tensor name");
  }
  if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string tmp = path + ".tmp";
  binio::write_file(tmp, encode_checkpoint(ckpt));
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw Error("cannot move checkpoint into place at " + path);
}

Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(binio::read_file(path)); }

void put_params(Checkpoint& ckpt, const ParamStore& store, const std::string& prefix) {
  for (const auto& [name, p] : store) ckpt.tensors[prefix + name] = p.value;
}

void get_params(const Checkpoint& ckpt, ParamStore& store, const std::string& prefix, bool strict) {
  for (auto& [name, p] : store) {
    auto it = ckpt.tensors.find(prefix + name);
    if (it == ckpt.tensors.end()) throw FormatError("checkpoint has no tensor named " + prefix + name);
    if (it->second.shape() != p.value.shape()) {
      throw ShapeError("checkpoint tensor " + prefix + name + " has shape " + shape_str(it->second.shape()) +
                       ", model expects " + shape_str(p.value.shape()));
    }
    p.value = it->second;
  }
  if (strict) {
    for (const auto& [name, t] : ckpt.tensors) {
      if (name.rfind(prefix, 0) == 0 && !store.contains(name.substr(prefix.size()))) {
        throw FormatError("checkpoint tensor " + name + " does not belong to the model");
      }
    }
  }
}

void require_config_hash(const Checkpoint& ckpt, const std::string& expected) {
  const std::string got = ckpt.meta.value("config_hash", std::string());
  if (got != expected) {
    throw ConfigError("checkpoint was written under config " + (got.empty() ? std::string("<none>") : got) +
                      ", current config is " + expected);
  }
}

std::string sha1_hex(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha1(), nullptr) != 1) throw Error("sha1 digest failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

}  // namespace mindvis

#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohff/bytes.hpp"
#include "cohff/optim.hpp"
#include "cohff/tensor.hpp"

namespace cohff {

// Parameter container: magic "CKPT", u16 version, u32 entry count, entries of
// {u32 name_len, name, u8 ndim, ndim x u32 dims, numel x f64}. Little-endian,
// bit-exact round trip.
constexpr char kCkptMagic[4] = {'C', 'K', 'P', 'T'};
constexpr uint16_t kCkptVersion = 1;

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline std::vector<uint8_t> encode_tensors(const std::vector<NamedTensor>& entries) {
  ByteWriter w;
  w.bytes(kCkptMagic, 4);
  w.u16(kCkptVersion);
  w.u32(static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) {
    w.u32(static_cast<uint32_t>(e.name.size()));
    w.str(e.name);
    w.u8(static_cast<uint8_t>(e.tensor.ndim()));
    for (size_t d : e.tensor.shape()) w.u32(static_cast<uint32_t>(d));
    for (double v : e.tensor.values()) w.f64(v);
  }
  return w.take();
}

inline std::vector<NamedTensor> decode_tensors(const std::vector<uint8_t>& buf) {
  ByteReader r(buf);
  std::string magic;
  if (!r.str(magic, 4) || magic != std::string(kCkptMagic, 4))
    throw std::runtime_error("checkpoint: bad magic");
  uint16_t version;
  if (!r.u16(version)) throw std::runtime_error("checkpoint: truncated header");
  if (version != kCkptVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  uint32_t count;
  if (!r.u32(count)) throw std::runtime_error("checkpoint: truncated header");
  std::vector<NamedTensor> out;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len;
    if (!r.u32(name_len)) throw std::runtime_error("checkpoint: truncated entry");
    NamedTensor e;
    if (!r.str(e.name, name_len)) throw std::runtime_error("checkpoint: truncated name");
    uint8_t ndim;
    if (!r.u8(ndim)) throw std::runtime_error("checkpoint: truncated entry");
    std::vector<size_t> shape(ndim);
    size_t numel = 1;
    for (uint8_t d = 0; d < ndim; ++d) {
      uint32_t dim;
      if (!r.u32(dim)) throw std::runtime_error("checkpoint: truncated shape");
      shape[d] = dim;
      numel *= dim;
    }
    if (r.remaining() < numel * 8)
      throw std::runtime_error("checkpoint: truncated values for '" + e.name + "'");
    std::vector<double> values(numel);
    for (size_t k = 0; k < numel; ++k) r.f64(values[k]);
    e.tensor = Tensor::from(std::move(shape), std::move(values));
    out.push_back(std::move(e));
  }
  return out;
}

inline void save_checkpoint(const ParamStore& params, const std::string& path) {
  std::vector<NamedTensor> entries;
  for (const auto& p : params.all()) entries.push_back({p->name, p->tensor});
  const std::vector<uint8_t> buf = encode_tensors(entries);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for write");
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

// Loads values into an existing ParamStore; every stored entry must match a
// registered parameter in name and shape.
inline void load_checkpoint(ParamStore& params, const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  std::vector<uint8_t> buf((std::istreambuf_iterator<char>(f)),
                           std::istreambuf_iterator<char>());
  for (auto& e : decode_tensors(buf)) {
    Parameter& p = params.at(e.name);
    if (p.tensor.shape() != e.tensor.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + e.name + "'");
    p.tensor.values() = e.tensor.values();
  }
}

}  // namespace cohff

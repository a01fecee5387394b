#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohff/bytes.hpp"
#include "cohff/v2x.hpp"

namespace cohff {

inline constexpr char kWireMagic[5] = "CHFF";

enum class DecodeStatus {
  Ok,
  BadMagic,
  Truncated,
  BadVersion,
  BadCount,
  BadAxis,
  BadIndices,
  TrailingBytes,
};

inline const char* to_string(DecodeStatus s) {
  switch (s) {
    case DecodeStatus::Ok: return "ok";
    case DecodeStatus::BadMagic: return "bad magic";
    case DecodeStatus::Truncated: return "truncated";
    case DecodeStatus::BadVersion: return "version mismatch";
    case DecodeStatus::BadCount: return "bad plane count";
    case DecodeStatus::BadAxis: return "bad plane axis";
    case DecodeStatus::BadIndices: return "corrupt indices";
    default: return "trailing bytes";
  }
}

struct DecodeResult {
  DecodeStatus status = DecodeStatus::Ok;
  V2XMessage msg;
};

namespace detail {

inline void validate_payload_for_wire(const SparsePlanePayload& p, PlaneAxis want) {
  if (p.axis != want)
    throw std::invalid_argument("encode_message: wrong plane axis");
  const uint64_t hw = static_cast<uint64_t>(p.rows) * p.cols;
  uint32_t prev = 0;
  for (size_t i = 0; i < p.indices.size(); ++i) {
    if (p.indices[i] >= hw || (i > 0 && p.indices[i] <= prev))
      throw std::invalid_argument("encode_message: corrupt indices");
    prev = p.indices[i];
  }
  if (p.values.size() != p.indices.size() * p.feat)
    throw std::invalid_argument("encode_message: value count mismatch");
}

inline void write_payload(ByteWriter& w, const SparsePlanePayload& p) {
  w.u8(static_cast<uint8_t>(p.axis));
  w.u16(p.rows);
  w.u16(p.cols);
  w.u16(p.feat);
  w.u32(static_cast<uint32_t>(p.indices.size()));
  for (uint32_t idx : p.indices) w.u32(idx);
  for (float v : p.values) w.f32(v);
}

}  // namespace detail

// Layout (little-endian): "CHFF", u16 version, u32 sender, 4xf32 pose
// (x,y,z,yaw), u8 plane count (=2), then per plane {u8 axis, u16 rows, u16
// cols, u16 feat, u32 kept, kept*u32 indices, kept*feat*f32 values}. The xz
// plane always precedes yz; the xy plane never crosses the wire.
inline std::vector<uint8_t> encode_message(const V2XMessage& m) {
  detail::validate_payload_for_wire(m.xz, PlaneAxis::XZ);
  detail::validate_payload_for_wire(m.yz, PlaneAxis::YZ);
  ByteWriter w;
  w.str(kWireMagic);
  w.u16(kWireVersion);
  w.u32(m.sender);
  w.f32(static_cast<float>(m.pose.x));
  w.f32(static_cast<float>(m.pose.y));
  w.f32(static_cast<float>(m.pose.z));
  w.f32(static_cast<float>(m.pose.yaw));
  w.u8(2);
  detail::write_payload(w, m.xz);
  detail::write_payload(w, m.yz);
  return w.take();
}

namespace detail {

// returns Ok on success; length math in u64 before any allocation
inline DecodeStatus read_payload(ByteReader& r, PlaneAxis want,
                                 SparsePlanePayload& out) {
  uint8_t axis;
  if (!r.u8(axis)) return DecodeStatus::Truncated;
  if (axis != static_cast<uint8_t>(want)) return DecodeStatus::BadAxis;
  out.axis = want;
  uint32_t kept;
  if (!r.u16(out.rows) || !r.u16(out.cols) || !r.u16(out.feat) || !r.u32(kept))
    return DecodeStatus::Truncated;
  const uint64_t need = static_cast<uint64_t>(kept) * 4 +
                        static_cast<uint64_t>(kept) * out.feat * 4;
  if (r.remaining() < need) return DecodeStatus::Truncated;
  const uint64_t hw = static_cast<uint64_t>(out.rows) * out.cols;
  if (kept > hw) return DecodeStatus::BadIndices;
  out.indices.resize(kept);
  for (uint32_t i = 0; i < kept; ++i) {
    r.u32(out.indices[i]);
    if (out.indices[i] >= hw || (i > 0 && out.indices[i] <= out.indices[i - 1]))
      return DecodeStatus::BadIndices;
  }
  out.values.resize(static_cast<size_t>(kept) * out.feat);
  for (auto& v : out.values) r.f32(v);
  return DecodeStatus::Ok;
}

}  // namespace detail

// Total decoder: any byte sequence yields a status, never a crash.
inline DecodeResult decode_message(const std::vector<uint8_t>& buf) {
  DecodeResult res;
  ByteReader r(buf);
  std::string magic;
  if (!r.str(magic, 4)) {
    res.status = DecodeStatus::Truncated;
    return res;
  }
  if (magic != kWireMagic) {
    res.status = DecodeStatus::BadMagic;
    return res;
  }
  uint16_t version;
  if (!r.u16(version)) {
    res.status = DecodeStatus::Truncated;
    return res;
  }
  if (version != kWireVersion) {
    res.status = DecodeStatus::BadVersion;
    return res;
  }
  float px, py, pz, pyaw;
  if (!r.u32(res.msg.sender) || !r.f32(px) || !r.f32(py) || !r.f32(pz) ||
      !r.f32(pyaw)) {
    res.status = DecodeStatus::Truncated;
    return res;
  }
  res.msg.pose = Pose(px, py, pz, pyaw);
  uint8_t count;
  if (!r.u8(count)) {
    res.status = DecodeStatus::Truncated;
    return res;
  }
  if (count != 2) {
    res.status = DecodeStatus::BadCount;
    return res;
  }
  if (auto s = detail::read_payload(r, PlaneAxis::XZ, res.msg.xz);
      s != DecodeStatus::Ok) {
    res.status = s;
    return res;
  }
  if (auto s = detail::read_payload(r, PlaneAxis::YZ, res.msg.yz);
      s != DecodeStatus::Ok) {
    res.status = s;
    return res;
  }
  if (r.remaining() != 0) res.status = DecodeStatus::TrailingBytes;
  return res;
}

}  // namespace cohff

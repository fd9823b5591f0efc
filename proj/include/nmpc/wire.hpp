#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "nmpc/netsim.hpp"

namespace nmpc {

// Datagram layout, all multi-byte fields little-endian:
//   bytes 0..3   magic "NMPC"
//   byte  4      version (1)
//   byte  5      msg_type: 0 = STATE, 1 = CONTROL
//   byte  6      joint_count
//   byte  7      flags, bit 0 set when the plan base was advanced by prediction
//   bytes 8..15  seq
//   bytes 16..23 origin_timestamp_ns
//   bytes 24..31 echo_timestamp_ns
// STATE payload:   joint_count x (angle f64, velocity f64)
// CONTROL payload: horizon u16, then horizon x joint_count x accel f64,
//                  step-major (same order ControlPayload stores it)
inline constexpr std::size_t kWireHeaderSize = 32;
inline constexpr uint8_t kWireVersion = 1;
inline constexpr uint8_t kMsgState = 0;
inline constexpr uint8_t kMsgControl = 1;

enum class WireError {
  truncated_header,
  bad_magic,
  bad_version,
  bad_msg_type,
  bad_joint_count,
  bad_length,
  bad_horizon,
};

inline const char* wire_error_name(WireError e) {
  switch (e) {
    case WireError::truncated_header: return "truncated header";
    case WireError::bad_magic: return "bad magic";
    case WireError::bad_version: return "unsupported version";
    case WireError::bad_msg_type: return "unknown msg_type";
    case WireError::bad_joint_count: return "bad joint_count";
    case WireError::bad_length: return "payload length mismatch";
    case WireError::bad_horizon: return "bad horizon";
  }
  return "unknown";
}

namespace detail {

inline void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

inline void put_f64(std::vector<uint8_t>& out, double v) {
  put_u64(out, std::bit_cast<uint64_t>(v));
}

inline uint16_t get_u16(const uint8_t* p) {
  return static_cast<uint16_t>(p[0] | (uint16_t(p[1]) << 8));
}

inline uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
  return v;
}

inline double get_f64(const uint8_t* p) {
  return std::bit_cast<double>(get_u64(p));
}

}  // namespace detail

// Serializes a packet into one datagram. Joint counts must fit a byte and the
// control plan must be internally consistent; anything else is a caller bug.
inline std::vector<uint8_t> wire_encode(const Packet& pkt) {
  std::vector<uint8_t> out;
  uint8_t msg_type = kMsgState;
  uint8_t joint_count = 0;
  uint8_t flags = 0;
  if (const auto* sp = std::get_if<StatePayload>(&pkt.payload)) {
    if (sp->joints.empty() || sp->joints.size() > 255)
      throw std::invalid_argument("wire_encode: state joint count out of range");
    joint_count = static_cast<uint8_t>(sp->joints.size());
  } else {
    const auto& cp = std::get<ControlPayload>(pkt.payload);
    if (cp.joint_count < 1 || cp.joint_count > 255)
      throw std::invalid_argument("wire_encode: control joint count out of range");
    if (cp.horizon < 1 || cp.horizon > 0xffff)
      throw std::invalid_argument("wire_encode: horizon out of range");
    if (cp.accel.size() != static_cast<std::size_t>(cp.horizon) * cp.joint_count)
      throw std::invalid_argument("wire_encode: accel length mismatch");
    msg_type = kMsgControl;
    joint_count = static_cast<uint8_t>(cp.joint_count);
    if (cp.predicted) flags |= 1;
  }

  out.reserve(kWireHeaderSize + 16);
  out.push_back('N');
  out.push_back('M');
  out.push_back('P');
  out.push_back('C');
  out.push_back(kWireVersion);
  out.push_back(msg_type);
  out.push_back(joint_count);
  out.push_back(flags);
  detail::put_u64(out, pkt.seq);
  detail::put_u64(out, static_cast<uint64_t>(pkt.origin_timestamp_ns));
  detail::put_u64(out, static_cast<uint64_t>(pkt.echo_timestamp_ns));

  if (msg_type == kMsgState) {
    const auto& sp = std::get<StatePayload>(pkt.payload);
    for (const auto& j : sp.joints) {
      detail::put_f64(out, j.angle);
      detail::put_f64(out, j.velocity);
    }
  } else {
    const auto& cp = std::get<ControlPayload>(pkt.payload);
    detail::put_u16(out, static_cast<uint16_t>(cp.horizon));
    for (double a : cp.accel) detail::put_f64(out, a);
  }
  return out;
}

// Strict parse of one datagram. Never reads past `len`; returns the failing
// field instead of throwing so a receive loop can drop garbage and move on.
inline std::variant<Packet, WireError> wire_decode(const uint8_t* data,
                                                   std::size_t len) {
  if (len < kWireHeaderSize) return WireError::truncated_header;
  if (std::memcmp(data, "NMPC", 4) != 0) return WireError::bad_magic;
  if (data[4] != kWireVersion) return WireError::bad_version;
  const uint8_t msg_type = data[5];
  if (msg_type != kMsgState && msg_type != kMsgControl)
    return WireError::bad_msg_type;
  const uint8_t joint_count = data[6];
  if (joint_count == 0) return WireError::bad_joint_count;
  const uint8_t flags = data[7];

  Packet pkt;
  pkt.seq = detail::get_u64(data + 8);
  pkt.origin_timestamp_ns = static_cast<int64_t>(detail::get_u64(data + 16));
  pkt.echo_timestamp_ns = static_cast<int64_t>(detail::get_u64(data + 24));

  const uint8_t* body = data + kWireHeaderSize;
  const std::size_t body_len = len - kWireHeaderSize;

  if (msg_type == kMsgState) {
    if (body_len != std::size_t(joint_count) * 16) return WireError::bad_length;
    StatePayload sp;
    sp.joints.resize(joint_count);
    for (int j = 0; j < joint_count; ++j) {
      sp.joints[j].angle = detail::get_f64(body + j * 16);
      sp.joints[j].velocity = detail::get_f64(body + j * 16 + 8);
    }
    pkt.payload = std::move(sp);
    return pkt;
  }

  if (body_len < 2) return WireError::bad_length;
  const uint16_t horizon = detail::get_u16(body);
  if (horizon == 0) return WireError::bad_horizon;
  const std::size_t want = 2 + std::size_t(horizon) * joint_count * 8;
  if (body_len != want) return WireError::bad_length;
  ControlPayload cp;
  cp.horizon = horizon;
  cp.joint_count = joint_count;
  cp.predicted = (flags & 1) != 0;
  cp.accel.resize(std::size_t(horizon) * joint_count);
  for (std::size_t i = 0; i < cp.accel.size(); ++i)
    cp.accel[i] = detail::get_f64(body + 2 + i * 8);
  pkt.payload = std::move(cp);
  return pkt;
}

inline std::variant<Packet, WireError> wire_decode(
    const std::vector<uint8_t>& bytes) {
  return wire_decode(bytes.data(), bytes.size());
}

}  // namespace nmpc

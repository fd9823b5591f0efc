#pragma once

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nmpc/simloop.hpp"

namespace nmpc {

// Wide CSV, one row per tick: tick,time, then per joint
// angle_j,velocity_j,ref_angle_j,ref_velocity_j,accel_j, then bookkeeping.
// Doubles are shortest-round-trip decimals, so identical runs produce
// identical bytes and a read-back loses nothing.

inline std::string trace_csv_header(int joint_count) {
  std::ostringstream os;
  os << "tick,time";
  for (int j = 0; j < joint_count; ++j) {
    os << ",angle_" << j << ",velocity_" << j << ",ref_angle_" << j
       << ",ref_velocity_" << j << ",accel_" << j;
  }
  os << ",applied_seq,applied_age_ticks,actuator_hit,fresh_state,rtt_s";
  return os.str();
}

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRecord>& trace,
                            int joint_count) {
  os << trace_csv_header(joint_count) << "\n";
  for (const auto& rec : trace) {
    os << rec.tick << ',' << format_double(rec.time);
    for (int j = 0; j < joint_count; ++j) {
      os << ',' << format_double(rec.angle[j]) << ',' << format_double(rec.velocity[j])
         << ',' << format_double(rec.ref_angle[j]) << ','
         << format_double(rec.ref_velocity[j]) << ',' << format_double(rec.applied_accel[j]);
    }
    os << ',' << rec.applied_seq << ',' << rec.applied_age_ticks << ','
       << (rec.actuator_hit ? 1 : 0) << ',' << (rec.fresh_state ? 1 : 0) << ',';
    if (rec.rtt_s.has_value()) os << format_double(*rec.rtt_s);
    os << "\n";
  }
}

inline void write_trace_csv_file(const std::string& path,
                                 const std::vector<TraceRecord>& trace, int joint_count) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open trace file for writing: " + path);
  write_trace_csv(f, trace, joint_count);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw std::runtime_error("trace csv: bad number '" + s + "'");
  }
  return v;
}

}  // namespace detail

struct TraceFile {
  int joint_count{0};
  std::vector<TraceRecord> trace;
};

inline TraceFile read_trace_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("trace csv: empty file");
  const auto header = detail::split_csv_line(line);
  // columns: 2 fixed + 5 per joint + 5 trailing
  if (header.size() < 12 || (header.size() - 7) % 5 != 0) {
    throw std::runtime_error("trace csv: unrecognized header");
  }
  TraceFile out;
  out.joint_count = static_cast<int>((header.size() - 7) / 5);
  const int jc = out.joint_count;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != header.size()) {
      throw std::runtime_error("trace csv: ragged row");
    }
    TraceRecord rec;
    rec.tick = std::stoll(f[0]);
    rec.time = detail::parse_double(f[1]);
    rec.angle.resize(jc);
    rec.velocity.resize(jc);
    rec.ref_angle.resize(jc);
    rec.ref_velocity.resize(jc);
    rec.applied_accel.resize(jc);
    for (int j = 0; j < jc; ++j) {
      const std::size_t base = 2 + static_cast<std::size_t>(j) * 5;
      rec.angle[j] = detail::parse_double(f[base]);
      rec.velocity[j] = detail::parse_double(f[base + 1]);
      rec.ref_angle[j] = detail::parse_double(f[base + 2]);
      rec.ref_velocity[j] = detail::parse_double(f[base + 3]);
      rec.applied_accel[j] = detail::parse_double(f[base + 4]);
    }
    const std::size_t t = 2 + static_cast<std::size_t>(jc) * 5;
    rec.applied_seq = std::stoull(f[t]);
    rec.applied_age_ticks = std::stoll(f[t + 1]);
    rec.actuator_hit = f[t + 2] == "1";
    rec.fresh_state = f[t + 3] == "1";
    if (!f[t + 4].empty()) rec.rtt_s = detail::parse_double(f[t + 4]);
    out.trace.push_back(std::move(rec));
  }
  return out;
}

inline TraceFile read_trace_csv_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open trace file: " + path);
  return read_trace_csv(f);
}

}  // namespace nmpc

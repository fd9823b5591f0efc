#pragma once

#include <cmath>
#include <cstdint>
#include <mutex>
#include <optional>
#include <queue>
#include <random>
#include <stdexcept>
#include <variant>
#include <vector>

#include "nmpc/dynamics.hpp"
#include "nmpc/util.hpp"

namespace nmpc {

struct StatePayload {
  std::vector<JointState> joints;
};

// A full planned input sequence. accel is step-major:
// accel[step * joint_count + joint].
struct ControlPayload {
  int horizon{0};
  int joint_count{0};
  std::vector<double> accel;
  bool predicted{false};  // the plan base was advanced by forward prediction
};

// Timestamps are sender-local nanoseconds; peers only ever difference a
// timestamp against their own clock after it has been echoed back to them.
struct Packet {
  uint64_t seq{0};
  int64_t origin_timestamp_ns{0};
  int64_t echo_timestamp_ns{0};  // 0 means nothing received from peer yet
  std::variant<StatePayload, ControlPayload> payload;
};

struct ChannelConfig {
  double base_delay_s{0.0};
  double jitter_s{0.0};   // delay is uniform in base +/- jitter
  double loss_rate{0.0};  // independent Bernoulli per send
  uint64_t seed{0};
};

struct ChannelCounters {
  uint64_t sent{0};
  uint64_t delivered{0};
  uint64_t dropped{0};
  uint64_t in_flight() const { return sent - delivered - dropped; }
};

// One-directional link: per-send Bernoulli loss and uniform jitter around a
// base delay, delivery ordered by (deliver time, seq). Two instances with
// different seeds form the forward and backward paths of a loop.
class Channel {
 public:
  explicit Channel(const ChannelConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
    if (!std::isfinite(cfg.base_delay_s) || cfg.base_delay_s < 0.0) {
      throw std::invalid_argument("Channel: base delay must be non-negative");
    }
    if (!std::isfinite(cfg.jitter_s) || cfg.jitter_s < 0.0 || cfg.jitter_s > cfg.base_delay_s) {
      throw std::invalid_argument("Channel: jitter must satisfy 0 <= jitter <= base delay");
    }
    if (!std::isfinite(cfg.loss_rate) || cfg.loss_rate < 0.0 || cfg.loss_rate > 1.0) {
      throw std::invalid_argument("Channel: loss rate must be in [0,1]");
    }
  }

  void send(const Packet& p, int64_t now_ns) {
    if (now_ns < last_send_ns_) {
      throw std::invalid_argument("Channel::send: send times must be non-decreasing");
    }
    last_send_ns_ = now_ns;
    counters_.sent++;
    const double u_loss = uniform01(rng_);
    const double u_jit = uniform01(rng_);
    if (u_loss < cfg_.loss_rate) {
      counters_.dropped++;
      return;
    }
    const double delay_s = cfg_.base_delay_s + (2.0 * u_jit - 1.0) * cfg_.jitter_s;
    const int64_t deliver_ns = now_ns + static_cast<int64_t>(std::llround(delay_s * 1e9));
    queue_.push(InFlight{deliver_ns, p.seq, p});
  }

  // Everything due by now, ordered by (deliver time, seq). Jitter may hand
  // packets over in a different order than they were sent.
  std::vector<Packet> poll(int64_t now_ns) {
    std::vector<Packet> out;
    while (!queue_.empty() && queue_.top().deliver_ns <= now_ns) {
      out.push_back(queue_.top().packet);
      queue_.pop();
      counters_.delivered++;
    }
    return out;
  }

  const ChannelCounters& counters() const { return counters_; }
  const ChannelConfig& config() const { return cfg_; }

 private:
  struct InFlight {
    int64_t deliver_ns;
    uint64_t seq;
    Packet packet;
    bool operator>(const InFlight& o) const {
      if (deliver_ns != o.deliver_ns) return deliver_ns > o.deliver_ns;
      return seq > o.seq;
    }
  };

  ChannelConfig cfg_;
  std::mt19937_64 rng_;
  int64_t last_send_ns_{INT64_MIN};
  ChannelCounters counters_;
  std::priority_queue<InFlight, std::vector<InFlight>, std::greater<>> queue_;
};

// Single-slot freshest-wins mailbox. A packet displaces the stored one only
// if it is newer by (origin timestamp, seq); everything older is discarded.
// Safe for one writer and one reader thread.
class LatestBuffer {
 public:
  // Returns true if the packet was accepted as the new freshest.
  bool offer(const Packet& p) {
    std::lock_guard<std::mutex> lock(mu_);
    if (stored_.has_value()) {
      const bool newer = p.origin_timestamp_ns > stored_->origin_timestamp_ns ||
                         (p.origin_timestamp_ns == stored_->origin_timestamp_ns &&
                          p.seq > stored_->seq);
      if (!newer) return false;
    }
    stored_ = p;
    return true;
  }

  std::optional<Packet> latest() const {
    std::lock_guard<std::mutex> lock(mu_);
    return stored_;
  }

  bool empty() const {
    std::lock_guard<std::mutex> lock(mu_);
    return !stored_.has_value();
  }

 private:
  mutable std::mutex mu_;
  std::optional<Packet> stored_;
};

}  // namespace nmpc

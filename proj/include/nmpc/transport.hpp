#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <queue>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "nmpc/simloop.hpp"
#include "nmpc/wire.hpp"

namespace nmpc {

// ---------------------------------------------------------------------------
// Minimal IPv4/UDP plumbing

inline sockaddr_in parse_endpoint(const std::string& spec) {
  const auto colon = spec.rfind(':');
  if (colon == std::string::npos) {
    throw std::invalid_argument("endpoint must look like host:port, got " + spec);
  }
  const std::string host = spec.substr(0, colon);
  const int port = std::stoi(spec.substr(colon + 1));
  if (port < 0 || port > 65535) {
    throw std::invalid_argument("endpoint port out of range in " + spec);
  }
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(port));
  const char* h = host.empty() || host == "localhost" ? "127.0.0.1" : host.c_str();
  if (inet_pton(AF_INET, h, &addr.sin_addr) != 1) {
    throw std::invalid_argument("endpoint host must be an IPv4 address, got " + spec);
  }
  return addr;
}

class UdpSocket {
 public:
  explicit UdpSocket(const sockaddr_in& bind_addr) {
    fd_ = ::socket(AF_INET, SOCK_DGRAM, 0);
    if (fd_ < 0) throw std::runtime_error("socket() failed");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(fd_, reinterpret_cast<const sockaddr*>(&bind_addr), sizeof(bind_addr)) < 0) {
      ::close(fd_);
      throw std::runtime_error("bind() failed for udp socket");
    }
  }
  UdpSocket(const UdpSocket&) = delete;
  UdpSocket& operator=(const UdpSocket&) = delete;
  ~UdpSocket() {
    if (fd_ >= 0) ::close(fd_);
  }

  uint16_t local_port() const {
    sockaddr_in addr{};
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    return ntohs(addr.sin_port);
  }

  void send_to(const std::vector<uint8_t>& bytes, const sockaddr_in& dst) const {
    ::sendto(fd_, bytes.data(), bytes.size(), 0,
             reinterpret_cast<const sockaddr*>(&dst), sizeof(dst));
  }

  // Waits up to timeout_ms (0: just check) and receives one datagram.
  // Returns the byte count, 0 when nothing is ready. truncated flips when the
  // datagram did not fit the caller's buffer; the excess is discarded.
  int recv_from(uint8_t* buf, std::size_t cap, int timeout_ms, sockaddr_in* src,
                bool* truncated = nullptr) const {
    pollfd pfd{fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, timeout_ms);
    if (ready <= 0 || (pfd.revents & POLLIN) == 0) return 0;
    sockaddr_in from{};
    socklen_t from_len = sizeof(from);
    const ssize_t n = ::recvfrom(fd_, buf, cap, MSG_TRUNC,
                                 reinterpret_cast<sockaddr*>(&from), &from_len);
    if (n <= 0) return 0;
    if (src != nullptr) *src = from;
    if (truncated != nullptr) *truncated = static_cast<std::size_t>(n) > cap;
    return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(n), cap));
  }

  int fd() const { return fd_; }

 private:
  int fd_{-1};
};

inline constexpr std::size_t kMaxDatagram = 65536;

// ---------------------------------------------------------------------------
// Endpoint configuration

struct EndpointConfig {
  std::string bind{"127.0.0.1:0"};
  std::string peer{"127.0.0.1:9000"};  // client only: where the server listens
  double rate_hz{0.0};                 // state send rate; 0 = every tick
  // Wall pacing: tick duration is ts / real_time_factor. Raising it above 1
  // runs faster than real time; loopback keeps up to ~5x, beyond that the
  // reply starts missing its tick boundary and timing drifts from the
  // simulated loop.
  double real_time_factor{1.0};
};

struct ServerStats {
  uint64_t states_received{0};
  uint64_t plans_sent{0};
  uint64_t decode_errors{0};
  uint64_t stale_dropped{0};
};

// ---------------------------------------------------------------------------
// Controller server: answers every fresh measurement with a plan, addressed
// to wherever the measurement came from. All timestamps on the wire live in
// the client's clock; the server only ever copies or extends them, so no
// clock synchronization is needed (its own pacing is request-driven).
inline ServerStats run_controller_server(const ScenarioConfig& cfg,
                                         const std::string& bind,
                                         const std::atomic<bool>& stop,
                                         std::atomic<uint16_t>* bound_port = nullptr,
                                         std::vector<TraceRecord>* trace = nullptr) {
  validate_scenario(cfg);
  UdpSocket sock{parse_endpoint(bind)};
  if (bound_port != nullptr) bound_port->store(sock.local_port());

  ControlAgent agent{cfg};
  LatestBuffer controller_buf;
  uint64_t last_answered_seq = 0;
  uint64_t plan_seq = 0;
  ServerStats stats;
  const int64_t npt = ns_per_tick(cfg.ts);
  std::vector<uint8_t> buf(kMaxDatagram);

  while (!stop.load(std::memory_order_relaxed)) {
    sockaddr_in src{};
    const int n = sock.recv_from(buf.data(), buf.size(), 20, &src);
    if (n == 0) continue;
    auto decoded = wire_decode(buf.data(), static_cast<std::size_t>(n));
    if (std::holds_alternative<WireError>(decoded)) {
      stats.decode_errors++;
      continue;
    }
    Packet& pkt = std::get<Packet>(decoded);
    if (!std::holds_alternative<StatePayload>(pkt.payload)) {
      stats.decode_errors++;
      continue;
    }
    stats.states_received++;
    if (!controller_buf.offer(pkt)) {
      stats.stale_dropped++;
      continue;
    }
    const auto latest = controller_buf.latest();
    if (!latest.has_value() || latest->seq == last_answered_seq) continue;
    last_answered_seq = latest->seq;

    const auto& sp = std::get<StatePayload>(latest->payload);
    const int64_t state_ns = latest->origin_timestamp_ns;
    // The answer is immediate, so the best plant-clock estimate of "now" is
    // the measurement stamp itself; transit makes up the rest of the loop
    // delay and is learned from the echo.
    PlanMessage plan = agent.respond(sp, state_ns, state_ns,
                                     static_cast<double>(state_ns) * 1e-9,
                                     latest->echo_timestamp_ns);
    Packet out;
    out.seq = ++plan_seq;
    out.origin_timestamp_ns = plan.base_ns;
    out.echo_timestamp_ns = plan.echo_ns;
    out.payload = plan.payload;
    sock.send_to(wire_encode(out), src);
    stats.plans_sent++;

    if (trace != nullptr) {
      TraceRecord rec;
      rec.tick = state_ns / npt;
      rec.time = static_cast<double>(state_ns) * 1e-9;
      const int jc = cfg.joint_count;
      rec.angle.resize(jc);
      rec.velocity.resize(jc);
      rec.ref_angle.resize(jc);
      rec.ref_velocity.resize(jc);
      rec.applied_accel.assign(jc, 0.0);
      for (int j = 0; j < jc; ++j) {
        if (j < static_cast<int>(sp.joints.size())) {
          rec.angle[j] = sp.joints[j].angle;
          rec.velocity[j] = sp.joints[j].velocity;
        }
        const ReferenceTarget r = j < static_cast<int>(cfg.references.size())
                                      ? reference_signal(cfg.references[j], rec.time)
                                      : ReferenceTarget{};
        rec.ref_angle[j] = r.angle;
        rec.ref_velocity[j] = r.velocity;
        rec.applied_accel[j] = plan.payload.accel[j];
      }
      rec.fresh_state = true;
      rec.applied_seq = plan.seq;
      trace->push_back(std::move(rec));
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Plant client: simulates the plant wall-paced at ts, one boundary per tick.
// Boundary order matches the simulated loop: send the fresh sample, then
// drain the socket, then actuate and integrate into the next tick. A reply
// that lands mid-tick therefore waits in the socket buffer until the next
// boundary, exactly like a channel polled once per tick.
inline RunResult run_plant_client(const ScenarioConfig& cfg, const EndpointConfig& ep,
                                  const std::atomic<bool>* stop = nullptr) {
  validate_scenario(cfg);
  if (!(ep.real_time_factor > 0.0)) {
    throw std::invalid_argument("real_time_factor must be positive");
  }
  const int jc = cfg.joint_count;
  const int64_t npt = ns_per_tick(cfg.ts);
  const int64_t ticks = scenario_tick_count(cfg);
  const DiscreteModel model = discretize(cfg.ts);
  PlantConfig plant_cfg = cfg.plant;
  plant_cfg.ts = cfg.ts;
  plant_cfg.joint_count = jc;

  const int64_t send_every =
      ep.rate_hz <= 0.0
          ? 1
          : std::max<int64_t>(1, std::llround(1.0 / (cfg.ts * ep.rate_hz)));

  UdpSocket sock{parse_endpoint(ep.bind)};
  const sockaddr_in peer = parse_endpoint(ep.peer);

  LatestBuffer actuator_buf;
  std::vector<JointState> x(jc);
  std::vector<double> hold(jc, 0.0);
  uint64_t state_seq = 0;
  int64_t last_ctrl_origin_ns = 0;
  std::optional<double> last_rtt_s;
  std::vector<uint8_t> buf(kMaxDatagram);

  RunResult result;
  result.trace.reserve(ticks + 1);

  const auto start = std::chrono::steady_clock::now();
  const auto tick_wall = std::chrono::nanoseconds(
      std::llround(static_cast<double>(npt) / ep.real_time_factor));

  for (int64_t k = 0; k <= ticks; ++k) {
    std::this_thread::sleep_until(start + k * tick_wall);
    if (stop != nullptr && stop->load(std::memory_order_relaxed)) break;
    const int64_t now_ns = k * npt;

    // send the sample taken at this boundary (the plant starts silent: the
    // first state goes out one tick in)
    if (k >= 1 && (k - 1) % send_every == 0) {
      Packet sp;
      sp.seq = ++state_seq;
      sp.origin_timestamp_ns = now_ns;
      sp.echo_timestamp_ns = last_ctrl_origin_ns;
      sp.payload = StatePayload{x};
      sock.send_to(wire_encode(sp), peer);
      result.bwd.sent++;
    }

    // drain everything that arrived since the previous boundary
    while (true) {
      const int n = sock.recv_from(buf.data(), buf.size(), 0, nullptr);
      if (n == 0) break;
      auto decoded = wire_decode(buf.data(), static_cast<std::size_t>(n));
      if (std::holds_alternative<WireError>(decoded)) continue;
      Packet& pkt = std::get<Packet>(decoded);
      if (!std::holds_alternative<ControlPayload>(pkt.payload)) continue;
      result.fwd.sent++;
      result.fwd.delivered++;
      if (actuator_buf.offer(pkt)) {
        last_ctrl_origin_ns = pkt.origin_timestamp_ns;
        if (pkt.echo_timestamp_ns > 0) {
          last_rtt_s = static_cast<double>(now_ns - pkt.echo_timestamp_ns) * 1e-9;
        }
      }
    }

    TraceRecord rec;
    rec.tick = k;
    rec.time = static_cast<double>(now_ns) * 1e-9;
    rec.angle.resize(jc);
    rec.velocity.resize(jc);
    rec.ref_angle.resize(jc);
    rec.ref_velocity.resize(jc);
    for (int j = 0; j < jc; ++j) {
      rec.angle[j] = x[j].angle;
      rec.velocity[j] = x[j].velocity;
      const ReferenceTarget r = j < static_cast<int>(cfg.references.size())
                                    ? reference_signal(cfg.references[j], rec.time)
                                    : ReferenceTarget{};
      rec.ref_angle[j] = r.angle;
      rec.ref_velocity[j] = r.velocity;
    }
    rec.rtt_s = last_rtt_s;

    ControlSelection sel = control_selection(actuator_buf, now_ns, npt, hold, jc);
    hold = sel.accel;
    rec.applied_accel = sel.accel;
    rec.actuator_hit = sel.from_buffer;
    rec.applied_seq = sel.seq;
    rec.applied_age_ticks = sel.age_ticks;
    rec.applied_source_ns = sel.source_state_ns;
    result.trace.push_back(std::move(rec));
    if (k == ticks) break;

    for (int j = 0; j < jc; ++j) {
      x[j] = plant_step(x[j], ControlInput{sel.accel[j]}, model, plant_cfg).state;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Impairment proxy: a userspace relay that applies per-direction loss and
// delay to real datagrams, drawing from the same per-send (loss, jitter)
// stream as the in-process channel, so a given seed produces the same drop
// pattern in both worlds.

struct ProxyCounters {
  uint64_t relayed_fwd{0}, relayed_bwd{0};
  uint64_t dropped_fwd{0}, dropped_bwd{0};
  uint64_t oversized{0};
};

class ImpairmentProxy {
 public:
  // listen: where the plant client points its peer; forward_to: the real
  // server. Forward direction here is client->server (requests).
  ImpairmentProxy(const std::string& listen, const std::string& forward_to,
                  const ChannelConfig& fwd, const ChannelConfig& bwd)
      : client_side_(parse_endpoint(listen)),
        server_side_(parse_endpoint("127.0.0.1:0")),
        server_addr_(parse_endpoint(forward_to)),
        fwd_cfg_(fwd),
        bwd_cfg_(bwd),
        fwd_rng_(fwd.seed),
        bwd_rng_(bwd.seed) {
    Channel probe_fwd{fwd};  // reuse the channel's config validation
    Channel probe_bwd{bwd};
  }

  uint16_t listen_port() const { return client_side_.local_port(); }
  const ProxyCounters& counters() const { return counters_; }

  void run(const std::atomic<bool>& stop) {
    std::vector<uint8_t> buf(kMaxDatagram);
    while (!stop.load(std::memory_order_relaxed)) {
      const auto now = std::chrono::steady_clock::now();
      while (!heap_.empty() && heap_.top().due <= now) {
        const Scheduled& s = heap_.top();
        if (s.to_server) {
          server_side_.send_to(s.bytes, server_addr_);
          counters_.relayed_fwd++;
        } else if (have_client_) {
          client_side_.send_to(s.bytes, client_addr_);
          counters_.relayed_bwd++;
        }
        heap_.pop();
      }

      int timeout_ms = 10;
      if (!heap_.empty()) {
        const auto wait = std::chrono::duration_cast<std::chrono::milliseconds>(
            heap_.top().due - now);
        timeout_ms = std::clamp<int>(static_cast<int>(wait.count()), 0, 10);
      }

      pollfd pfds[2] = {{client_side_.fd(), POLLIN, 0}, {server_side_.fd(), POLLIN, 0}};
      ::poll(pfds, 2, timeout_ms);
      for (int i = 0; i < 2; ++i) {
        if ((pfds[i].revents & POLLIN) == 0) continue;
        const bool from_client = i == 0;
        sockaddr_in src{};
        bool truncated = false;
        while (true) {
          const int n = (from_client ? client_side_ : server_side_)
                            .recv_from(buf.data(), buf.size(), 0, &src, &truncated);
          if (n == 0) break;
          if (truncated) {
            counters_.oversized++;
            continue;
          }
          if (from_client) {
            client_addr_ = src;
            have_client_ = true;
          }
          admit(from_client, buf.data(), static_cast<std::size_t>(n));
        }
      }
    }
  }

 private:
  struct Scheduled {
    std::chrono::steady_clock::time_point due;
    uint64_t order;
    bool to_server;
    std::vector<uint8_t> bytes;
    bool operator>(const Scheduled& o) const {
      if (due != o.due) return due > o.due;
      return order > o.order;
    }
  };

  void admit(bool to_server, const uint8_t* data, std::size_t len) {
    auto& rng = to_server ? fwd_rng_ : bwd_rng_;
    const auto& cfg = to_server ? fwd_cfg_ : bwd_cfg_;
    const double u_loss = uniform01(rng);
    const double u_jit = uniform01(rng);
    if (u_loss < cfg.loss_rate) {
      (to_server ? counters_.dropped_fwd : counters_.dropped_bwd)++;
      return;
    }
    const double delay_s = cfg.base_delay_s + (2.0 * u_jit - 1.0) * cfg.jitter_s;
    Scheduled s;
    s.due = std::chrono::steady_clock::now() +
            std::chrono::nanoseconds(std::llround(delay_s * 1e9));
    s.order = order_++;
    s.to_server = to_server;
    s.bytes.assign(data, data + len);
    heap_.push(std::move(s));
  }

  UdpSocket client_side_;
  UdpSocket server_side_;
  sockaddr_in server_addr_;
  sockaddr_in client_addr_{};
  bool have_client_{false};
  ChannelConfig fwd_cfg_, bwd_cfg_;
  std::mt19937_64 fwd_rng_, bwd_rng_;
  uint64_t order_{0};
  std::priority_queue<Scheduled, std::vector<Scheduled>, std::greater<>> heap_;
  ProxyCounters counters_;
};

inline ProxyCounters run_impairment_proxy(const std::string& listen,
                                          const std::string& forward_to,
                                          const ChannelConfig& fwd,
                                          const ChannelConfig& bwd,
                                          const std::atomic<bool>& stop) {
  ImpairmentProxy proxy{listen, forward_to, fwd, bwd};
  proxy.run(stop);
  return proxy.counters();
}

}  // namespace nmpc

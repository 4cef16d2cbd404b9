#pragma once

#include <memory>
#include <string>

#include "flowmig/stream.hpp"

namespace flowmig {

enum class PathKind { Wifi, Cellular, Simulated };
enum class PathState { Up, Down, Disabled };

std::string to_string(PathKind k);
std::string to_string(PathState s);

// An abstract connectable path. Real-interface adapters implement this over
// OS facilities; the harness provides a simulated implementation with
// scriptable availability. Opening a connection on a down path fails
// immediately.
class NetworkPath {
 public:
  virtual ~NetworkPath() = default;

  virtual const std::string& id() const = 0;
  virtual PathKind kind() const = 0;
  virtual PathState state() const = 0;

  virtual std::unique_ptr<Stream> connect(const std::string& host, int port,
                                          std::optional<Seconds> timeout) = 0;

  // Abruptly severs one connection previously opened through this path.
  // Adapter responsibility; the simulated path kills the channel, a real
  // adapter would inject a reset.
  virtual bool kill_connection(uint64_t conn_id) = 0;
  virtual void set_state(PathState s) = 0;
};

// Adapter over plain kernel sockets: always up, cannot kill from outside
// (owners close their own sockets). Used by the CLI proxy when no harness is
// attached.
class SystemPath : public NetworkPath {
 public:
  explicit SystemPath(std::string id, PathKind kind = PathKind::Simulated)
      : id_(std::move(id)), kind_(kind) {}

  const std::string& id() const override { return id_; }
  PathKind kind() const override { return kind_; }
  PathState state() const override { return state_; }
  std::unique_ptr<Stream> connect(const std::string& host, int port,
                                  std::optional<Seconds> timeout) override {
    if (state_ != PathState::Up) return nullptr;
    return tcp_connect(host, port, timeout ? *timeout : 10.0);
  }
  bool kill_connection(uint64_t) override { return false; }
  void set_state(PathState s) override { state_ = s; }

 private:
  std::string id_;
  PathKind kind_;
  PathState state_ = PathState::Up;
};

}  // namespace flowmig

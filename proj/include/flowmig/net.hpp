#pragma once

#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "flowmig/clock.hpp"
#include "flowmig/paths.hpp"
#include "flowmig/stream.hpp"

namespace flowmig {

class Net;
class SimPath;
struct Channel;

enum class ClockMode { Virtual, Real };

// In-process network: named listeners, byte channels with latency and
// bounded buffering, and scriptable path state. In virtual mode all blocking
// goes through Net::wait under one master lock; time jumps to the earliest
// pending event whenever every registered actor is blocked.
class Net : public Clock {
 public:
  explicit Net(ClockMode mode = ClockMode::Virtual);
  ~Net() override;
  Net(const Net&) = delete;
  Net& operator=(const Net&) = delete;

  Seconds now() const override;
  bool is_virtual() const override { return mode_ == ClockMode::Virtual; }
  ClockMode mode() const { return mode_; }

  // --- actors ---
  // Every thread that blocks on virtual-net primitives must be registered.
  // spawn() registers before the thread starts so time cannot advance past
  // its first action. A driver spawning several actors should hold an
  // ActorGuard while it sets up, otherwise the first spawnee can burn
  // through virtual time before the rest exist.
  void spawn(const std::string& name, std::function<void()> fn);
  // RAII registration for an existing thread (tests, drivers).
  class ActorGuard {
   public:
    ActorGuard(Net& net, const std::string& name);
    ~ActorGuard();

   private:
    Net& net_;
    uint64_t id_;
  };

  // Waits until pred() holds (true) or the deadline passes (false).
  // next_event reports the earliest time pred might flip due to time alone
  // (e.g. a queued chunk's delivery time). Caller must hold lock().
  bool wait(std::unique_lock<std::mutex>& lk, const std::function<bool()>& pred,
            std::optional<Seconds> deadline,
            const std::function<std::optional<Seconds>()>& next_event = {});

  void sleep_until(Seconds t);
  void sleep_for(Seconds d) { sleep_until(now() + d); }

  std::mutex& lock() { return mu_; }
  void notify_all_locked() { cv_.notify_all(); }
  Seconds vnow_now_locked() const {
    return mode_ == ClockMode::Virtual ? vnow_ : real_.now();
  }

  // --- endpoints ---
  // Listener bound to host:port on the in-memory network (port 0 assigns one).
  std::shared_ptr<class VirtualListener> listen(const std::string& host, int port);
  // Direct local connection, no path in between (loopback semantics).
  std::unique_ptr<Stream> connect_local(const std::string& host, int port);
  // Connection carried by a path: refused while the path is down or disabled,
  // stalls while down, dies when the path kills it.
  std::unique_ptr<Stream> connect_via(SimPath& path, const std::string& host, int port);

  std::shared_ptr<SimPath> make_path(const std::string& id, const std::string& kind);

  // Blocks the calling (unregistered) thread until every actor has exited.
  void join();
  // Joins all spawned threads; poisons the net first so stuck actors unblock.
  void shutdown();

 private:
  friend struct Pipe;
  friend struct Channel;
  friend class ChannelStream;
  friend class VirtualListener;
  friend class SimPath;

  // While blocked in wait(), an actor exposes its live pred/next_event so the
  // advance decision re-evaluates current state instead of a stale snapshot.
  struct Actor {
    std::string name;
    bool blocked = false;
    const std::function<bool()>* pred = nullptr;
    const std::function<std::optional<Seconds>()>* next_event = nullptr;
    std::optional<Seconds> deadline;
  };

  uint64_t register_actor_locked(const std::string& name);
  void unregister_actor(uint64_t id);
  void maybe_advance_locked();
  void check_poison_locked() const;

  std::unique_ptr<Stream> connect_impl(SimPath* path, const std::string& host, int port);

  ClockMode mode_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  Seconds vnow_ = 0;
  RealClock real_;
  bool poisoned_ = false;
  std::string poison_why_;
  uint64_t next_actor_ = 1;
  std::map<uint64_t, Actor> actors_;
  std::map<std::pair<std::string, int>, std::weak_ptr<VirtualListener>> listeners_;
  int next_auto_port_ = 20000;
  uint64_t next_conn_ = 1;
  std::vector<std::thread> threads_;
  std::mutex threads_mu_;
};

// Completion counting across actors; wait() must run inside an actor when
// the net is virtual.
class WaitGroup {
 public:
  explicit WaitGroup(Net& net) : net_(net) {}
  void add(int n = 1);
  void done();
  bool wait(std::optional<Seconds> deadline = std::nullopt);

 private:
  Net& net_;
  int count_ = 0;
};

// One direction of a channel: FIFO of chunks with delivery times, bounded
// queued bytes so latency plus the bound give an effective byte rate.
struct Pipe {
  explicit Pipe(size_t capacity) : capacity(capacity) {}
  struct Chunk {
    std::string data;
    size_t off = 0;
    Seconds ready = 0;
  };
  std::deque<Chunk> q;
  size_t queued = 0;
  size_t capacity;
  Seconds last_ready = 0;
  bool wclosed = false;  // writer closed; reader drains then sees EOF
  bool rclosed = false;  // reader gone; writes fail
  bool killed = false;   // abortive; reads fail immediately
};

struct Channel {
  Channel(size_t cap_a2b, size_t cap_b2a) : a2b(cap_a2b), b2a(cap_b2a) {}
  Pipe a2b, b2a;
  std::shared_ptr<SimPath> path;  // null for local connections
  uint64_t conn_id = 0;
  std::string label;
};

class ChannelStream : public Stream {
 public:
  ChannelStream(Net& net, std::shared_ptr<Channel> ch, bool is_a);
  ~ChannelStream() override;

  ReadResult read(char* buf, size_t max, std::optional<Seconds> deadline) override;
  bool write(const char* data, size_t len) override;
  StreamStatus wait_readable(std::optional<Seconds> deadline) override;
  void close() override;
  void kill() override;
  std::string peer_label() const override;

  uint64_t conn_id() const;
  std::string path_id() const;

 private:
  Pipe& rd() const;
  Pipe& wr() const;
  bool stalled_locked() const;

  Net& net_;
  std::shared_ptr<Channel> ch_;
  bool a_;
  bool closed_ = false;
};

// Simulated path. Down: new connections are refused and in-flight bytes
// stall (nothing is actively torn down, matching a radio that silently lost
// coverage). Disabled: live connections are killed and connects refused.
class SimPath : public NetworkPath, public std::enable_shared_from_this<SimPath> {
 public:
  SimPath(Net& net, std::string id, PathKind kind);

  const std::string& id() const override { return id_; }
  PathKind kind() const override { return kind_; }
  PathState state() const override;
  // For callers already holding the net master lock.
  PathState state_locked() const { return state_; }
  std::unique_ptr<Stream> connect(const std::string& host, int port,
                                  std::optional<Seconds> timeout) override;
  bool kill_connection(uint64_t conn_id) override;
  void set_state(PathState s) override;

  void set_latency(Seconds s);
  Seconds latency() const;
  void set_capacity(size_t bytes) { capacity_ = bytes; }
  size_t capacity() const { return capacity_; }

  size_t live_connections() const;

 private:
  friend class Net;
  friend class ChannelStream;
  void attach_locked(const std::shared_ptr<Channel>& ch);
  void prune_locked();

  Net& net_;
  std::string id_;
  PathKind kind_;
  PathState state_ = PathState::Up;
  Seconds latency_ = 0;
  size_t capacity_ = 64 * 1024;
  std::vector<std::weak_ptr<Channel>> conns_;
};

class VirtualListener : public Listener {
 public:
  VirtualListener(Net& net, std::string host, int port);
  ~VirtualListener() override;

  std::unique_ptr<Stream> accept() override;
  // Accept with metadata about the carrying path (empty for local).
  struct Accepted {
    std::unique_ptr<Stream> stream;
    std::string path_id;
    Seconds t = 0;
  };
  std::optional<Accepted> accept_meta();
  void close() override;
  int port() const override { return port_; }
  const std::string& host() const { return host_; }
  size_t accepted_count() const;

 private:
  friend class Net;
  struct Pending {
    std::shared_ptr<Channel> ch;
    std::string path_id;
    Seconds t;
  };
  Net& net_;
  std::string host_;
  int port_;
  std::deque<Pending> backlog_;
  bool closed_ = false;
  size_t accepted_ = 0;
};

}  // namespace flowmig

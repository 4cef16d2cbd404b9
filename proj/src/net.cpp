#include "flowmig/net.hpp"

#include <algorithm>
#include <cstdio>

namespace flowmig {

namespace {
thread_local uint64_t t_actor_id = 0;
}

Net::Net(ClockMode mode) : mode_(mode) {}

Net::~Net() { shutdown(); }

Seconds Net::now() const {
  if (mode_ == ClockMode::Real) return real_.now();
  std::lock_guard<std::mutex> g(mu_);
  return vnow_;
}

uint64_t Net::register_actor_locked(const std::string& name) {
  uint64_t id = next_actor_++;
  Actor a;
  a.name = name;
  actors_[id] = std::move(a);
  return id;
}

void Net::unregister_actor(uint64_t id) {
  std::unique_lock<std::mutex> lk(mu_);
  actors_.erase(id);
  maybe_advance_locked();
  cv_.notify_all();
}

void Net::check_poison_locked() const {
  if (poisoned_) throw NetError("virtual net poisoned: " + poison_why_);
}

void Net::maybe_advance_locked() {
  if (mode_ != ClockMode::Virtual || poisoned_) return;
  if (actors_.empty()) return;
  Seconds target = kInfSeconds;
  for (auto& [id, a] : actors_) {
    if (!a.blocked) return;  // somebody can still run
    if (a.pred && (*a.pred)()) return;  // woken already, just not scheduled yet
    Seconds w = a.deadline ? *a.deadline : kInfSeconds;
    if (a.next_event && *a.next_event) {
      if (auto ne = (*a.next_event)()) w = std::min(w, *ne);
    }
    target = std::min(target, w);
  }
  if (target == kInfSeconds) {
    // Every actor waits on a condition no timer will flip.
    poisoned_ = true;
    poison_why_ = "all actors blocked with no pending timer";
    cv_.notify_all();
    return;
  }
  if (target > vnow_) vnow_ = target;
  cv_.notify_all();
}

bool Net::wait(std::unique_lock<std::mutex>& lk, const std::function<bool()>& pred,
               std::optional<Seconds> deadline,
               const std::function<std::optional<Seconds>()>& next_event) {
  if (mode_ == ClockMode::Real) {
    for (;;) {
      check_poison_locked();
      if (pred()) return true;
      Seconds now = real_.now();
      Seconds dl = deadline ? *deadline : kInfSeconds;
      if (now >= dl) return false;
      std::optional<Seconds> ne = next_event ? next_event() : std::nullopt;
      Seconds until = std::min(dl, ne ? *ne : kInfSeconds);
      if (until == kInfSeconds) {
        cv_.wait(lk);
      } else {
        auto dur = std::chrono::duration<double>(std::max(0.0, until - now));
        cv_.wait_for(lk, dur);
      }
    }
  }

  auto it = actors_.find(t_actor_id);
  if (it == actors_.end())
    throw NetError("virtual-mode wait from unregistered thread");
  Actor& me = it->second;
  auto clear = [&] {
    me.blocked = false;
    me.pred = nullptr;
    me.next_event = nullptr;
    me.deadline = std::nullopt;
  };
  for (;;) {
    check_poison_locked();
    if (pred()) {
      clear();
      return true;
    }
    Seconds dl = deadline ? *deadline : kInfSeconds;
    if (vnow_ >= dl) {
      clear();
      return false;
    }
    std::optional<Seconds> ne = next_event ? next_event() : std::nullopt;
    Seconds wake = std::min(dl, ne ? *ne : kInfSeconds);
    me.blocked = true;
    me.pred = &pred;
    me.next_event = &next_event;
    me.deadline = deadline;
    maybe_advance_locked();
    check_poison_locked();
    if (vnow_ < wake) cv_.wait(lk);
    me.blocked = false;
  }
}

void Net::sleep_until(Seconds t) {
  std::unique_lock<std::mutex> lk(mu_);
  wait(lk, [] { return false; }, t);
}

void WaitGroup::add(int n) {
  std::lock_guard<std::mutex> g(net_.lock());
  count_ += n;
}

void WaitGroup::done() {
  std::lock_guard<std::mutex> g(net_.lock());
  count_ -= 1;
  net_.notify_all_locked();
}

bool WaitGroup::wait(std::optional<Seconds> deadline) {
  std::unique_lock<std::mutex> lk(net_.lock());
  return net_.wait(lk, [this] { return count_ <= 0; }, deadline);
}

void Net::spawn(const std::string& name, std::function<void()> fn) {
  uint64_t id;
  {
    std::lock_guard<std::mutex> g(mu_);
    check_poison_locked();
    id = register_actor_locked(name);
  }
  std::thread th([this, id, name, fn = std::move(fn)] {
    t_actor_id = id;
    try {
      fn();
    } catch (const NetError& e) {
      // poisoned net or deliberate teardown; exit quietly
    } catch (const std::exception& e) {
      std::fprintf(stderr, "[net] actor %s died: %s\n", name.c_str(), e.what());
    }
    t_actor_id = 0;
    unregister_actor(id);
  });
  std::lock_guard<std::mutex> g(threads_mu_);
  threads_.push_back(std::move(th));
}

Net::ActorGuard::ActorGuard(Net& net, const std::string& name) : net_(net) {
  std::lock_guard<std::mutex> g(net_.mu_);
  id_ = net_.register_actor_locked(name);
  t_actor_id = id_;
}

Net::ActorGuard::~ActorGuard() {
  t_actor_id = 0;
  net_.unregister_actor(id_);
}

void Net::join() {
  {
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [&] { return actors_.empty() || poisoned_; });
  }
  std::vector<std::thread> ths;
  {
    std::lock_guard<std::mutex> g(threads_mu_);
    ths.swap(threads_);
  }
  for (auto& t : ths)
    if (t.joinable()) t.join();
}

void Net::shutdown() {
  {
    std::lock_guard<std::mutex> g(mu_);
    if (!poisoned_) {
      poisoned_ = true;
      poison_why_ = "net shutdown";
    }
    cv_.notify_all();
  }
  std::vector<std::thread> ths;
  {
    std::lock_guard<std::mutex> g(threads_mu_);
    ths.swap(threads_);
  }
  for (auto& t : ths)
    if (t.joinable()) t.join();
}

// --- endpoints ---

std::shared_ptr<VirtualListener> Net::listen(const std::string& host, int port) {
  std::lock_guard<std::mutex> g(mu_);
  check_poison_locked();
  if (port == 0) port = next_auto_port_++;
  auto key = std::make_pair(host, port);
  if (auto existing = listeners_[key].lock(); existing && !existing->closed_)
    throw NetError("address in use: " + host + ":" + std::to_string(port));
  auto l = std::make_shared<VirtualListener>(*this, host, port);
  listeners_[key] = l;
  return l;
}

std::unique_ptr<Stream> Net::connect_impl(SimPath* path, const std::string& host,
                                          int port) {
  std::unique_lock<std::mutex> lk(mu_);
  check_poison_locked();
  if (path && path->state_ != PathState::Up) return nullptr;
  auto it = listeners_.find({host, port});
  std::shared_ptr<VirtualListener> l = it == listeners_.end() ? nullptr : it->second.lock();
  if (!l || l->closed_) return nullptr;  // connection refused

  size_t cap = path ? path->capacity_ : 1 << 20;
  auto ch = std::make_shared<Channel>(cap, cap);
  ch->conn_id = next_conn_++;
  ch->label = host + ":" + std::to_string(port);
  if (path) {
    ch->path = path->shared_from_this();
    path->attach_locked(ch);
  }
  l->backlog_.push_back(VirtualListener::Pending{
      ch, path ? path->id_ : std::string(), mode_ == ClockMode::Virtual ? vnow_ : real_.now()});
  cv_.notify_all();
  return std::make_unique<ChannelStream>(*this, ch, /*is_a=*/true);
}

std::unique_ptr<Stream> Net::connect_local(const std::string& host, int port) {
  return connect_impl(nullptr, host, port);
}

std::unique_ptr<Stream> Net::connect_via(SimPath& path, const std::string& host,
                                         int port) {
  return connect_impl(&path, host, port);
}

std::shared_ptr<SimPath> Net::make_path(const std::string& id, const std::string& kind) {
  PathKind k = PathKind::Simulated;
  if (kind == "wifi") k = PathKind::Wifi;
  else if (kind == "cellular") k = PathKind::Cellular;
  return std::make_shared<SimPath>(*this, id, k);
}

// --- SimPath ---

SimPath::SimPath(Net& net, std::string id, PathKind kind)
    : net_(net), id_(std::move(id)), kind_(kind) {}

PathState SimPath::state() const {
  std::lock_guard<std::mutex> g(net_.mu_);
  return state_;
}

Seconds SimPath::latency() const {
  std::lock_guard<std::mutex> g(net_.mu_);
  return latency_;
}

void SimPath::set_latency(Seconds s) {
  std::lock_guard<std::mutex> g(net_.mu_);
  latency_ = s;
}

std::unique_ptr<Stream> SimPath::connect(const std::string& host, int port,
                                         std::optional<Seconds>) {
  return net_.connect_impl(this, host, port);
}

void SimPath::attach_locked(const std::shared_ptr<Channel>& ch) {
  prune_locked();
  conns_.push_back(ch);
}

void SimPath::prune_locked() {
  conns_.erase(std::remove_if(conns_.begin(), conns_.end(),
                              [](const std::weak_ptr<Channel>& w) { return w.expired(); }),
               conns_.end());
}

size_t SimPath::live_connections() const {
  std::lock_guard<std::mutex> g(net_.mu_);
  size_t n = 0;
  for (auto& w : conns_)
    if (auto ch = w.lock())
      if (!ch->a2b.killed && !(ch->a2b.wclosed && ch->b2a.wclosed)) ++n;
  return n;
}

bool SimPath::kill_connection(uint64_t conn_id) {
  std::lock_guard<std::mutex> g(net_.mu_);
  for (auto& w : conns_) {
    if (auto ch = w.lock(); ch && ch->conn_id == conn_id) {
      ch->a2b.killed = ch->b2a.killed = true;
      net_.cv_.notify_all();
      return true;
    }
  }
  return false;
}

void SimPath::set_state(PathState s) {
  std::lock_guard<std::mutex> g(net_.mu_);
  if (state_ == s) return;
  state_ = s;
  if (s == PathState::Disabled) {
    for (auto& w : conns_)
      if (auto ch = w.lock()) ch->a2b.killed = ch->b2a.killed = true;
  }
  net_.cv_.notify_all();
}

// --- ChannelStream ---

ChannelStream::ChannelStream(Net& net, std::shared_ptr<Channel> ch, bool is_a)
    : net_(net), ch_(std::move(ch)), a_(is_a) {}

ChannelStream::~ChannelStream() { close(); }

Pipe& ChannelStream::rd() const { return a_ ? ch_->b2a : ch_->a2b; }
Pipe& ChannelStream::wr() const { return a_ ? ch_->a2b : ch_->b2a; }

uint64_t ChannelStream::conn_id() const { return ch_->conn_id; }

std::string ChannelStream::path_id() const {
  std::lock_guard<std::mutex> g(net_.lock());
  return ch_->path ? ch_->path->id_ : std::string("local");
}

std::string ChannelStream::peer_label() const { return ch_->label; }

bool ChannelStream::stalled_locked() const {
  return ch_->path && ch_->path->state_ == PathState::Down;
}

ReadResult ChannelStream::read(char* buf, size_t max, std::optional<Seconds> deadline) {
  if (max == 0) return {0, StreamStatus::Ok};
  std::unique_lock<std::mutex> lk(net_.lock());
  Pipe& p = rd();
  auto readable = [&]() -> bool {
    if (p.killed) return true;
    if (stalled_locked()) return false;
    if (!p.q.empty() && p.q.front().ready <= net_.vnow_now_locked()) return true;
    return p.q.empty() && p.wclosed;
  };
  auto next_event = [&]() -> std::optional<Seconds> {
    if (stalled_locked() || p.q.empty()) return std::nullopt;
    return p.q.front().ready;
  };
  bool got = net_.wait(lk, readable, deadline, next_event);
  if (!got) return {0, StreamStatus::Timeout};
  if (p.killed) return {0, StreamStatus::Error};
  if (p.q.empty() && p.wclosed) return {0, StreamStatus::Eof};
  auto& c = p.q.front();
  size_t n = std::min(max, c.data.size() - c.off);
  std::copy_n(c.data.data() + c.off, n, buf);
  c.off += n;
  p.queued -= n;
  if (c.off == c.data.size()) p.q.pop_front();
  net_.notify_all_locked();  // writer may unblock
  return {n, StreamStatus::Ok};
}

StreamStatus ChannelStream::wait_readable(std::optional<Seconds> deadline) {
  std::unique_lock<std::mutex> lk(net_.lock());
  Pipe& p = rd();
  auto readable = [&]() -> bool {
    if (p.killed) return true;
    if (stalled_locked()) return false;
    if (!p.q.empty() && p.q.front().ready <= net_.vnow_now_locked()) return true;
    return p.q.empty() && p.wclosed;
  };
  auto next_event = [&]() -> std::optional<Seconds> {
    if (stalled_locked() || p.q.empty()) return std::nullopt;
    return p.q.front().ready;
  };
  if (!net_.wait(lk, readable, deadline, next_event)) return StreamStatus::Timeout;
  if (p.killed) return StreamStatus::Error;
  if (p.q.empty() && p.wclosed) return StreamStatus::Eof;
  return StreamStatus::Ok;
}

bool ChannelStream::write(const char* data, size_t len) {
  std::unique_lock<std::mutex> lk(net_.lock());
  Pipe& p = wr();
  size_t off = 0;
  while (off < len) {
    auto can_write = [&] { return p.killed || p.rclosed || p.queued < p.capacity; };
    net_.wait(lk, can_write, std::nullopt);
    if (p.killed || p.rclosed) return false;
    size_t n = std::min(len - off, p.capacity - p.queued);
    Seconds now = net_.vnow_now_locked();
    Seconds lat = ch_->path ? ch_->path->latency_ : 0.0;
    Pipe::Chunk c;
    c.data.assign(data + off, data + off + n);
    c.ready = std::max(now + lat, p.last_ready);
    p.last_ready = c.ready;
    p.q.push_back(std::move(c));
    p.queued += n;
    off += n;
    net_.notify_all_locked();
  }
  return true;
}

void ChannelStream::close() {
  if (closed_) return;
  closed_ = true;
  std::lock_guard<std::mutex> g(net_.lock());
  wr().wclosed = true;
  rd().rclosed = true;
  net_.notify_all_locked();
}

void ChannelStream::kill() {
  std::lock_guard<std::mutex> g(net_.lock());
  ch_->a2b.killed = true;
  ch_->b2a.killed = true;
  net_.notify_all_locked();
}

// --- VirtualListener ---

VirtualListener::VirtualListener(Net& net, std::string host, int port)
    : net_(net), host_(std::move(host)), port_(port) {}

VirtualListener::~VirtualListener() { close(); }

std::optional<VirtualListener::Accepted> VirtualListener::accept_meta() {
  std::unique_lock<std::mutex> lk(net_.lock());
  bool ok = net_.wait(lk, [&] { return closed_ || !backlog_.empty(); }, std::nullopt);
  if (!ok || closed_) return std::nullopt;
  Pending p = std::move(backlog_.front());
  backlog_.pop_front();
  ++accepted_;
  Accepted a;
  a.stream = std::make_unique<ChannelStream>(net_, p.ch, /*is_a=*/false);
  a.path_id = p.path_id;
  a.t = p.t;
  return a;
}

std::unique_ptr<Stream> VirtualListener::accept() {
  auto a = accept_meta();
  if (!a) return nullptr;
  return std::move(a->stream);
}

void VirtualListener::close() {
  std::lock_guard<std::mutex> g(net_.lock());
  if (closed_) return;
  closed_ = true;
  for (auto& p : backlog_) p.ch->b2a.killed = p.ch->a2b.killed = true;
  backlog_.clear();
  net_.notify_all_locked();
}

size_t VirtualListener::accepted_count() const {
  std::lock_guard<std::mutex> g(net_.lock());
  return accepted_;
}

}  // namespace flowmig

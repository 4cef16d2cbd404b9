#include "flowmig/netharness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "flowmig/common.hpp"
#include "flowmig/flow_manager.hpp"
#include "json.hpp"

namespace flowmig {

std::string to_string(OriginBehavior b) {
  switch (b) {
    case OriginBehavior::StaticRange: return "static_range";
    case OriginBehavior::StaticNoRange: return "static_norange";
    case OriginBehavior::Chunked: return "chunked";
    case OriginBehavior::DynamicJitter: return "dynamic_jitter";
    case OriginBehavior::NoCacheStatic: return "nocache_static";
    case OriginBehavior::PostEcho: return "post_echo";
  }
  return "?";
}

size_t RequestLog::append(RequestLogEntry e) {
  std::lock_guard<std::mutex> g(mu_);
  entries_.push_back(std::move(e));
  return entries_.size() - 1;
}

void RequestLog::set_status(size_t idx, int status) {
  std::lock_guard<std::mutex> g(mu_);
  if (idx < entries_.size()) entries_[idx].status = status;
}

void RequestLog::add_bytes(size_t idx, uint64_t n) {
  std::lock_guard<std::mutex> g(mu_);
  if (idx < entries_.size()) entries_[idx].bytes_served += n;
}

std::vector<RequestLogEntry> RequestLog::snapshot() const {
  std::lock_guard<std::mutex> g(mu_);
  return entries_;
}

size_t RequestLog::size() const {
  std::lock_guard<std::mutex> g(mu_);
  return entries_.size();
}

size_t RequestLog::count_method(std::string_view method) const {
  std::lock_guard<std::mutex> g(mu_);
  size_t n = 0;
  for (const auto& e : entries_)
    if (iequals(e.method, method)) ++n;
  return n;
}

Origin::Origin(Net& net, OriginProfile profile, std::string host, int port)
    : net_(net),
      profile_(std::move(profile)),
      host_(std::move(host)),
      port_(port),
      log_(std::make_shared<RequestLog>()) {}

void Origin::start() {
  listener_ = net_.listen(host_, port_);
  if (port_ == 0) port_ = listener_->port();
  net_.spawn("origin-" + host_, [this] {
    for (;;) {
      auto a = listener_->accept_meta();
      if (!a) break;
      std::shared_ptr<Stream> s(std::move(a->stream));
      std::string pid = a->path_id;
      net_.spawn("origin-" + host_ + "-conn", [this, s, pid]() mutable {
        serve_stream(std::move(s), pid);
      });
    }
  });
}

void Origin::stop() {
  if (listener_) listener_->close();
}

void Origin::set_stream_wrapper(
    std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)> w) {
  wrapper_ = std::move(w);
}

std::string Origin::canonical_body() const {
  return seeded_bytes(profile_.body_seed, profile_.body_length);
}

long Origin::variant_shift(size_t k) const {
  if (!profile_.jitter_shifts.empty()) {
    size_t i = std::min(k, profile_.jitter_shifts.size() - 1);
    return profile_.jitter_shifts[i];
  }
  if (k == 0) return 0;
  long j = (long)(profile_.length_jitter_fraction * (double)profile_.body_length);
  if (j <= 0) return 0;
  Rng rng(profile_.body_seed * 1000003 + k);
  std::uniform_int_distribution<long> d(-j, j);
  return d(rng);
}

std::string Origin::variant_body(size_t k) const {
  std::string body = canonical_body();
  long s = variant_shift(k);
  if (s == 0) return body;
  size_t pos = std::min(profile_.offset_region_begin, body.size());
  if (s > 0) {
    std::string ins = seeded_bytes(profile_.body_seed ^ (0x9e3779b97f4a7c15ull + k), (size_t)s);
    body.insert(pos, ins);
  } else {
    size_t del = std::min((size_t)(-s), body.size() - pos);
    body.erase(pos, del);
  }
  return body;
}

size_t Origin::next_variant() {
  std::lock_guard<std::mutex> g(mu_);
  return variant_counter_++;
}

void Origin::serve_stream(std::shared_ptr<Stream> s, const std::string& path_id) {
  std::shared_ptr<Stream> held = s;
  if (wrapper_) {
    struct Adopt : Stream {  // hand the shared stream to the wrapper as owned
      std::shared_ptr<Stream> inner;
      explicit Adopt(std::shared_ptr<Stream> i) : inner(std::move(i)) {}
      ReadResult read(char* b, size_t m, std::optional<Seconds> d) override {
        return inner->read(b, m, d);
      }
      bool write(const char* p, size_t n) override { return inner->write(p, n); }
      StreamStatus wait_readable(std::optional<Seconds> d) override {
        return inner->wait_readable(d);
      }
      void close() override { inner->close(); }
      void kill() override { inner->kill(); }
      std::string peer_label() const override { return inner->peer_label(); }
    };
    auto wrapped = wrapper_(std::make_unique<Adopt>(held));
    if (!wrapped) {
      held->close();
      return;
    }
    held = std::shared_ptr<Stream>(std::move(wrapped));
  }
  BufferedReader r(*held);
  for (;;) {
    RequestHead req;
    auto hr = read_request_head(r, req, std::nullopt);
    if (hr != HeadResult::Ok) break;
    bool keep = handle_one(r, *held, std::move(req), path_id);
    if (!keep) break;
  }
  held->close();
}

namespace {

// "bytes=N-" or "bytes=N-M"; suffix and multi ranges unsupported.
std::optional<std::pair<uint64_t, std::optional<uint64_t>>> parse_range_spec(
    std::string_view v) {
  std::string_view s = trim(v);
  const std::string prefix = "bytes=";
  if (s.size() <= prefix.size()) return std::nullopt;
  for (size_t i = 0; i < prefix.size(); ++i)
    if (std::tolower((unsigned char)s[i]) != prefix[i]) return std::nullopt;
  std::string_view spec(s.data() + prefix.size(), s.size() - prefix.size());
  if (spec.find(',') != std::string_view::npos) return std::nullopt;
  size_t dash = spec.find('-');
  if (dash == std::string_view::npos || dash == 0) return std::nullopt;
  auto digits = [](std::string_view d, uint64_t& out) {
    if (d.empty()) return false;
    out = 0;
    for (char c : d) {
      if (c < '0' || c > '9') return false;
      out = out * 10 + (uint64_t)(c - '0');
    }
    return true;
  };
  uint64_t first = 0;
  if (!digits(spec.substr(0, dash), first)) return std::nullopt;
  std::string_view rest = spec.substr(dash + 1);
  if (rest.empty()) return {{first, std::nullopt}};
  uint64_t last = 0;
  if (!digits(rest, last) || last < first) return std::nullopt;
  return {{first, last}};
}

bool write_sliced(Stream& s, std::string_view data, RequestLog& log, size_t idx) {
  size_t off = 0;
  while (off < data.size()) {
    size_t n = std::min<size_t>(2048, data.size() - off);
    if (!s.write(data.data() + off, n)) return false;
    log.add_bytes(idx, n);
    off += n;
  }
  return true;
}

bool wants_close(const RequestHead& req) {
  if (req.headers.has_token("Connection", "close")) return true;
  if (req.is_http10() && !req.headers.has_token("Connection", "keep-alive")) return true;
  return false;
}

}  // namespace

bool Origin::handle_one(BufferedReader& r, Stream& s, RequestHead req,
                        const std::string& path_id) {
  size_t idx = log_->append({net_.now(), req.method, path_id,
                             req.headers.get("Range"), 0, req.target, 0});
  // Request body (Content-Length framing only).
  std::string req_body;
  if (auto cl = req.headers.get("Content-Length")) {
    uint64_t v = 0;
    for (char c : trim(*cl)) {
      if (c < '0' || c > '9') { v = 0; break; }
      v = v * 10 + (uint64_t)(c - '0');
    }
    if (v > 0) {
      req_body.resize((size_t)v);
      if (r.read_exact(req_body.data(), (size_t)v, std::nullopt) != StreamStatus::Ok)
        return false;
    }
  }

  bool keep = !wants_close(req);
  bool ok = true;
  switch (profile_.behavior) {
    case OriginBehavior::StaticRange:
      ok = serve_static(s, req, canonical_body(), true, true, false, idx);
      break;
    case OriginBehavior::NoCacheStatic:
      ok = serve_static(s, req, canonical_body(), true, true, true, idx);
      break;
    case OriginBehavior::StaticNoRange:
      ok = serve_static(s, req, canonical_body(), false, false, false, idx);
      break;
    case OriginBehavior::Chunked:
      ok = serve_chunked(s, canonical_body(), idx);
      break;
    case OriginBehavior::DynamicJitter:
      ok = serve_static(s, req, variant_body(next_variant()), true, true, false, idx);
      break;
    case OriginBehavior::PostEcho: {
      std::string body = iequals(req.method, "POST") ? req_body : std::string("post echo ready\n");
      ResponseHead rh;
      rh.status = 200;
      rh.reason = "OK";
      rh.headers.add("Content-Type", "application/octet-stream");
      rh.headers.add("Content-Length", std::to_string(body.size()));
      log_->set_status(idx, 200);
      ok = s.write(rh.serialize()) && write_sliced(s, body, *log_, idx);
      break;
    }
  }
  return ok && keep;
}

bool Origin::serve_static(Stream& s, const RequestHead& req, const std::string& body,
                          bool honor_range, bool advertise_range, bool no_cache,
                          size_t log_idx) {
  ResponseHead rh;
  rh.headers.add("Content-Type", "application/octet-stream");
  if (advertise_range) rh.headers.add("Accept-Ranges", "bytes");
  if (no_cache) rh.headers.add("Cache-Control", "no-cache");

  std::string_view slice(body);
  auto range_hdr = req.headers.get("Range");
  if (honor_range && range_hdr) {
    auto spec = parse_range_spec(*range_hdr);
    if (!spec || spec->first >= body.size()) {
      rh.status = 416;
      rh.reason = "Range Not Satisfiable";
      rh.headers.add("Content-Range", "bytes */" + std::to_string(body.size()));
      rh.headers.add("Content-Length", "0");
      log_->set_status(log_idx, 416);
      return s.write(rh.serialize());
    }
    uint64_t first = spec->first;
    uint64_t last = spec->second ? std::min<uint64_t>(*spec->second, body.size() - 1)
                                 : body.size() - 1;
    slice = std::string_view(body).substr((size_t)first, (size_t)(last - first + 1));
    rh.status = 206;
    rh.reason = "Partial Content";
    rh.headers.add("Content-Range", "bytes " + std::to_string(first) + "-" +
                                        std::to_string(last) + "/" +
                                        std::to_string(body.size()));
  } else {
    rh.status = 200;
    rh.reason = "OK";
  }
  rh.headers.add("Content-Length", std::to_string(slice.size()));
  log_->set_status(log_idx, rh.status);
  if (!s.write(rh.serialize())) return false;
  return write_sliced(s, slice, *log_, log_idx);
}

bool Origin::serve_chunked(Stream& s, const std::string& body, size_t log_idx) {
  ResponseHead rh;
  rh.status = 200;
  rh.reason = "OK";
  rh.headers.add("Content-Type", "application/octet-stream");
  rh.headers.add("Transfer-Encoding", "chunked");
  log_->set_status(log_idx, 200);
  if (!s.write(rh.serialize())) return false;
  size_t off = 0;
  char head[32];
  while (off < body.size()) {
    size_t n = std::min<size_t>(1024, body.size() - off);
    int hl = std::snprintf(head, sizeof(head), "%zx\r\n", n);
    if (!s.write(head, (size_t)hl)) return false;
    if (!s.write(body.data() + off, n)) return false;
    if (!s.write("\r\n", 2)) return false;
    log_->add_bytes(log_idx, n);
    off += n;
  }
  return s.write("0\r\n\r\n", 5);
}

// --- link scripts ---

std::string to_string(LinkEvent::Kind k) {
  switch (k) {
    case LinkEvent::Kind::Up: return "up";
    case LinkEvent::Kind::Down: return "down";
    case LinkEvent::Kind::Latency: return "latency";
    case LinkEvent::Kind::Rssi: return "rssi";
  }
  return "?";
}

namespace {

std::optional<LinkEvent::Kind> kind_from(const std::string& s) {
  if (s == "up") return LinkEvent::Kind::Up;
  if (s == "down") return LinkEvent::Kind::Down;
  if (s == "latency") return LinkEvent::Kind::Latency;
  if (s == "rssi") return LinkEvent::Kind::Rssi;
  return std::nullopt;
}

bool needs_value(LinkEvent::Kind k) {
  return k == LinkEvent::Kind::Latency || k == LinkEvent::Kind::Rssi;
}

}  // namespace

LinkScript parse_script_jsonl(const std::string& text,
                              const std::string& origin_label) {
  LinkScript out;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  Seconds prev = -kInfSeconds;
  while (std::getline(in, line)) {
    ++lineno;
    std::string t(trim(line));
    if (t.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(t, nullptr, false);
    auto fail = [&](const std::string& why) -> SchemaError {
      return SchemaError(origin_label + ":" + std::to_string(lineno) + ": " +
                         why);
    };
    if (j.is_discarded() || !j.is_object()) throw fail("not a JSON object");
    if (!j.contains("t") || !j["t"].is_number())
      throw fail("missing numeric 't'");
    if (!j.contains("path") || !j["path"].is_string())
      throw fail("missing string 'path'");
    if (!j.contains("event") || !j["event"].is_string())
      throw fail("missing string 'event'");
    LinkEvent e;
    e.t = j["t"].get<double>();
    e.path = j["path"].get<std::string>();
    auto k = kind_from(j["event"].get<std::string>());
    if (!k) throw fail("unknown event '" + j["event"].get<std::string>() + "'");
    e.kind = *k;
    if (needs_value(e.kind)) {
      if (!j.contains("value") || !j["value"].is_number())
        throw fail("'" + to_string(e.kind) + "' needs a numeric 'value'");
      e.value = j["value"].get<double>();
      if (e.kind == LinkEvent::Kind::Latency && e.value < 0)
        throw fail("negative latency");
    }
    if (e.t < prev) throw fail("events out of order");
    prev = e.t;
    out.events.push_back(std::move(e));
  }
  out.duration = out.events.empty() ? 0 : out.events.back().t;
  return out;
}

LinkScript load_script_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open script: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_script_jsonl(ss.str(), path);
}

void save_script_jsonl(const std::string& path, const LinkScript& script) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write script: " + path);
  for (const auto& e : script.events) {
    nlohmann::json j;
    j["t"] = e.t;
    j["path"] = e.path;
    j["event"] = to_string(e.kind);
    if (needs_value(e.kind)) j["value"] = e.value;
    f << j.dump() << "\n";
  }
}

LinkScript walk_script() {
  LinkScript s;
  auto ev = [&](Seconds t, const char* path, LinkEvent::Kind k, double v = 0) {
    s.events.push_back(LinkEvent{t, path, k, v});
  };
  // Apartment-grade links: 50 ms each way.
  ev(0.0, "wifi0", LinkEvent::Kind::Latency, 50);
  ev(0.0, "cell0", LinkEvent::Kind::Latency, 50);
  // Two coverage gaps with a weak-signal approach, plus one sub-second blip
  // that should not trip the switch policy.
  ev(52.0, "wifi0", LinkEvent::Kind::Down);
  ev(57.0, "wifi0", LinkEvent::Kind::Up);
  ev(150.7, "wifi0", LinkEvent::Kind::Down);
  ev(156.0, "wifi0", LinkEvent::Kind::Up);
  ev(245.8, "wifi0", LinkEvent::Kind::Down);
  ev(247.1, "wifi0", LinkEvent::Kind::Up);
  for (int t = 0; t < 300; ++t) {
    double rssi = -55;
    if (t >= 44 && t <= 51) rssi = -78;
    if (t >= 148 && t <= 156) rssi = -85;
    ev(static_cast<Seconds>(t), "wifi0", LinkEvent::Kind::Rssi, rssi);
  }
  std::stable_sort(s.events.begin(), s.events.end(),
                   [](const LinkEvent& a, const LinkEvent& b) { return a.t < b.t; });
  s.duration = 300.0;
  return s;
}

LinkScript drive_script() {
  LinkScript s;
  auto ev = [&](Seconds t, const char* path, LinkEvent::Kind k, double v = 0) {
    s.events.push_back(LinkEvent{t, path, k, v});
  };
  // Seven 42 s blocks: signal sags near the cell edge, then an access-point
  // handoff takes the link out for 6.4 s.
  for (int k = 0; k < 8; ++k) {
    double c = 42.0 * k;
    if (c >= 300.0) break;
    if (c + 30.0 < 300.0) {
      ev(c + 30.0, "wifi0", LinkEvent::Kind::Down);
      ev(c + 36.4, "wifi0", LinkEvent::Kind::Up);
    }
    for (int r = 0; r <= 41; ++r) {
      double t = c + r;
      if (t >= 300.0) break;
      double rssi = (r >= 28 && r <= 36) ? -82 : -55;
      ev(t, "wifi0", LinkEvent::Kind::Rssi, rssi);
    }
  }
  std::stable_sort(s.events.begin(), s.events.end(),
                   [](const LinkEvent& a, const LinkEvent& b) { return a.t < b.t; });
  s.duration = 300.0;
  return s;
}

ScriptRunStats run_script(
    Net& net, const std::map<std::string, std::shared_ptr<SimPath>>& paths,
    const LinkScript& script,
    const std::function<void(const std::string& path_id, const SignalSample&)>&
        on_rssi) {
  ScriptRunStats st;
  for (const auto& e : script.events) {
    if (e.t > net.now()) net.sleep_until(e.t);
    auto it = paths.find(e.path);
    if (it == paths.end())
      throw ConfigError("script references unknown path: " + e.path);
    SimPath& p = *it->second;
    switch (e.kind) {
      case LinkEvent::Kind::Up:
        p.set_state(PathState::Up);
        break;
      case LinkEvent::Kind::Down:
        p.set_state(PathState::Down);
        break;
      case LinkEvent::Kind::Latency:
        p.set_latency(e.value / 1000.0);
        break;
      case LinkEvent::Kind::Rssi: {
        SignalSample smp;
        smp.t = e.t;
        smp.rssi_dbm = e.value;
        smp.associated = p.state() == PathState::Up;
        ++st.rssi_samples;
        if (on_rssi) on_rssi(e.path, smp);
        break;
      }
    }
    ++st.events_applied;
  }
  st.end_time = net.now();
  return st;
}

// --- minimal GET client ---

HarnessFetchResult harness_fetch(
    Stream& s, const std::string& host, const std::string& target,
    std::optional<Seconds> deadline,
    const std::vector<std::pair<std::string, std::string>>& extra_headers) {
  HarnessFetchResult out;
  RequestHead req;
  req.method = "GET";
  req.target = target;
  req.headers.add("Host", host);
  for (const auto& [k, v] : extra_headers) req.headers.add(k, v);
  req.headers.add("Connection", "close");
  if (!s.write(req.serialize())) return out;

  BufferedReader r(s);
  ResponseHead head;
  if (read_response_head(r, head, deadline) != HeadResult::Ok) return out;
  out.status = head.status;
  out.head = head;

  char buf[16 * 1024];
  if (head.chunked()) {
    ChunkedBodyReader body(r);
    for (;;) {
      auto rr = body.read(buf, sizeof buf, deadline);
      out.body.append(buf, rr.n);
      if (rr.status == StreamStatus::Eof) {
        out.ok = true;
        return out;
      }
      if (rr.status != StreamStatus::Ok) return out;
    }
  }
  auto cl = head.content_length();
  for (;;) {
    if (cl && out.body.size() >= *cl) {
      out.ok = out.body.size() == *cl;
      return out;
    }
    auto rr = r.read_some(buf, sizeof buf, deadline);
    out.body.append(buf, rr.n);
    if (rr.status == StreamStatus::Eof) {
      out.ok = !cl || out.body.size() == *cl;
      return out;
    }
    if (rr.status != StreamStatus::Ok) return out;
  }
}

// --- transfer battery ---

std::string to_string(BatteryMode m) {
  switch (m) {
    case BatteryMode::NoPolicy: return "no_policy";
    case BatteryMode::WaitNMigrate: return "wait_n_migrate";
    case BatteryMode::WaitNMigrateResumption: return "wnm_resumption";
  }
  return "?";
}

BatteryRun run_battery_once(const BatteryOptions& opt, size_t size,
                            BatteryMode mode) {
  Net net;
  auto wifi = net.make_path("wifi0", "wifi");
  auto cell = net.make_path("cell0", "cellular");
  std::map<std::string, std::shared_ptr<SimPath>> path_map{{"wifi0", wifi},
                                                           {"cell0", cell}};

  OriginProfile prof;
  prof.behavior = OriginBehavior::StaticRange;
  prof.body_seed = opt.body_seed;
  prof.body_length = size;
  Origin origin(net, prof, "origin.test", 80);
  const std::string canon = origin.canonical_body();

  std::optional<FlowManager> fm;
  OutcomeLog outcomes;
  std::optional<ResumptionProxy> proxy;
  if (mode != BatteryMode::NoPolicy) {
    fm.emplace(net);
    fm->add_path(wifi);
    fm->add_path(cell);
  }
  if (mode == BatteryMode::WaitNMigrateResumption) {
    proxy.emplace(net, opt.proxy, fm->upstream_provider(), outcomes);
    proxy->set_hooks(fm->hooks());
  }

  size_t attempts = 0;
  std::atomic<size_t> completed{0};
  {
    Net::ActorGuard guard(net, "battery");
    origin.start();
    if (proxy) proxy->start(net.listen("proxy.local", opt.proxy.listen_port));

    WaitGroup wg(net);
    PolicyState pstate;
    auto on_rssi = [&](const std::string&, const SignalSample& smp) {
      if (!fm) return;
      SwitchAction act = observe(pstate, opt.autoswitch, smp);
      if (act == SwitchAction::None) return;
      std::string target =
          act == SwitchAction::SwitchToCellular ? "cell0" : "wifi0";
      if (fm->plan_active()) fm->tick();
      // A still-draining plan wins over a new switch decision; the policy
      // retries on a later trigger.
      if (fm->plan_active() || fm->primary() == target) return;
      fm->begin_migration(
          target, [w = opt.wait_time](const FlowRecord&) { return w; });
    };

    wg.add();
    net.spawn("script", [&] {
      run_script(net, path_map, opt.script, on_rssi);
      wg.done();
    });
    if (fm) {
      wg.add();
      // Offset keeps ticks off every instant the script or kicker uses.
      net.spawn("ticker", [&] {
        for (Seconds t = 0.13; t < opt.duration; t += 0.25) {
          net.sleep_until(t);
          fm->tick();
        }
        wg.done();
      });
    }

    for (Seconds t = opt.kick_offset; t < opt.duration; t += opt.interval) {
      net.sleep_until(t);
      ++attempts;
      wg.add();
      net.spawn("client" + std::to_string(attempts), [&, t] {
        Seconds deadline = t + opt.client_deadline;
        bool good = false;
        if (mode == BatteryMode::NoPolicy) {
          auto s = net.connect_via(*wifi, "origin.test", 80);
          if (s) {
            auto r = harness_fetch(*s, "origin.test", "/file", deadline);
            good = r.ok && r.status == 200 && r.body == canon;
          }
        } else if (mode == BatteryMode::WaitNMigrate) {
          auto up = fm->upstream_provider()("origin.test", 80);
          if (up && up->stream) {
            std::shared_ptr<Stream> sp(std::move(up->stream));
            uint64_t id = fm->flow_opened(up->path_id, "origin.test", 80, sp);
            auto r = harness_fetch(*sp, "origin.test", "/file", deadline);
            good = r.ok && r.status == 200 && r.body == canon;
            fm->flow_closed(id);
          }
        } else {
          auto s = net.connect_local("proxy.local", opt.proxy.listen_port);
          if (s) {
            auto r = harness_fetch(*s, "origin.test",
                                   "http://origin.test/file", deadline);
            good = r.ok && r.status == 200 && r.body == canon;
          }
        }
        if (good) completed.fetch_add(1);
        wg.done();
      });
    }
    wg.wait();
    net.sleep_for(1.0);
  }
  net.shutdown();

  BatteryRun run;
  run.cell = BatteryCell{attempts, completed.load()};
  run.origin_log = origin.log()->snapshot();
  return run;
}

BatteryTable transfer_battery(const BatteryOptions& opt) {
  BatteryTable table;
  for (size_t size : opt.sizes)
    for (BatteryMode mode :
         {BatteryMode::NoPolicy, BatteryMode::WaitNMigrate,
          BatteryMode::WaitNMigrateResumption})
      table[size][mode] = run_battery_once(opt, size, mode).cell;
  return table;
}

std::string battery_to_json(const BatteryTable& table) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& [size, by_mode] : table) {
    for (const auto& [mode, cell] : by_mode) {
      nlohmann::json row;
      row["size_bytes"] = size;
      row["mode"] = to_string(mode);
      row["attempts"] = cell.attempts;
      row["completed"] = cell.completed;
      row["success_rate"] = cell.rate();
      rows.push_back(std::move(row));
    }
  }
  nlohmann::json j;
  j["battery"] = std::move(rows);
  return j.dump(2);
}

}  // namespace flowmig

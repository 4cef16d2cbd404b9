#include "flowmig/proxy.hpp"

#include <algorithm>
#include <cstring>
#include <ostream>

#include "json.hpp"

namespace flowmig {

namespace {

constexpr size_t kMaxClientBody = 8 * 1024 * 1024;

bool parse_u64(std::string_view s, uint64_t& out) {
  if (s.empty()) return false;
  uint64_t v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return false;
    v = v * 10 + (uint64_t)(c - '0');
  }
  out = v;
  return true;
}

bool request_signals_body(const RequestHead& req) {
  if (req.headers.has_token("Transfer-Encoding", "chunked")) return true;
  if (auto cl = req.headers.get("Content-Length")) {
    uint64_t v = 0;
    if (parse_u64(trim(*cl), v)) return v > 0;
    return true;  // unparseable length: treat as body-bearing, never resume
  }
  return false;
}

bool client_wants_keepalive(const RequestHead& req) {
  if (req.headers.has_token("Connection", "close")) return false;
  if (req.is_http10()) {
    return req.headers.has_token("Connection", "keep-alive") ||
           req.headers.has_token("Proxy-Connection", "keep-alive");
  }
  return true;
}

bool send_simple_response(Stream& s, int status, const std::string& reason,
                          const std::string& body) {
  ResponseHead rh;
  rh.status = status;
  rh.reason = reason;
  rh.headers.add("Content-Type", "text/plain");
  rh.headers.add("Content-Length", std::to_string(body.size()));
  rh.headers.add("Connection", "close");
  return s.write(rh.serialize()) && s.write(body);
}

// Logical body bytes of one upstream response: identity (optionally length
// capped) or de-chunked.
class BodySource {
 public:
  BodySource(BufferedReader& r, bool chunked, std::optional<uint64_t> length)
      : r_(r), chunked_(chunked), remaining_(length), decoder_(r) {}

  ReadResult read(char* dst, size_t max, std::optional<Seconds> deadline) {
    if (chunked_) return decoder_.read(dst, max, deadline);
    if (remaining_) {
      if (*remaining_ == 0) return {0, StreamStatus::Eof};
      max = (size_t)std::min<uint64_t>(max, *remaining_);
    }
    auto rr = r_.read_some(dst, max, deadline);
    if (rr.status == StreamStatus::Ok && remaining_) *remaining_ -= rr.n;
    return rr;
  }

 private:
  BufferedReader& r_;
  bool chunked_;
  std::optional<uint64_t> remaining_;
  ChunkedBodyReader decoder_;
};

}  // namespace

// --- config ---

ProxyConfig proxy_config_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("proxy config is not valid JSON: ") + e.what());
  }
  ProxyConfig c;
  try {
    if (j.contains("listen_port")) c.listen_port = j.at("listen_port").get<int>();
    if (j.contains("max_retries")) c.max_retries = j.at("max_retries").get<int>();
    if (j.contains("chunk_bytes")) c.chunk_bytes = j.at("chunk_bytes").get<size_t>();
    if (j.contains("overlap_bytes")) c.overlap_bytes = j.at("overlap_bytes").get<size_t>();
    if (j.contains("max_offset_bytes"))
      c.max_offset_bytes = j.at("max_offset_bytes").get<size_t>();
    if (j.contains("idle_timeout_s")) c.idle_timeout_s = j.at("idle_timeout_s").get<double>();
    if (j.contains("ignore_no_cache")) c.ignore_no_cache = j.at("ignore_no_cache").get<bool>();
    if (j.contains("retry_pause_s")) c.retry_pause_s = j.at("retry_pause_s").get<double>();
    if (j.contains("connect_timeout_s"))
      c.connect_timeout_s = j.at("connect_timeout_s").get<double>();
    if (j.contains("workers")) c.workers = j.at("workers").get<size_t>();
    if (j.contains("workers_max")) c.workers_max = j.at("workers_max").get<size_t>();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(std::string("bad proxy config value: ") + e.what());
  }
  if (c.listen_port < 0 || c.listen_port > 65535)
    throw ConfigError("listen_port out of range");
  if (c.max_retries < 0) throw ConfigError("max_retries must be >= 0");
  if (c.chunk_bytes == 0) throw ConfigError("chunk_bytes must be > 0");
  if (c.idle_timeout_s <= 0) throw ConfigError("idle_timeout_s must be > 0");
  if (c.retry_pause_s < 0) throw ConfigError("retry_pause_s must be >= 0");
  if (c.workers == 0 || c.workers_max < c.workers)
    throw ConfigError("workers must be >= 1 and <= workers_max");
  return c;
}

std::string to_string(ResumeClass c) {
  switch (c) {
    case ResumeClass::RangeResumable: return "range_resumable";
    case ResumeClass::RestartAndDiscard: return "restart_and_discard";
    case ResumeClass::NeverResume: return "never_resume";
  }
  return "?";
}

std::string to_string(TransferOutcome o) {
  switch (o) {
    case TransferOutcome::Completed: return "completed";
    case TransferOutcome::Failed: return "failed";
    case TransferOutcome::ClientGone: return "client_gone";
  }
  return "?";
}

std::string to_jsonl(const OutcomeRecord& r) {
  nlohmann::json j{{"url", r.url},
                   {"status", r.status},
                   {"bytes", r.bytes},
                   {"tries", r.tries},
                   {"resume_class", to_string(r.resume_class)},
                   {"outcome", to_string(r.outcome)},
                   {"duration_s", r.duration_s}};
  return j.dump();
}

void OutcomeLog::append(const OutcomeRecord& r) {
  std::lock_guard<std::mutex> g(mu_);
  records_.push_back(r);
  if (sink_) (*sink_) << to_jsonl(r) << "\n";
}

std::vector<OutcomeRecord> OutcomeLog::snapshot() const {
  std::lock_guard<std::mutex> g(mu_);
  return records_;
}

size_t OutcomeLog::size() const {
  std::lock_guard<std::mutex> g(mu_);
  return records_.size();
}

void OutcomeLog::set_sink(std::ostream* sink) {
  std::lock_guard<std::mutex> g(mu_);
  sink_ = sink;
}

// --- resumability rules ---

ResumeClass classify_resumability(const RequestHead& req, const ResponseHead& resp,
                                  bool ignore_no_cache) {
  if (request_signals_body(req)) return ResumeClass::NeverResume;
  if (!ignore_no_cache) {
    if (resp.no_cache_response() || req.headers.has_token("Pragma", "no-cache"))
      return ResumeClass::NeverResume;
  }
  if (resp.accept_ranges() && resp.content_length()) return ResumeClass::RangeResumable;
  return ResumeClass::RestartAndDiscard;
}

ResumeDecision decide_resume(const TransferState& st) {
  ResumeDecision d;
  if (st.resume_class == ResumeClass::NeverResume || st.request_has_body) {
    d.action = ResumeDecision::Action::Abort;
    d.reason = ResumeDecision::Reason::NeverResumable;
    return d;
  }
  if (st.tries >= st.max_retries) {
    d.action = ResumeDecision::Action::Abort;
    d.reason = ResumeDecision::Reason::RetriesExhausted;
    return d;
  }
  if (!st.response) {
    d.action = ResumeDecision::Action::RestartDiscard;
    d.reason = ResumeDecision::Reason::NothingDeliveredYet;
    return d;
  }
  if (st.resume_class == ResumeClass::RangeResumable) {
    uint64_t w = std::min<uint64_t>(st.delivered, st.overlap_bytes);
    d.action = ResumeDecision::Action::ResumeAtOffset;
    d.reason = ResumeDecision::Reason::Resumable;
    d.offset = st.delivered - w;
    return d;
  }
  d.action = ResumeDecision::Action::RestartDiscard;
  d.reason = ResumeDecision::Reason::NoRangeSupport;
  return d;
}

ReconcileResult reconcile_overlap(std::string_view expected, std::string_view received,
                                  size_t max_offset) {
  const long w = (long)expected.size();
  auto match_at = [&](long j) -> bool {
    if (j >= 0) {
      if ((size_t)j + (size_t)w > received.size()) return false;
      return std::memcmp(received.data() + j, expected.data(), (size_t)w) == 0;
    }
    long k = -j;
    if (k >= w) return false;
    size_t len = (size_t)(w - k);
    if (received.size() < len) return false;
    return std::memcmp(received.data(), expected.data() + k, len) == 0;
  };
  if (w == 0) return {true, 0};
  if (match_at(0)) return {true, 0};
  for (long j = 1; j <= (long)max_offset; ++j) {
    if (match_at(j)) return {true, j};
    if (match_at(-j)) return {true, -j};
  }
  return {false, 0};
}

// --- one client transfer ---

namespace {
struct Target {
  std::string url;   // absolute, for the log
  std::string host;
  int port = 80;
  std::string path = "/";
  std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)> wrap;
};
}  // namespace

class Transfer {
 public:
  struct Result {
    OutcomeRecord rec;
    bool keep_alive = false;
  };

  Transfer(ResumptionProxy& px, Stream& client, RequestHead req, std::string body,
           Target tgt)
      : px_(px),
        cfg_(px.config()),
        net_(px.net()),
        client_(client),
        tgt_(std::move(tgt)) {
    st_.request = std::move(req);
    st_.max_retries = cfg_.max_retries;
    st_.overlap_bytes = cfg_.overlap_bytes;
    st_.request_has_body = request_signals_body(st_.request);
    body_ = std::move(body);
  }

  Result run() {
    t0_ = net_.now();
    if (auto rv = st_.request.headers.get("Range")) {
      if (auto off = parse_single_open_range(*rv))
        base_offset_ = *off;
      else
        range_passthrough_ = true;  // closed/suffix/multi: relay but never resume
    }
    while (!final_) {
      if (!establish()) continue;
      if (!send_upstream_request()) {
        on_attempt_broken();
        continue;
      }
      ResponseHead rh;
      auto hr = read_response_head(*ur_, rh, net_.now() + cfg_.idle_timeout_s);
      if (hr != HeadResult::Ok) {
        on_attempt_broken();
        continue;
      }
      bool relay_ready = head_sent_ ? process_resumed_response(std::move(rh))
                                    : process_first_response(std::move(rh));
      if (!relay_ready) continue;
      relay();
    }
    return *final_;
  }

 private:
  // Terminal states ------------------------------------------------------

  void finish(TransferOutcome outcome, bool keep) {
    drop_upstream();
    Result r;
    r.rec.url = tgt_.url;
    r.rec.status = status_;
    r.rec.bytes = st_.delivered;
    r.rec.tries = st_.tries;
    r.rec.resume_class = st_.resume_class;
    r.rec.outcome = outcome;
    r.rec.duration_s = net_.now() - t0_;
    r.keep_alive = keep;
    final_ = std::move(r);
  }

  void finish_completed() { finish(TransferOutcome::Completed, keep_alive_after_); }

  void finish_failed() {
    if (head_sent_) {
      client_.kill();  // mid-body truncation; client must not trust the bytes
    } else {
      status_ = 502;
      send_simple_response(client_, 502, "Bad Gateway", "upstream transfer failed\n");
    }
    finish(TransferOutcome::Failed, false);
  }

  void finish_client_gone() { finish(TransferOutcome::ClientGone, false); }

  // Attempt plumbing -----------------------------------------------------

  ResumeDecision decide() const {
    if (range_passthrough_) {
      ResumeDecision d;
      d.action = ResumeDecision::Action::Abort;
      d.reason = ResumeDecision::Reason::NeverResumable;
      return d;
    }
    return decide_resume(st_);
  }

  // Burns one retry or finishes the transfer; true if a retry is allowed.
  bool consume_retry() {
    auto d = decide();
    if (d.action == ResumeDecision::Action::Abort) {
      finish_failed();
      return false;
    }
    st_.tries += 1;
    plan_ = d;
    if (cfg_.retry_pause_s > 0) net_.sleep_for(cfg_.retry_pause_s);
    return true;
  }

  void on_attempt_broken() {
    drop_upstream();
    if (promised_ && st_.delivered >= *promised_) {
      finish_completed();
      return;
    }
    consume_retry();
  }

  bool establish() {
    auto up = px_.acquire_upstream(tgt_.host, tgt_.port, tgt_.wrap);
    attempts_ += 1;
    if (!up) {
      if (attempts_ == 1 && !head_sent_) {
        status_ = 502;
        send_simple_response(client_, 502, "Bad Gateway", "upstream unreachable\n");
        finish(TransferOutcome::Failed, false);
        return false;
      }
      consume_retry();
      return false;
    }
    up_ = std::move(up->stream);
    up_key_ = up->key;
    up_moved_ = 0;
    ur_ = std::make_unique<BufferedReader>(*up_);
    return true;
  }

  void drop_upstream() {
    body_src_.reset();
    ur_.reset();
    if (up_) {
      up_->close();
      px_.release_upstream(up_key_, up_moved_);
      up_.reset();
    }
  }

  bool send_upstream_request() {
    RequestHead out;
    out.method = st_.request.method;
    out.version = "HTTP/1.1";
    out.target = tgt_.path;
    bool range_overridden = plan_ && plan_->action == ResumeDecision::Action::ResumeAtOffset;
    for (const auto& [name, value] : st_.request.headers.items) {
      if (is_hop_by_hop(name)) continue;
      if (iequals(name, "Content-Length")) continue;
      if (range_overridden && iequals(name, "Range")) continue;
      out.headers.add(name, value);
    }
    if (range_overridden) {
      uint64_t abs = base_offset_ + plan_->offset;
      out.headers.add("Range", "bytes=" + std::to_string(abs) + "-");
      resume_offset_abs_ = abs;
    }
    if (!out.headers.has("Host")) {
      std::string host = tgt_.host;
      if (tgt_.port != 80 && tgt_.port != 443) host += ":" + std::to_string(tgt_.port);
      out.headers.add("Host", host);
    }
    if (!body_.empty()) out.headers.add("Content-Length", std::to_string(body_.size()));
    out.headers.add("Connection", "close");
    if (!up_->write(out.serialize())) return false;
    if (!body_.empty() && !up_->write(body_)) return false;
    return true;
  }

  void make_body_source(const ResponseHead& rh, bool bodyless) {
    std::optional<uint64_t> cap;
    bool chunked = false;
    if (bodyless)
      cap = 0;
    else if (rh.chunked())
      chunked = true;
    else
      cap = rh.content_length();  // nullopt = connection-delimited
    body_src_ = std::make_unique<BodySource>(*ur_, chunked, cap);
  }

  bool response_is_bodyless(const ResponseHead& rh) const {
    if (iequals(st_.request.method, "HEAD")) return true;
    return rh.status == 204 || rh.status == 304 || (rh.status >= 100 && rh.status < 200);
  }

  bool process_first_response(ResponseHead rh) {
    status_ = rh.status;
    st_.resume_class = range_passthrough_
                           ? ResumeClass::NeverResume
                           : classify_resumability(st_.request, rh, cfg_.ignore_no_cache);
    bool bodyless = response_is_bodyless(rh);
    bool chunked = !bodyless && rh.chunked();
    bool has_cl = !bodyless && rh.content_length().has_value();
    if (bodyless)
      promised_ = 0;
    else if (has_cl)
      promised_ = rh.content_length();
    else
      promised_ = std::nullopt;

    ResponseHead out;
    out.version = "HTTP/1.1";
    out.status = rh.status;
    out.reason = rh.reason;
    for (const auto& [name, value] : rh.headers.items) {
      if (is_hop_by_hop(name)) continue;
      if (iequals(name, "Connection")) continue;
      out.headers.add(name, value);
    }
    bool close_after = chunked || (!bodyless && !has_cl);
    if (close_after) {
      out.headers.remove("Content-Length");
      out.headers.add("Connection", "close");
      keep_alive_after_ = false;
    } else {
      keep_alive_after_ = client_wants_keepalive(st_.request);
      out.headers.add("Connection", keep_alive_after_ ? "keep-alive" : "close");
    }
    make_body_source(rh, bodyless);
    st_.response = std::move(rh);
    if (!client_.write(out.serialize())) {
      finish_client_gone();
      return false;
    }
    head_sent_ = true;
    return true;
  }

  bool process_resumed_response(ResponseHead rh) {
    bool range_resume = plan_ && plan_->action == ResumeDecision::Action::ResumeAtOffset;
    if (range_resume) {
      if (rh.status == 206) {
        auto crv = rh.headers.get("Content-Range");
        auto cr = crv ? parse_content_range(*crv) : std::nullopt;
        if (cr && cr->first == resume_offset_abs_) {
          make_body_source(rh, false);
          return reconcile_and_continue(0);
        }
        // Served a range from somewhere else; distrust Range support.
        st_.resume_class = ResumeClass::RestartAndDiscard;
        drop_upstream();
        consume_retry();
        return false;
      }
      if (rh.status == status_) {
        // Origin ignored the Range after all: full body, discard the prefix.
        st_.resume_class = ResumeClass::RestartAndDiscard;
        make_body_source(rh, false);
        return reconcile_and_continue(skip_for_restart());
      }
      drop_upstream();
      consume_retry();
      return false;
    }
    if (rh.status != status_) {
      drop_upstream();
      consume_retry();
      return false;
    }
    make_body_source(rh, response_is_bodyless(rh));
    return reconcile_and_continue(skip_for_restart());
  }

  uint64_t skip_for_restart() const {
    uint64_t w = std::min<uint64_t>(st_.delivered, cfg_.overlap_bytes);
    return st_.delivered - w;
  }

  // Discards `skip` logical bytes, buffers the overlap window plus slack,
  // verifies it, then forwards any surplus. True when the relay loop should
  // continue on this attempt.
  bool reconcile_and_continue(uint64_t skip) {
    uint64_t w = std::min<uint64_t>(st_.delivered, cfg_.overlap_bytes);
    if (w == 0) return true;  // nothing delivered yet: plain restart
    std::string buf(cfg_.chunk_bytes, '\0');
    while (skip > 0) {
      size_t want = (size_t)std::min<uint64_t>(buf.size(), skip);
      auto rr = body_src_->read(buf.data(), want, net_.now() + cfg_.idle_timeout_s);
      if (rr.status != StreamStatus::Ok) {
        on_attempt_broken();
        return false;
      }
      skip -= rr.n;
    }
    const size_t goal = (size_t)w + cfg_.max_offset_bytes;
    std::string window;
    window.reserve(goal);
    bool hit_eof = false;
    while (window.size() < goal) {
      size_t want = std::min(buf.size(), goal - window.size());
      auto rr = body_src_->read(buf.data(), want, net_.now() + cfg_.idle_timeout_s);
      if (rr.status == StreamStatus::Ok) {
        window.append(buf.data(), rr.n);
        continue;
      }
      if (rr.status == StreamStatus::Eof) {
        hit_eof = true;
        break;
      }
      on_attempt_broken();
      return false;
    }
    auto rec = reconcile_overlap(st_.overlap, window, cfg_.max_offset_bytes);
    if (!rec.matched) {
      finish_failed();
      return false;
    }
    size_t cont = (size_t)((long)w + rec.offset);
    if (cont < window.size()) {
      if (!deliver(window.data() + cont, window.size() - cont)) return false;
      if (final_) return false;
    }
    if (hit_eof) {
      if (!promised_ || st_.delivered >= *promised_)
        finish_completed();
      else
        on_attempt_broken();
      return false;
    }
    if (promised_ && st_.delivered >= *promised_) {
      finish_completed();
      return false;
    }
    return true;
  }

  // Forwards payload to the client, capped at the promised total; updates
  // the rolling overlap window. False on client failure or terminal state.
  bool deliver(const char* p, size_t n) {
    if (promised_) {
      uint64_t left = *promised_ - std::min<uint64_t>(*promised_, st_.delivered);
      n = (size_t)std::min<uint64_t>(n, left);
    }
    if (n == 0) return true;
    if (!client_.write(p, n)) {
      finish_client_gone();
      return false;
    }
    st_.delivered += n;
    up_moved_ += n;
    if (up_ && px_.hooks_.on_upstream_bytes) px_.hooks_.on_upstream_bytes(up_key_, n);
    st_.overlap.append(p, n);
    if (st_.overlap.size() > cfg_.overlap_bytes)
      st_.overlap.erase(0, st_.overlap.size() - cfg_.overlap_bytes);
    return true;
  }

  void relay() {
    std::string buf(cfg_.chunk_bytes, '\0');
    for (;;) {
      if (promised_ && st_.delivered >= *promised_) {
        finish_completed();
        return;
      }
      size_t want = buf.size();
      if (promised_) want = (size_t)std::min<uint64_t>(want, *promised_ - st_.delivered);
      auto rr = body_src_->read(buf.data(), want, net_.now() + cfg_.idle_timeout_s);
      if (rr.status == StreamStatus::Ok) {
        if (!deliver(buf.data(), rr.n)) return;
        continue;
      }
      if (rr.status == StreamStatus::Eof) {
        if (!promised_) {
          finish_completed();  // chunked terminal or connection end
        } else if (st_.delivered >= *promised_) {
          finish_completed();
        } else {
          on_attempt_broken();
        }
        return;
      }
      on_attempt_broken();  // Timeout or Error mid-body
      return;
    }
  }

  ResumptionProxy& px_;
  const ProxyConfig& cfg_;
  Net& net_;
  Stream& client_;
  Target tgt_;

  TransferState st_;
  std::string body_;
  uint64_t base_offset_ = 0;
  bool range_passthrough_ = false;
  std::optional<ResumeDecision> plan_;
  uint64_t resume_offset_abs_ = 0;
  bool head_sent_ = false;
  bool keep_alive_after_ = false;
  std::optional<uint64_t> promised_;
  int status_ = 0;
  int attempts_ = 0;
  Seconds t0_ = 0;
  std::optional<Result> final_;

  std::shared_ptr<Stream> up_;
  uint64_t up_key_ = 0;
  uint64_t up_moved_ = 0;
  std::unique_ptr<BufferedReader> ur_;
  std::unique_ptr<BodySource> body_src_;

  friend class ResumptionProxy;
};

// --- proxy server ---

ResumptionProxy::ResumptionProxy(Net& net, ProxyConfig cfg, UpstreamProvider provider,
                                 OutcomeLog& log)
    : net_(net), cfg_(cfg), provider_(std::move(provider)), log_(log) {}

ResumptionProxy::~ResumptionProxy() { shutdown(); }

void ResumptionProxy::set_connect_handler(ConnectHandler h) {
  connect_handler_ = std::move(h);
}

void ResumptionProxy::set_hooks(TransferHooks hooks) { hooks_ = std::move(hooks); }

std::optional<ResumptionProxy::Acquired> ResumptionProxy::acquire_upstream(
    const std::string& host, int port,
    const std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)>& wrap) {
  auto conn = provider_(host, port);
  if (!conn || !conn->stream) return std::nullopt;
  std::unique_ptr<Stream> s = std::move(conn->stream);
  if (wrap) {
    s = wrap(std::move(s));
    if (!s) return std::nullopt;
  }
  Acquired a;
  a.stream = std::shared_ptr<Stream>(std::move(s));
  a.path_id = conn->path_id;
  a.key = next_conn_key_.fetch_add(1);
  if (hooks_.on_upstream_open)
    hooks_.on_upstream_open(a.key, host, port, a.path_id, a.stream);
  return a;
}

void ResumptionProxy::release_upstream(uint64_t key, uint64_t bytes_moved) {
  if (hooks_.on_upstream_close) hooks_.on_upstream_close(key, bytes_moved);
}

void ResumptionProxy::start(std::shared_ptr<Listener> listener) {
  listener_ = std::move(listener);
  size_t n = cfg_.workers;
  {
    std::lock_guard<std::mutex> g(net_.lock());
    pool_size_ = n;
  }
  for (size_t i = 0; i < n; ++i) spawn_worker();
  net_.spawn("px-accept", [this] {
    for (;;) {
      auto s = listener_->accept();
      if (!s) break;
      bool grow = false;
      {
        std::lock_guard<std::mutex> g(net_.lock());
        if (stopping_) break;
        backlog_.push_back(std::move(s));
        size_t idle = pool_size_ > busy_ ? pool_size_ - busy_ : 0;
        if (backlog_.size() > idle && pool_size_ < cfg_.workers_max) {
          pool_size_ += 1;
          grow = true;
        }
        net_.notify_all_locked();
      }
      if (grow) spawn_worker();
    }
  });
}

void ResumptionProxy::spawn_worker() {
  size_t id = workers_spawned_.fetch_add(1) + 1;
  net_.spawn("px-worker-" + std::to_string(id), [this] { worker_loop(); });
}

void ResumptionProxy::worker_loop() {
  for (;;) {
    std::unique_ptr<Stream> s;
    {
      std::unique_lock<std::mutex> lk(net_.lock());
      net_.wait(lk, [&] { return stopping_ || !backlog_.empty(); }, std::nullopt);
      if (backlog_.empty()) return;  // stopping and drained
      s = std::move(backlog_.front());
      backlog_.pop_front();
      busy_ += 1;
    }
    handle_connection(std::move(s));
    {
      std::lock_guard<std::mutex> g(net_.lock());
      busy_ -= 1;
    }
  }
}

void ResumptionProxy::shutdown() {
  {
    std::lock_guard<std::mutex> g(net_.lock());
    if (stopping_) return;
    stopping_ = true;
    net_.notify_all_locked();
  }
  if (listener_) listener_->close();
}

namespace {
enum class BodyRead { Ok, TooLarge, Broken };

BodyRead read_client_body(BufferedReader& r, const RequestHead& req, std::string& out) {
  if (req.headers.has_token("Transfer-Encoding", "chunked")) {
    ChunkedBodyReader dec(r);
    char buf[4096];
    for (;;) {
      auto rr = dec.read(buf, sizeof(buf), std::nullopt);
      if (rr.status == StreamStatus::Eof) return BodyRead::Ok;
      if (rr.status != StreamStatus::Ok) return BodyRead::Broken;
      out.append(buf, rr.n);
      if (out.size() > kMaxClientBody) return BodyRead::TooLarge;
    }
  }
  if (auto cl = req.headers.get("Content-Length")) {
    uint64_t v = 0;
    if (!parse_u64(trim(*cl), v)) return BodyRead::Broken;
    if (v > kMaxClientBody) return BodyRead::TooLarge;
    out.resize((size_t)v);
    if (v == 0) return BodyRead::Ok;
    if (r.read_exact(out.data(), (size_t)v, std::nullopt) != StreamStatus::Ok)
      return BodyRead::Broken;
    return BodyRead::Ok;
  }
  return BodyRead::Ok;
}
}  // namespace

void ResumptionProxy::handle_connection(std::unique_ptr<Stream> client) {
  BufferedReader reader(*client);
  bool keep = true;
  while (keep) {
    RequestHead req;
    auto hr = read_request_head(reader, req, std::nullopt);
    if (hr == HeadResult::Malformed) {
      send_simple_response(*client, 400, "Bad Request", "malformed request\n");
      break;
    }
    if (hr != HeadResult::Ok) break;  // client done or gone

    if (iequals(req.method, "CONNECT")) {
      if (connect_handler_)
        connect_handler_(std::move(client), req.target);
      else
        blind_tunnel(std::move(client), req.target);
      return;  // connection handed off
    }

    auto url = parse_absolute_url(req.target);
    if (!url || url->scheme != "http") {
      send_simple_response(*client, 400, "Bad Request",
                           "absolute http:// URL or CONNECT required\n");
      break;
    }
    std::string body;
    auto br = read_client_body(reader, req, body);
    if (br == BodyRead::TooLarge) {
      send_simple_response(*client, 413, "Payload Too Large", "request body too large\n");
      break;
    }
    if (br == BodyRead::Broken) break;

    Target tgt;
    tgt.url = req.target;
    tgt.host = url->host;
    tgt.port = url->port;
    tgt.path = url->path;
    Transfer t(*this, *client, std::move(req), std::move(body), std::move(tgt));
    auto res = t.run();
    log_.append(res.rec);
    bool stop;
    {
      std::lock_guard<std::mutex> g(net_.lock());
      stop = stopping_;
    }
    keep = res.keep_alive && !stop;
  }
  client->close();
}

void ResumptionProxy::serve_fixed(std::unique_ptr<Stream> client, FixedTarget target) {
  BufferedReader reader(*client);
  bool keep = true;
  while (keep) {
    RequestHead req;
    auto hr = read_request_head(reader, req, std::nullopt);
    if (hr == HeadResult::Malformed) {
      send_simple_response(*client, 400, "Bad Request", "malformed request\n");
      break;
    }
    if (hr != HeadResult::Ok) break;
    if (req.target.empty() || req.target[0] != '/') {
      send_simple_response(*client, 400, "Bad Request", "origin-form target required\n");
      break;
    }
    std::string body;
    auto br = read_client_body(reader, req, body);
    if (br == BodyRead::TooLarge) {
      send_simple_response(*client, 413, "Payload Too Large", "request body too large\n");
      break;
    }
    if (br == BodyRead::Broken) break;

    bool default_port = (target.scheme == "https" && target.port == 443) ||
                        (target.scheme == "http" && target.port == 80);
    Target tgt;
    tgt.url = target.scheme + "://" + target.host +
              (default_port ? "" : ":" + std::to_string(target.port)) + req.target;
    tgt.host = target.host;
    tgt.port = target.port;
    tgt.path = req.target;
    tgt.wrap = target.wrap_upstream;
    Transfer t(*this, *client, std::move(req), std::move(body), std::move(tgt));
    auto res = t.run();
    log_.append(res.rec);
    bool stop;
    {
      std::lock_guard<std::mutex> g(net_.lock());
      stop = stopping_;
    }
    keep = res.keep_alive && !stop;
  }
  client->close();
}

namespace {
void pump(Stream& from, Stream& to) {
  char buf[4096];
  for (;;) {
    auto rr = from.read(buf, sizeof(buf), std::nullopt);
    if (rr.status != StreamStatus::Ok) return;
    if (!to.write(buf, rr.n)) return;
  }
}
}  // namespace

void ResumptionProxy::blind_tunnel(std::unique_ptr<Stream> client,
                                   const std::string& authority) {
  auto auth = parse_authority(authority);
  if (!auth) {
    send_simple_response(*client, 400, "Bad Request", "bad CONNECT authority\n");
    return;
  }
  auto up = acquire_upstream(auth->first, auth->second, {});
  if (!up) {
    send_simple_response(*client, 502, "Bad Gateway", "upstream unreachable\n");
    return;
  }
  if (!client->write("HTTP/1.1 200 Connection Established\r\n\r\n")) {
    up->stream->close();
    release_upstream(up->key, 0);
    return;
  }
  std::shared_ptr<Stream> c(std::move(client));
  std::shared_ptr<Stream> u = up->stream;
  net_.spawn("tunnel-rev", [c, u] {
    pump(*u, *c);
    c->kill();
    u->kill();
  });
  pump(*c, *u);
  c->kill();
  u->kill();
  release_upstream(up->key, 0);
}

}  // namespace flowmig

#pragma once

#include <atomic>
#include <deque>
#include <functional>
#include <iosfwd>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "flowmig/http.hpp"
#include "flowmig/net.hpp"
#include "flowmig/stream.hpp"

namespace flowmig {

struct ProxyConfig {
  int listen_port = 8080;
  int max_retries = 50;
  size_t chunk_bytes = 2048;
  size_t overlap_bytes = 4096;
  size_t max_offset_bytes = 1024;
  Seconds idle_timeout_s = 5.0;
  bool ignore_no_cache = false;
  Seconds retry_pause_s = 1.0;
  Seconds connect_timeout_s = 10.0;
  size_t workers = 4;
  size_t workers_max = 64;
};

ProxyConfig proxy_config_from_json(const std::string& text);

enum class ResumeClass { RangeResumable, RestartAndDiscard, NeverResume };
enum class TransferOutcome { Completed, Failed, ClientGone };
std::string to_string(ResumeClass c);
std::string to_string(TransferOutcome o);

// One line per client transfer, mirrored to an optional JSONL sink.
struct OutcomeRecord {
  std::string url;
  int status = 0;
  uint64_t bytes = 0;
  int tries = 0;  // resume attempts beyond the first request
  ResumeClass resume_class = ResumeClass::RestartAndDiscard;
  TransferOutcome outcome = TransferOutcome::Failed;
  Seconds duration_s = 0;
};
std::string to_jsonl(const OutcomeRecord& r);

class OutcomeLog {
 public:
  void append(const OutcomeRecord& r);
  std::vector<OutcomeRecord> snapshot() const;
  size_t size() const;
  void set_sink(std::ostream* sink);  // not owned; JSONL mirror

 private:
  mutable std::mutex mu_;
  std::vector<OutcomeRecord> records_;
  std::ostream* sink_ = nullptr;
};

// Content rules: body-bearing requests and (by default) no-cache exchanges are
// never resumed; Range resume needs both Accept-Ranges and a known length.
ResumeClass classify_resumability(const RequestHead& req, const ResponseHead& resp,
                                  bool ignore_no_cache = false);

struct TransferState {
  RequestHead request;
  std::optional<ResponseHead> response;
  uint64_t delivered = 0;
  int tries = 0;
  int max_retries = 50;
  ResumeClass resume_class = ResumeClass::RestartAndDiscard;
  std::string overlap;  // rolling last min(delivered, overlap_bytes) bytes
  size_t overlap_bytes = 4096;
  bool request_has_body = false;
};

struct ResumeDecision {
  enum class Action { ResumeAtOffset, RestartDiscard, Abort };
  enum class Reason {
    Resumable,
    NoRangeSupport,
    NothingDeliveredYet,
    NeverResumable,
    RetriesExhausted,
  };
  Action action = Action::Abort;
  Reason reason = Reason::NeverResumable;
  uint64_t offset = 0;  // ResumeAtOffset only; relative to delivery start
};

ResumeDecision decide_resume(const TransferState& st);

// Verifies the overlap window against the head of a re-fetched stream.
// expected: last W delivered bytes. received: up to W + max_offset bytes
// buffered from the new stream. Scans shifts 0, +1, -1, +2, -2, ... and the
// first exact match wins; negative shifts compare the surviving suffix.
struct ReconcileResult {
  bool matched = false;
  long offset = 0;
};
ReconcileResult reconcile_overlap(std::string_view expected, std::string_view received,
                                  size_t max_offset);

// How the proxy reaches origins; re-consulted on every attempt so a path
// switch between retries takes effect.
struct UpstreamConn {
  std::unique_ptr<Stream> stream;
  std::string path_id = "direct";
};
using UpstreamProvider =
    std::function<std::optional<UpstreamConn>(const std::string& host, int port)>;

// Observation points for flow accounting (who is connected where, and the
// ability to sever it). Keys are unique per upstream connection.
struct TransferHooks {
  std::function<void(uint64_t key, const std::string& host, int port,
                     const std::string& path_id, const std::shared_ptr<Stream>& s)>
      on_upstream_open;
  std::function<void(uint64_t key, uint64_t n)> on_upstream_bytes;
  std::function<void(uint64_t key, uint64_t bytes_moved)> on_upstream_close;
};

class ResumptionProxy {
 public:
  ResumptionProxy(Net& net, ProxyConfig cfg, UpstreamProvider provider, OutcomeLog& log);
  ~ResumptionProxy();

  // CONNECT handling; default is a blind byte tunnel via the provider.
  using ConnectHandler =
      std::function<void(std::unique_ptr<Stream> client, const std::string& authority)>;
  void set_connect_handler(ConnectHandler h);
  void set_hooks(TransferHooks hooks);

  // Spawns the accept loop and worker pool onto the net.
  void start(std::shared_ptr<Listener> listener);
  // Stops accepting, lets workers finish their current connection, releases them.
  void shutdown();

  // Serves one client connection to completion (callable directly in tests).
  void handle_connection(std::unique_ptr<Stream> client);

  // Serves a connection whose target is already fixed (decrypted CONNECT
  // payload): requests arrive in origin-form and go to host:port, optionally
  // wrapped (TLS client handshake) per attempt.
  struct FixedTarget {
    std::string scheme = "https";
    std::string host;
    int port = 443;
    std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)> wrap_upstream;
  };
  void serve_fixed(std::unique_ptr<Stream> client, FixedTarget target);

  // Byte tunnel via the provider (what CONNECT does with no handler installed);
  // lets a handler fall back to pass-through.
  void tunnel(std::unique_ptr<Stream> client, const std::string& authority) {
    blind_tunnel(std::move(client), authority);
  }

  const ProxyConfig& config() const { return cfg_; }
  Net& net() { return net_; }
  OutcomeLog& outcomes() { return log_; }
  size_t workers_spawned() const { return workers_spawned_.load(); }

 private:
  friend class Transfer;
  struct Acquired {
    std::shared_ptr<Stream> stream;
    std::string path_id;
    uint64_t key = 0;
  };
  std::optional<Acquired> acquire_upstream(
      const std::string& host, int port,
      const std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)>& wrap);
  void release_upstream(uint64_t key, uint64_t bytes_moved);
  void blind_tunnel(std::unique_ptr<Stream> client, const std::string& authority);
  void spawn_worker();
  void worker_loop();

  Net& net_;
  ProxyConfig cfg_;
  UpstreamProvider provider_;
  OutcomeLog& log_;
  ConnectHandler connect_handler_;
  TransferHooks hooks_;

  std::shared_ptr<Listener> listener_;
  std::deque<std::unique_ptr<Stream>> backlog_;
  size_t busy_ = 0;
  size_t pool_size_ = 0;
  bool stopping_ = false;
  std::atomic<size_t> workers_spawned_{0};
  std::atomic<uint64_t> next_conn_key_{1};
};

}  // namespace flowmig

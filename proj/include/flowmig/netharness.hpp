#pragma once

#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "flowmig/autoswitch.hpp"
#include "flowmig/http.hpp"
#include "flowmig/net.hpp"
#include "flowmig/proxy.hpp"

namespace flowmig {

// Mock origin servers with controllable resume semantics.
enum class OriginBehavior {
  StaticRange,     // stable body, honors Range
  StaticNoRange,   // stable body, ignores Range entirely
  Chunked,         // stable body, chunked framing, no length up front
  DynamicJitter,   // every request serves a slightly shifted variant
  NoCacheStatic,   // stable body, honors Range, marked Cache-Control: no-cache
  PostEcho,        // echoes POST bodies back
};
std::string to_string(OriginBehavior b);

struct OriginProfile {
  OriginBehavior behavior = OriginBehavior::StaticRange;
  uint64_t body_seed = 1;
  size_t body_length = 64 * 1024;
  // DynamicJitter: edits happen at offset_region_begin, sized so byte
  // positions drift by at most floor(length_jitter_fraction * body_length).
  double length_jitter_fraction = 0.0;
  size_t offset_region_begin = 0;
  size_t offset_region_end = 0;
  // Explicit per-request drift in bytes (insert > 0, delete < 0); when empty
  // the drift is seeded and bounded by the jitter fraction. Request k past
  // the end of the list reuses the last entry.
  std::vector<long> jitter_shifts;
};

struct RequestLogEntry {
  Seconds t = 0;
  std::string method;
  std::string path_id;
  std::optional<std::string> range_header;
  uint64_t bytes_served = 0;
  std::string target;
  int status = 0;
};

class RequestLog {
 public:
  size_t append(RequestLogEntry e);
  void set_status(size_t idx, int status);
  void add_bytes(size_t idx, uint64_t n);
  std::vector<RequestLogEntry> snapshot() const;
  size_t size() const;
  size_t count_method(std::string_view method) const;

 private:
  mutable std::mutex mu_;
  std::vector<RequestLogEntry> entries_;
};

// In-net HTTP origin exhibiting exactly one profile's semantics.
class Origin {
 public:
  Origin(Net& net, OriginProfile profile, std::string host, int port = 80);

  void start();  // binds and spawns the accept loop
  void stop();   // closes the listener; live connections finish on their own

  const std::string& host() const { return host_; }
  int port() const { return port_; }
  const OriginProfile& profile() const { return profile_; }
  std::shared_ptr<RequestLog> log() const { return log_; }

  // Variant 0 (and the only variant for static profiles).
  std::string canonical_body() const;
  // Body served to the k-th body-bearing request of a DynamicJitter origin.
  std::string variant_body(size_t k) const;
  long variant_shift(size_t k) const;

  // Serves one already-accepted stream (TLS-wrapped origins reuse this).
  void serve_stream(std::shared_ptr<Stream> s, const std::string& path_id);
  // Applied to every accepted raw stream before HTTP (e.g. TLS accept).
  void set_stream_wrapper(
      std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)> w);

 private:
  bool handle_one(BufferedReader& r, Stream& s, RequestHead req,
                  const std::string& path_id);
  bool serve_static(Stream& s, const RequestHead& req, const std::string& body,
                    bool honor_range, bool advertise_range, bool no_cache,
                    size_t log_idx);
  bool serve_chunked(Stream& s, const std::string& body, size_t log_idx);
  size_t next_variant();

  Net& net_;
  OriginProfile profile_;
  std::string host_;
  int port_;
  std::shared_ptr<RequestLog> log_;
  std::shared_ptr<VirtualListener> listener_;
  std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)> wrapper_;
  std::mutex mu_;
  size_t variant_counter_ = 0;
};

// --- link scripts ---

struct LinkEvent {
  enum class Kind { Up, Down, Latency, Rssi };
  Seconds t = 0;
  std::string path;
  Kind kind = Kind::Up;
  double value = 0;  // latency in ms, rssi in dBm; unused for up/down
};

std::string to_string(LinkEvent::Kind k);

struct LinkScript {
  std::vector<LinkEvent> events;  // ordered by time
  Seconds duration = 0;
};

LinkScript parse_script_jsonl(const std::string& text,
                              const std::string& origin_label = "<script>");
LinkScript load_script_jsonl(const std::string& path);
void save_script_jsonl(const std::string& path, const LinkScript& script);

// Canned 300 s schedules: a walk past two coverage gaps plus a sub-second
// blip, and a drive cycling through seven cell handoff dead zones.
LinkScript walk_script();
LinkScript drive_script();

struct ScriptRunStats {
  size_t events_applied = 0;
  size_t rssi_samples = 0;
  Seconds end_time = 0;
};

// Plays the script from the calling actor: sleeps to each event's time, flips
// path state / latency, and hands rssi readings to on_rssi. Readings taken
// while the path is down are marked unassociated.
ScriptRunStats run_script(
    Net& net, const std::map<std::string, std::shared_ptr<SimPath>>& paths,
    const LinkScript& script,
    const std::function<void(const std::string& path_id, const SignalSample&)>&
        on_rssi = {});

// --- minimal GET client for harness work ---

struct HarnessFetchResult {
  bool ok = false;  // response fully framed and read before the deadline
  int status = 0;
  ResponseHead head;
  std::string body;
};

HarnessFetchResult harness_fetch(
    Stream& s, const std::string& host, const std::string& target,
    std::optional<Seconds> deadline,
    const std::vector<std::pair<std::string, std::string>>& extra_headers = {});

// --- transfer battery ---

enum class BatteryMode { NoPolicy, WaitNMigrate, WaitNMigrateResumption };

std::string to_string(BatteryMode m);

struct BatteryOptions {
  std::vector<size_t> sizes = {10 * 1024, 100 * 1024, 1024 * 1024};
  Seconds interval = 5.0;         // gap between transfer starts
  Seconds duration = 300.0;       // battery span
  Seconds kick_offset = 0.5;      // first transfer start; keeps kicks clear of
                                  // integer-time script events
  Seconds client_deadline = 5.0;  // per-transfer budget
  LinkScript script;
  PolicyConfig autoswitch;
  Seconds wait_time = 10.0;  // drain budget handed to migrations
  ProxyConfig proxy;
  uint64_t body_seed = 7;

  BatteryOptions() { proxy.idle_timeout_s = 1.0; }
};

struct BatteryCell {
  size_t attempts = 0;
  size_t completed = 0;
  double rate() const {
    return attempts ? double(completed) / double(attempts) : 1.0;
  }
};

struct BatteryRun {
  BatteryCell cell;
  std::vector<RequestLogEntry> origin_log;
};

// One (size, mode) cell on a fresh virtual network.
BatteryRun run_battery_once(const BatteryOptions& opt, size_t size,
                            BatteryMode mode);

using BatteryTable = std::map<size_t, std::map<BatteryMode, BatteryCell>>;

BatteryTable transfer_battery(const BatteryOptions& opt);
std::string battery_to_json(const BatteryTable& table);

}  // namespace flowmig

#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowmig/net.hpp"
#include "flowmig/proxy.hpp"
#include "flowmig/traffic_model.hpp"

namespace flowmig {

class FlowError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct FlowInfo {
  uint64_t id = 0;
  std::string path_id;
  std::string destination;  // host:port
  int dst_port = 0;
  bool interactive = false;
  Seconds t_open = 0;
  uint64_t bytes = 0;
  double bandwidth_bps = 0;  // over the sliding window

  PortCategory category() const { return classify_port(dst_port, false); }
  FlowRecord record() const;
};

struct MigrationTallies {
  size_t drained_naturally = 0;
  size_t force_terminated = 0;
  size_t migrated_clean = 0;  // terminated flows whose destination reopened on the new path
  size_t disrupted = 0;
};

struct MigrationPlan {
  enum class Mode { DualPath, SinglePathSpecial };
  uint64_t plan_id = 0;
  std::string from_path;
  std::string to_path;
  Mode mode = Mode::DualPath;
  Seconds t_begin = 0;
  size_t live_at_begin = 0;
  bool complete = false;
  Seconds t_complete = 0;
  MigrationTallies tallies;
  std::map<uint64_t, Seconds> deadlines;  // old-path flows still draining
};

struct TickAction {
  enum class Kind { TerminateFlow, CompletePlan };
  Kind kind;
  uint64_t flow_id = 0;
};

struct MigrationEvent {
  Seconds t = 0;
  std::string event;  // begin|terminate|complete|set_primary|disable
  std::optional<uint64_t> flow_id;
  std::string path_id;
  std::optional<MigrationTallies> tallies;
};

std::string to_jsonl(const MigrationEvent& e);

using WaitTimePolicy = std::function<Seconds(const FlowRecord&)>;

struct FlowManagerConfig {
  Seconds bandwidth_window = 2.0;
  double long_lived_threshold = 0.5;
  Seconds switch_latency = 0.3;  // single-path connectivity gap
};

// Tracks live flows across paths, keeps a primary path for new connections,
// and drives migrations: drain-with-deadline on dual-homed devices, or a
// best-moment switch when only one network can be active. State lives under
// the net master lock so waits compose with the virtual clock.
class FlowManager {
 public:
  explicit FlowManager(Net& net, FlowManagerConfig cfg = {});

  // The first registered up path becomes primary.
  void add_path(std::shared_ptr<SimPath> path);
  std::shared_ptr<SimPath> path(const std::string& id) const;
  std::string primary() const;

  std::string set_primary(const std::string& path_id);  // returns the previous primary
  void disable_path(const std::string& path_id);
  void enable_path(const std::string& path_id);

  using ChangeListener = std::function<void(const std::string& new_primary)>;
  void subscribe(ChangeListener fn);

  // Lifetime model for long-lived prediction; absent, only push flows count.
  void set_model(std::shared_ptr<const CdfSet> model);

  // Flow lifecycle. The stream is retained solely so the flow can be severed.
  uint64_t flow_opened(const std::string& path_id, const std::string& host, int port,
                       std::shared_ptr<Stream> s, bool interactive = false);
  void flow_bytes(uint64_t id, uint64_t n);
  void flow_closed(uint64_t id);
  // Abortive close; idempotent. False when the flow is unknown or gone.
  bool terminate_flow(uint64_t id);

  std::vector<FlowInfo> live_flows() const;
  size_t live_count(const std::string& path_id = {}) const;

  // Proxy integration: upstream connections open on the current primary and
  // appear in the flow table for their lifetime.
  UpstreamProvider upstream_provider();
  TransferHooks hooks();

  MigrationPlan begin_migration(const std::string& to_path, WaitTimePolicy wait_time);
  // Applies deadline terminations due now; reports what it did.
  std::vector<TickAction> tick();
  bool plan_active() const;
  MigrationPlan plan() const;
  // Blocks (virtual-time aware) until the plan completes; false on deadline.
  bool wait_plan_complete(std::optional<Seconds> deadline = std::nullopt);

  struct SwitchResult {
    Seconds t_switch = 0;
    bool window_expired = false;
    size_t disrupted = 0;
  };
  // Waits for the first instant with zero live web flows (up to `window`),
  // severs whatever is live on the old path, models the connectivity gap,
  // then brings `to_path` up as primary. Must run inside an actor.
  SwitchResult single_path_switch(const std::string& to_path, Seconds window);

  std::vector<MigrationEvent> events() const;
  void set_event_sink(std::ostream* sink);  // not owned; JSONL mirror

 private:
  struct Live {
    FlowInfo info;
    std::shared_ptr<Stream> stream;
    std::deque<std::pair<Seconds, uint64_t>> samples;  // (t, bytes) for bandwidth
  };

  struct SideEffects {
    std::vector<std::shared_ptr<Stream>> kills;
    std::vector<std::string> sink_lines;
    std::optional<std::string> notify_primary;
    std::vector<ChangeListener> listeners;
  };

  void emit_locked(MigrationEvent e, SideEffects& fx);
  void terminate_locked(uint64_t id, const char* tally, SideEffects& fx);
  void close_locked(uint64_t id, bool drained, SideEffects& fx);
  void maybe_complete_plan_locked(SideEffects& fx);
  size_t live_on_locked(const std::string& path_id) const;
  void run_side_effects(SideEffects fx);
  double bandwidth_locked(const Live& lv) const;

  Net& net_;
  FlowManagerConfig cfg_;
  std::map<std::string, std::shared_ptr<SimPath>> paths_;
  std::string primary_;
  std::map<uint64_t, Live> flows_;
  std::map<uint64_t, uint64_t> proxy_key_to_flow_;
  uint64_t next_flow_ = 1;
  uint64_t next_plan_ = 1;
  std::optional<MigrationPlan> plan_;
  bool plan_complete_reported_ = false;
  WaitTimePolicy wait_time_;
  std::multiset<std::string> pending_resume_;  // destinations owed a reopen credit
  std::shared_ptr<const CdfSet> model_;
  std::vector<ChangeListener> listeners_;
  std::vector<MigrationEvent> events_;
  std::ostream* sink_ = nullptr;
};

}  // namespace flowmig

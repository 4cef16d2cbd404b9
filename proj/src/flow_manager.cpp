#include "flowmig/flow_manager.hpp"

#include <algorithm>
#include <cstdio>

#include "json.hpp"

namespace flowmig {

using json = nlohmann::json;

FlowRecord FlowInfo::record() const {
  FlowRecord r;
  r.flow_id = std::to_string(id);
  r.t_start = t_open;
  r.dst_port = dst_port;
  r.loopback = false;
  r.app = destination;
  r.interactive = interactive;
  r.bytes = bytes;
  return r;
}

std::string to_jsonl(const MigrationEvent& e) {
  json j;
  j["t"] = e.t;
  j["event"] = e.event;
  if (e.flow_id) j["flow_id"] = *e.flow_id;
  j["path_id"] = e.path_id;
  if (e.tallies) {
    j["tallies"] = {{"drained_naturally", e.tallies->drained_naturally},
                    {"force_terminated", e.tallies->force_terminated},
                    {"migrated_clean", e.tallies->migrated_clean},
                    {"disrupted", e.tallies->disrupted}};
  }
  return j.dump();
}

FlowManager::FlowManager(Net& net, FlowManagerConfig cfg) : net_(net), cfg_(cfg) {}

void FlowManager::add_path(std::shared_ptr<SimPath> path) {
  std::lock_guard<std::mutex> g(net_.lock());
  const std::string& id = path->id();
  paths_[id] = path;
  if (primary_.empty() && path->state_locked() == PathState::Up) primary_ = id;
}

std::shared_ptr<SimPath> FlowManager::path(const std::string& id) const {
  std::lock_guard<std::mutex> g(net_.lock());
  auto it = paths_.find(id);
  return it == paths_.end() ? nullptr : it->second;
}

std::string FlowManager::primary() const {
  std::lock_guard<std::mutex> g(net_.lock());
  return primary_;
}

void FlowManager::subscribe(ChangeListener fn) {
  std::lock_guard<std::mutex> g(net_.lock());
  listeners_.push_back(std::move(fn));
}

void FlowManager::set_model(std::shared_ptr<const CdfSet> model) {
  std::lock_guard<std::mutex> g(net_.lock());
  model_ = std::move(model);
}

void FlowManager::set_event_sink(std::ostream* sink) {
  std::lock_guard<std::mutex> g(net_.lock());
  sink_ = sink;
}

std::vector<MigrationEvent> FlowManager::events() const {
  std::lock_guard<std::mutex> g(net_.lock());
  return events_;
}

void FlowManager::emit_locked(MigrationEvent e, SideEffects& fx) {
  e.t = net_.vnow_now_locked();
  fx.sink_lines.push_back(to_jsonl(e));
  events_.push_back(std::move(e));
}

void FlowManager::run_side_effects(SideEffects fx) {
  for (auto& s : fx.kills)
    if (s) s->kill();
  if (sink_)
    for (auto& line : fx.sink_lines) *sink_ << line << "\n";
  if (fx.notify_primary)
    for (auto& fn : fx.listeners) fn(*fx.notify_primary);
}

size_t FlowManager::live_on_locked(const std::string& path_id) const {
  size_t n = 0;
  for (auto& [id, lv] : flows_)
    if (path_id.empty() || lv.info.path_id == path_id) ++n;
  return n;
}

double FlowManager::bandwidth_locked(const Live& lv) const {
  Seconds now = net_.vnow_now_locked();
  uint64_t sum = 0;
  for (auto& [t, n] : lv.samples)
    if (t >= now - cfg_.bandwidth_window) sum += n;
  return cfg_.bandwidth_window > 0 ? (double)sum / cfg_.bandwidth_window : 0.0;
}

uint64_t FlowManager::flow_opened(const std::string& path_id, const std::string& host,
                                  int port, std::shared_ptr<Stream> s, bool interactive) {
  SideEffects fx;
  uint64_t id;
  {
    std::lock_guard<std::mutex> g(net_.lock());
    id = next_flow_++;
    Live lv;
    lv.info.id = id;
    lv.info.path_id = path_id;
    lv.info.destination = host + ":" + std::to_string(port);
    lv.info.dst_port = port;
    lv.info.interactive = interactive;
    lv.info.t_open = net_.vnow_now_locked();
    lv.stream = std::move(s);
    // A terminated old-path flow whose destination reopens on the new path
    // counts as cleanly migrated, even when the reopen lands after the old
    // path has already emptied (the usual case).
    if (plan_ && path_id == plan_->to_path) {
      auto it = pending_resume_.find(lv.info.destination);
      if (it != pending_resume_.end()) {
        pending_resume_.erase(it);
        plan_->tallies.migrated_clean += 1;
      }
    }
    flows_.emplace(id, std::move(lv));
    net_.notify_all_locked();
  }
  run_side_effects(std::move(fx));
  return id;
}

void FlowManager::flow_bytes(uint64_t id, uint64_t n) {
  std::lock_guard<std::mutex> g(net_.lock());
  auto it = flows_.find(id);
  if (it == flows_.end()) return;
  Live& lv = it->second;
  lv.info.bytes += n;
  Seconds now = net_.vnow_now_locked();
  lv.samples.emplace_back(now, n);
  while (!lv.samples.empty() && lv.samples.front().first < now - cfg_.bandwidth_window)
    lv.samples.pop_front();
}

void FlowManager::close_locked(uint64_t id, bool drained, SideEffects& fx) {
  auto it = flows_.find(id);
  if (it == flows_.end()) return;
  if (plan_ && !plan_->complete) {
    auto dl = plan_->deadlines.find(id);
    if (dl != plan_->deadlines.end()) {
      plan_->deadlines.erase(dl);
      if (drained) plan_->tallies.drained_naturally += 1;
    }
  }
  flows_.erase(it);
  maybe_complete_plan_locked(fx);
  net_.notify_all_locked();
}

void FlowManager::flow_closed(uint64_t id) {
  SideEffects fx;
  {
    std::lock_guard<std::mutex> g(net_.lock());
    close_locked(id, /*drained=*/true, fx);
  }
  run_side_effects(std::move(fx));
}

void FlowManager::terminate_locked(uint64_t id, const char* tally, SideEffects& fx) {
  auto it = flows_.find(id);
  if (it == flows_.end()) return;
  Live& lv = it->second;
  fx.kills.push_back(lv.stream);
  bool plan_member = false;
  if (plan_ && !plan_->complete) {
    auto dl = plan_->deadlines.find(id);
    plan_member = dl != plan_->deadlines.end();
    if (dl != plan_->deadlines.end()) plan_->deadlines.erase(dl);
    if (lv.info.path_id == plan_->from_path) {
      if (std::string(tally) == "force_terminated")
        plan_->tallies.force_terminated += 1;
      else if (std::string(tally) == "disrupted" && plan_member)
        plan_->tallies.disrupted += 1;
      pending_resume_.insert(lv.info.destination);
    }
  }
  MigrationEvent e;
  e.event = "terminate";
  e.flow_id = id;
  e.path_id = lv.info.path_id;
  emit_locked(std::move(e), fx);
  flows_.erase(it);
  maybe_complete_plan_locked(fx);
  net_.notify_all_locked();
}

bool FlowManager::terminate_flow(uint64_t id) {
  SideEffects fx;
  bool found;
  {
    std::lock_guard<std::mutex> g(net_.lock());
    found = flows_.count(id) > 0;
    if (found) {
      terminate_locked(id, "force_terminated", fx);
    }
  }
  if (!found) std::fprintf(stderr, "[flows] terminate: flow %llu not in table\n",
                           (unsigned long long)id);
  run_side_effects(std::move(fx));
  return found;
}

void FlowManager::maybe_complete_plan_locked(SideEffects& fx) {
  if (!plan_ || plan_->complete) return;
  if (plan_->mode != MigrationPlan::Mode::DualPath) return;  // switch path finishes it
  if (live_on_locked(plan_->from_path) > 0) return;
  plan_->complete = true;
  plan_->t_complete = net_.vnow_now_locked();
  MigrationEvent e;
  e.event = "complete";
  e.path_id = plan_->from_path;
  e.tallies = plan_->tallies;
  emit_locked(std::move(e), fx);
  net_.notify_all_locked();
}

std::vector<FlowInfo> FlowManager::live_flows() const {
  std::lock_guard<std::mutex> g(net_.lock());
  std::vector<FlowInfo> out;
  out.reserve(flows_.size());
  for (auto& [id, lv] : flows_) {
    FlowInfo fi = lv.info;
    fi.bandwidth_bps = bandwidth_locked(lv);
    out.push_back(std::move(fi));
  }
  return out;
}

size_t FlowManager::live_count(const std::string& path_id) const {
  std::lock_guard<std::mutex> g(net_.lock());
  return live_on_locked(path_id);
}

std::string FlowManager::set_primary(const std::string& path_id) {
  SideEffects fx;
  std::string prev;
  {
    std::lock_guard<std::mutex> g(net_.lock());
    auto it = paths_.find(path_id);
    if (it == paths_.end()) throw FlowError("set_primary: unknown path " + path_id);
    prev = primary_;
    if (path_id == primary_) return prev;  // no-op, no notification
    if (it->second->state_locked() != PathState::Up)
      throw FlowError("set_primary: path not up: " + path_id);
    primary_ = path_id;
    MigrationEvent e;
    e.event = "set_primary";
    e.path_id = path_id;
    emit_locked(std::move(e), fx);
    fx.notify_primary = path_id;
    fx.listeners = listeners_;
    net_.notify_all_locked();
  }
  run_side_effects(std::move(fx));
  return prev;
}

void FlowManager::disable_path(const std::string& path_id) {
  SideEffects fx;
  std::shared_ptr<SimPath> p;
  {
    std::lock_guard<std::mutex> g(net_.lock());
    auto it = paths_.find(path_id);
    if (it == paths_.end()) throw FlowError("disable_path: unknown path " + path_id);
    if (path_id == primary_)
      throw FlowError("disable_path: " + path_id + " is primary; move primary first");
    p = it->second;
    std::vector<uint64_t> victims;
    for (auto& [id, lv] : flows_)
      if (lv.info.path_id == path_id) victims.push_back(id);
    for (uint64_t id : victims) terminate_locked(id, "force_terminated", fx);
    MigrationEvent e;
    e.event = "disable";
    e.path_id = path_id;
    emit_locked(std::move(e), fx);
  }
  run_side_effects(std::move(fx));
  p->set_state(PathState::Disabled);
}

void FlowManager::enable_path(const std::string& path_id) {
  auto p = path(path_id);
  if (!p) throw FlowError("enable_path: unknown path " + path_id);
  p->set_state(PathState::Up);
}

UpstreamProvider FlowManager::upstream_provider() {
  return [this](const std::string& host, int port) -> std::optional<UpstreamConn> {
    std::shared_ptr<SimPath> sp;
    {
      std::lock_guard<std::mutex> g(net_.lock());
      if (primary_.empty()) return std::nullopt;
      auto it = paths_.find(primary_);
      if (it == paths_.end()) return std::nullopt;
      sp = it->second;
    }
    auto s = net_.connect_via(*sp, host, port);
    if (!s) return std::nullopt;
    return UpstreamConn{std::move(s), sp->id()};
  };
}

TransferHooks FlowManager::hooks() {
  TransferHooks h;
  h.on_upstream_open = [this](uint64_t key, const std::string& host, int port,
                              const std::string& path_id,
                              const std::shared_ptr<Stream>& s) {
    uint64_t id = flow_opened(path_id, host, port, s);
    std::lock_guard<std::mutex> g(net_.lock());
    proxy_key_to_flow_[key] = id;
  };
  h.on_upstream_bytes = [this](uint64_t key, uint64_t n) {
    uint64_t id = 0;
    {
      std::lock_guard<std::mutex> g(net_.lock());
      auto it = proxy_key_to_flow_.find(key);
      if (it == proxy_key_to_flow_.end()) return;
      id = it->second;
    }
    flow_bytes(id, n);
  };
  h.on_upstream_close = [this](uint64_t key, uint64_t) {
    uint64_t id = 0;
    {
      std::lock_guard<std::mutex> g(net_.lock());
      auto it = proxy_key_to_flow_.find(key);
      if (it == proxy_key_to_flow_.end()) return;
      id = it->second;
      proxy_key_to_flow_.erase(it);
    }
    flow_closed(id);
  };
  return h;
}

MigrationPlan FlowManager::begin_migration(const std::string& to_path,
                                           WaitTimePolicy wait_time) {
  SideEffects fx;
  MigrationPlan snapshot;
  {
    std::lock_guard<std::mutex> g(net_.lock());
    if (plan_ && !plan_->complete) throw FlowError("begin_migration: plan already active");
    auto it = paths_.find(to_path);
    if (it == paths_.end()) throw FlowError("begin_migration: unknown path " + to_path);
    if (it->second->state_locked() != PathState::Up)
      throw FlowError("begin_migration: target path not up: " + to_path);
    if (to_path == primary_) throw FlowError("begin_migration: already primary");
    std::string from = primary_;
    Seconds now = net_.vnow_now_locked();

    plan_.emplace();
    plan_->plan_id = next_plan_++;
    plan_->from_path = from;
    plan_->to_path = to_path;
    plan_->mode = MigrationPlan::Mode::DualPath;
    plan_->t_begin = now;
    plan_complete_reported_ = false;
    wait_time_ = std::move(wait_time);
    pending_resume_.clear();

    CdfSet no_model;
    const CdfSet& model = model_ ? *model_ : no_model;
    std::vector<uint64_t> doomed;
    for (auto& [id, lv] : flows_) {
      if (lv.info.path_id != from) continue;
      plan_->live_at_begin += 1;
      FlowRecord rec = lv.info.record();
      Seconds w = wait_time_ ? wait_time_(rec) : 0.0;
      if (predict_long_lived(rec, now, model, w, cfg_.long_lived_threshold)) {
        plan_->deadlines[id] = now;  // membership for tallying; erased on terminate
        doomed.push_back(id);
      } else {
        plan_->deadlines[id] = w >= kInfSeconds ? kInfSeconds : now + w;
      }
    }

    primary_ = to_path;
    MigrationEvent pe;
    pe.event = "set_primary";
    pe.path_id = to_path;
    emit_locked(std::move(pe), fx);
    fx.notify_primary = to_path;
    fx.listeners = listeners_;

    MigrationEvent be;
    be.event = "begin";
    be.path_id = to_path;
    be.tallies = plan_->tallies;
    emit_locked(std::move(be), fx);

    for (uint64_t id : doomed) terminate_locked(id, "force_terminated", fx);
    maybe_complete_plan_locked(fx);
    snapshot = *plan_;
    net_.notify_all_locked();
  }
  run_side_effects(std::move(fx));
  return snapshot;
}

std::vector<TickAction> FlowManager::tick() {
  SideEffects fx;
  std::vector<TickAction> actions;
  {
    std::lock_guard<std::mutex> g(net_.lock());
    if (plan_ && !plan_complete_reported_) {
      if (!plan_->complete) {
        Seconds now = net_.vnow_now_locked();
        std::vector<uint64_t> due;
        for (auto& [id, deadline] : plan_->deadlines)
          if (deadline <= now && deadline < kInfSeconds) due.push_back(id);
        for (uint64_t id : due) {
          terminate_locked(id, "force_terminated", fx);
          actions.push_back({TickAction::Kind::TerminateFlow, id});
        }
        maybe_complete_plan_locked(fx);
      }
      if (plan_->complete) {
        actions.push_back({TickAction::Kind::CompletePlan, 0});
        plan_complete_reported_ = true;
      }
    }
  }
  run_side_effects(std::move(fx));
  return actions;
}

bool FlowManager::plan_active() const {
  std::lock_guard<std::mutex> g(net_.lock());
  return plan_.has_value() && !plan_->complete;
}

MigrationPlan FlowManager::plan() const {
  std::lock_guard<std::mutex> g(net_.lock());
  if (!plan_) throw FlowError("plan: no migration has been started");
  return *plan_;
}

bool FlowManager::wait_plan_complete(std::optional<Seconds> deadline) {
  std::unique_lock<std::mutex> lk(net_.lock());
  return net_.wait(lk, [this] { return !plan_ || plan_->complete; }, deadline);
}

FlowManager::SwitchResult FlowManager::single_path_switch(const std::string& to_path,
                                                          Seconds window) {
  SwitchResult res;
  std::shared_ptr<SimPath> from_p, to_p;
  SideEffects fx;
  {
    std::unique_lock<std::mutex> lk(net_.lock());
    if (plan_ && !plan_->complete)
      throw FlowError("single_path_switch: plan already active");
    auto it = paths_.find(to_path);
    if (it == paths_.end())
      throw FlowError("single_path_switch: unknown path " + to_path);
    if (primary_.empty() || to_path == primary_)
      throw FlowError("single_path_switch: need a distinct current primary");
    to_p = it->second;
    from_p = paths_.at(primary_);
    std::string from = primary_;
    Seconds now = net_.vnow_now_locked();
    Seconds deadline = now + window;

    plan_.emplace();
    plan_->plan_id = next_plan_++;
    plan_->from_path = from;
    plan_->to_path = to_path;
    plan_->mode = MigrationPlan::Mode::SinglePathSpecial;
    plan_->t_begin = now;
    plan_complete_reported_ = false;
    pending_resume_.clear();
    for (auto& [id, lv] : flows_) {
      if (lv.info.path_id != from) continue;
      plan_->live_at_begin += 1;
      plan_->deadlines[id] = deadline;
    }
    MigrationEvent be;
    be.event = "begin";
    be.path_id = to_path;
    be.tallies = plan_->tallies;
    emit_locked(std::move(be), fx);

    // Non-web flows are presumed non-interactive and not waited for.
    auto no_web_live = [this, &from] {
      for (auto& [id, lv] : flows_)
        if (lv.info.path_id == from && lv.info.category() == PortCategory::Web)
          return false;
      return true;
    };
    bool drained = net_.wait(lk, no_web_live, deadline);
    res.t_switch = net_.vnow_now_locked();
    res.window_expired = !drained;

    std::vector<uint64_t> victims;
    for (auto& [id, lv] : flows_)
      if (lv.info.path_id == from) victims.push_back(id);
    res.disrupted = victims.size();
    for (uint64_t id : victims) terminate_locked(id, "disrupted", fx);
    primary_.clear();  // connectivity gap: nothing to bind new flows to
  }
  run_side_effects(std::move(fx));
  fx = SideEffects{};

  from_p->set_state(PathState::Disabled);
  net_.sleep_for(cfg_.switch_latency);
  to_p->set_state(PathState::Up);

  {
    std::lock_guard<std::mutex> g(net_.lock());
    primary_ = to_path;
    MigrationEvent pe;
    pe.event = "set_primary";
    pe.path_id = to_path;
    emit_locked(std::move(pe), fx);
    fx.notify_primary = to_path;
    fx.listeners = listeners_;
    plan_->complete = true;
    plan_->t_complete = net_.vnow_now_locked();
    MigrationEvent ce;
    ce.event = "complete";
    ce.path_id = from_p->id();
    ce.tallies = plan_->tallies;
    emit_locked(std::move(ce), fx);
    net_.notify_all_locked();
  }
  run_side_effects(std::move(fx));
  return res;
}

}  // namespace flowmig

#include "flowmig/trace_engine.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace flowmig {

using nlohmann::json;

namespace {

// Half-open [a, b) intervals on the trace timeline.
struct Iv {
  double a;
  double b;
};

std::vector<Iv> merge_ivs(std::vector<Iv> v) {
  std::erase_if(v, [](const Iv& i) { return !(i.b > i.a); });
  std::sort(v.begin(), v.end(), [](const Iv& x, const Iv& y) { return x.a < y.a; });
  std::vector<Iv> out;
  for (auto& i : v) {
    if (!out.empty() && i.a <= out.back().b)
      out.back().b = std::max(out.back().b, i.b);
    else
      out.push_back(i);
  }
  return out;
}

double total_measure(const std::vector<Iv>& m) {
  double s = 0;
  for (auto& i : m) s += i.b - i.a;
  return s;
}

bool contains_point(const std::vector<Iv>& m, double x) {
  for (auto& i : m)
    if (i.a <= x && x < i.b) return true;
  return false;
}

void push_iv(std::vector<Iv>& out, double a, double b) {
  if (b > a) out.push_back({a, b});
}

std::vector<Iv> complement_within(const std::vector<Iv>& m, double lo, double hi) {
  std::vector<Iv> out;
  double cur = lo;
  for (auto& i : m) {
    push_iv(out, cur, std::min(i.a, hi));
    cur = std::max(cur, i.b);
  }
  push_iv(out, cur, hi);
  return out;
}

std::vector<PortCategory> categories_of(const std::vector<FlowRecord>& flows) {
  std::set<PortCategory> s;
  for (auto& f : flows) s.insert(f.category());
  return {s.begin(), s.end()};
}

std::vector<Iv> live_ivs(const std::vector<FlowRecord>& flows, PortCategory cat) {
  std::vector<Iv> v;
  for (auto& f : flows)
    if (f.category() == cat) push_iv(v, f.t_start, *f.t_end);
  return merge_ivs(v);
}

// Switch times whose dual-path migration would cut some category flow:
// flow f objects for t in [start, end - wait).
std::vector<Iv> dual_fail_ivs(const std::vector<FlowRecord>& flows, PortCategory cat,
                              Seconds wait) {
  std::vector<Iv> v;
  if (std::isinf(wait)) return v;
  for (auto& f : flows) {
    if (f.category() != cat) continue;
    push_iv(v, f.t_start, *f.t_end - wait);
  }
  return merge_ivs(v);
}

// Attempt times t0 within busy web period [a, b) whose window expires before
// the period drains: the switch happens at t0 + window, mid-busy.
std::vector<Iv> single_web_fail_ivs(const std::vector<Iv>& busy, Seconds window) {
  std::vector<Iv> v;
  for (auto& p : busy) push_iv(v, p.a, std::min(p.b, p.b - window));
  return merge_ivs(v);
}

// Attempt times whose single-path switch instant lands inside a live interval
// of the (non-web) category.
std::vector<Iv> single_other_fail_ivs(const std::vector<Iv>& busy,
                                      const std::vector<Iv>& idle,
                                      const std::vector<Iv>& live, Seconds window) {
  std::vector<Iv> v;
  for (auto& seg : idle)  // switch is immediate: sigma = t0
    for (auto& l : live)
      push_iv(v, std::max(seg.a, l.a), std::min(seg.b, l.b));
  for (auto& p : busy) {
    double c0 = std::max(p.a, p.b - window);
    // t0 in [a, c0): sigma = t0 + window, sliding across [a + window, b).
    for (auto& l : live)
      push_iv(v, std::max(p.a, l.a - window), std::min(c0, l.b - window));
    // t0 in [c0, b): sigma = b, the natural drain instant.
    if (contains_point(live, p.b)) push_iv(v, c0, p.b);
  }
  return merge_ivs(v);
}

double sigma_at(const std::vector<Iv>& busy, double t0, Seconds window) {
  for (auto& p : busy)
    if (p.a <= t0 && t0 < p.b) return std::min(p.b, t0 + window);
  return t0;
}

std::string wait_key(Seconds w) {
  if (std::isinf(w)) return "inf";
  std::ostringstream os;
  os << w;
  return os.str();
}

json wait_json(Seconds w) {
  if (std::isinf(w)) return json("inf");
  return json(w);
}

}  // namespace

SuccessCurve migration_success_curve(const std::vector<FlowRecord>& flows,
                                     const EvalConfig& cfg) {
  for (Seconds w : cfg.wait_times)
    if (std::isnan(w) || w < 0)
      throw TraceError("wait_time must be >= 0 or inf");
  if (cfg.switch_instants && cfg.switch_instants->empty())
    throw TraceError("explicit switch instants given but empty");

  SuccessCurve curve;
  curve.mode = cfg.mode;
  if (flows.empty()) return curve;
  for (auto& f : flows)
    if (!f.closed())
      throw TraceError("open flow in evaluation trace: " + f.flow_id);

  curve.t_begin = kInfSeconds;
  curve.t_end = -kInfSeconds;
  for (auto& f : flows) {
    curve.t_begin = std::min(curve.t_begin, f.t_start);
    curve.t_end = std::max(curve.t_end, *f.t_end);
  }
  double span = curve.t_end - curve.t_begin;

  auto cats = categories_of(flows);
  auto busy = live_ivs(flows, PortCategory::Web);
  auto idle = complement_within(busy, curve.t_begin, curve.t_end);

  for (Seconds w : cfg.wait_times) {
    std::map<PortCategory, std::vector<Iv>> fail;
    for (PortCategory cat : cats) {
      if (cfg.mode == EvalConfig::Mode::DualPath)
        fail[cat] = dual_fail_ivs(flows, cat, w);
      else if (cat == PortCategory::Web)
        fail[cat] = single_web_fail_ivs(busy, w);
      else
        fail[cat] = single_other_fail_ivs(busy, idle, live_ivs(flows, cat), w);
    }

    std::map<PortCategory, double>& point = curve.points[w];
    if (cfg.switch_instants) {
      std::map<PortCategory, size_t> fails;
      size_t any_fails = 0;
      for (double t : *cfg.switch_instants) {
        bool any = false;
        for (PortCategory cat : cats) {
          bool bad;
          if (cfg.mode == EvalConfig::Mode::DualPath) {
            bad = contains_point(fail[cat], t);
          } else {
            double s = sigma_at(busy, t, w);
            bad = cat == PortCategory::Web ? contains_point(busy, s)
                                           : contains_point(live_ivs(flows, cat), s);
          }
          if (bad) ++fails[cat];
          any = any || bad;
        }
        if (any) ++any_fails;
      }
      double n = double(cfg.switch_instants->size());
      for (PortCategory cat : cats) point[cat] = 1.0 - double(fails[cat]) / n;
      curve.overall[w] = 1.0 - double(any_fails) / n;
    } else {
      if (span <= 0) {
        for (PortCategory cat : cats) point[cat] = 1.0;
        curve.overall[w] = 1.0;
        continue;
      }
      std::vector<Iv> all;
      for (PortCategory cat : cats) {
        point[cat] = 1.0 - total_measure(fail[cat]) / span;
        all.insert(all.end(), fail[cat].begin(), fail[cat].end());
      }
      curve.overall[w] = 1.0 - total_measure(merge_ivs(std::move(all))) / span;
    }
  }
  return curve;
}

std::string curve_to_json(const SuccessCurve& c) {
  json j;
  j["mode"] = c.mode == EvalConfig::Mode::DualPath ? "dual_path" : "single_path_special";
  j["t_begin"] = c.t_begin;
  j["t_end"] = c.t_end;
  j["points"] = json::array();
  for (auto& [w, cats] : c.points) {
    json p;
    p["wait_time"] = wait_json(w);
    p["overall"] = c.overall.at(w);
    json s = json::object();
    for (auto& [cat, v] : cats) s[to_string(cat)] = v;
    p["success"] = s;
    j["points"].push_back(std::move(p));
  }
  return j.dump(2);
}

std::string curve_to_csv(const SuccessCurve& c) {
  std::vector<PortCategory> cats;
  if (!c.points.empty())
    for (auto& [cat, v] : c.points.begin()->second) cats.push_back(cat);
  std::ostringstream os;
  os << "wait_time,overall";
  for (auto cat : cats) os << "," << to_string(cat);
  os << "\n";
  for (auto& [w, vals] : c.points) {
    os << wait_key(w) << "," << c.overall.at(w);
    for (auto cat : cats) os << "," << vals.at(cat);
    os << "\n";
  }
  return os.str();
}

ProbeVerdict probe_url(const std::string& url, const ProbeFetcher& fetch) {
  ProbeVerdict v;
  v.url = url;

  ProbeResponse first = fetch(url, std::nullopt);
  if (!first.ok) return v;
  v.length_first = first.body.size();
  v.no_cache = first.headers.has_token("Cache-Control", "no-cache") ||
               first.headers.has_token("Pragma", "no-cache");

  ProbeResponse second = fetch(url, std::nullopt);
  if (!second.ok) return v;
  v.length_second = second.body.size();

  uint64_t l1 = *v.length_first, l2 = *v.length_second;
  v.same_length = l1 == l2;
  v.is_static = first.body == second.body;
  v.length_delta_fraction =
      std::max(l1, l2) == 0
          ? 0.0
          : double(l1 > l2 ? l1 - l2 : l2 - l1) / double(std::max(l1, l2));

  uint64_t mid = l1 / 2;
  ProbeResponse third = fetch(url, mid);
  if (!third.ok) return v;
  v.complete = true;
  if (third.status == 206) {
    if (auto h = third.headers.get("Content-Range")) {
      auto cr = parse_content_range(*h);
      v.supports_range = cr && cr->first == mid;
    }
  }
  return v;
}

ProbeSummary summarize_probes(const std::vector<ProbeVerdict>& verdicts) {
  ProbeSummary s;
  s.total = verdicts.size();
  for (auto& v : verdicts) {
    if (!v.complete) continue;
    ++s.complete;
    if (v.supports_range) ++s.range_resumable;
    if (v.is_static)
      ++s.static_content;
    else if (v.same_length)
      ++s.same_length_dynamic;
    else
      ++s.dynamic;
    if (v.no_cache) ++s.no_cache;
  }
  return s;
}

std::string probes_to_json(const std::vector<ProbeVerdict>& verdicts) {
  json j;
  j["verdicts"] = json::array();
  for (auto& v : verdicts) {
    json e;
    e["url"] = v.url;
    e["complete"] = v.complete;
    e["length_first"] = v.length_first ? json(*v.length_first) : json(nullptr);
    e["length_second"] = v.length_second ? json(*v.length_second) : json(nullptr);
    e["supports_range"] = v.supports_range;
    e["static"] = v.is_static;
    e["same_length"] = v.same_length;
    e["length_delta_fraction"] = v.length_delta_fraction;
    e["no_cache"] = v.no_cache;
    j["verdicts"].push_back(std::move(e));
  }
  auto s = summarize_probes(verdicts);
  j["summary"] = {{"total", s.total},
                  {"complete", s.complete},
                  {"range_resumable", s.range_resumable},
                  {"static", s.static_content},
                  {"same_length_dynamic", s.same_length_dynamic},
                  {"dynamic", s.dynamic},
                  {"no_cache", s.no_cache}};
  return j.dump(2);
}

LifetimeCdf length_delta_cdf(const std::vector<ProbeVerdict>& verdicts) {
  std::vector<double> deltas;
  for (auto& v : verdicts)
    if (v.length_first && v.length_second) deltas.push_back(v.length_delta_fraction);
  std::sort(deltas.begin(), deltas.end());
  LifetimeCdf cdf;
  cdf.samples = deltas.size();
  for (size_t i = 0; i < deltas.size(); ++i) {
    double cum = double(i + 1) / double(deltas.size());
    if (!cdf.points.empty() && cdf.points.back().lifetime == deltas[i])
      cdf.points.back().cum = cum;
    else
      cdf.points.push_back({deltas[i], cum});
  }
  return cdf;
}

namespace {

void validate_session(const UsageSession& s) {
  for (auto& u : s.usage) {
    if (!(u.end > u.begin))
      throw TraceError("session " + s.session_id + ": empty usage interval");
    if (s.signal.empty() || u.begin < s.signal.front().t ||
        u.begin > s.signal.back().t)
      throw TraceError("session " + s.session_id +
                       ": signal samples do not cover usage");
  }
}

const Interval* usage_at(const UsageSession& s, Seconds t) {
  for (auto& u : s.usage)
    if (u.begin <= t && t < u.end) return &u;
  return nullptr;
}

double combine_bins(const std::set<int>& bins, const DisconnectionModel& model,
                    DisruptionEstimator est) {
  if (est == DisruptionEstimator::Complement) {
    double keep = 1.0;
    for (int b : bins) keep *= 1.0 - model.probability(double(b));
    return 1.0 - keep;
  }
  double sum = 0.0;
  for (int b : bins) sum += model.probability(double(b));
  return sum;
}

}  // namespace

double expected_disruptions(const std::vector<UsageSession>& sessions,
                            const DisconnectionModel& model,
                            const DisruptionPolicy& policy,
                            DisruptionEstimator estimator,
                            const PolicyConfig& autoswitch_cfg) {
  double total = 0.0;
  for (auto& s : sessions) {
    validate_session(s);
    std::set<int> bins;  // distinct 1 dBm bins, once per session
    double cuts = 0.0;
    PolicyState st;
    for (auto& sample : s.signal) {
      const Interval* u = usage_at(s, sample.t);
      bool on_wifi = true;
      if (policy.kind != DisruptionPolicy::Kind::WifiOnly) {
        SwitchAction act = observe(st, autoswitch_cfg, sample);
        on_wifi = st.current_target == SwitchTarget::Wifi;
        if (act != SwitchAction::None && u) {
          if (policy.kind == DisruptionPolicy::Kind::BruteForce)
            cuts += 1.0;
          else if (u->end - sample.t > policy.wait_time)
            cuts += 1.0;
        }
      }
      if (u && on_wifi && sample.associated)
        bins.insert(int(std::floor(sample.rssi_dbm)));
    }
    total += combine_bins(bins, model, estimator) + cuts;
  }
  return total;
}

DisruptionReport disruption_report(const std::vector<UsageSession>& sessions,
                                   const DisconnectionModel& model,
                                   const std::vector<Seconds>& wait_times,
                                   DisruptionEstimator estimator,
                                   const PolicyConfig& autoswitch_cfg) {
  DisruptionReport r;
  r.estimator = estimator;
  r.sessions = sessions.size();
  for (auto& s : sessions)
    for (auto& u : s.usage) r.usage_seconds += u.end - u.begin;
  r.wifi_only = expected_disruptions(sessions, model, DisruptionPolicy::wifi_only(),
                                     estimator, autoswitch_cfg);
  r.brute_force = expected_disruptions(sessions, model, DisruptionPolicy::brute_force(),
                                       estimator, autoswitch_cfg);
  for (Seconds w : wait_times)
    r.wait_n_migrate[w] = expected_disruptions(
        sessions, model, DisruptionPolicy::wait_n_migrate(w), estimator, autoswitch_cfg);
  return r;
}

std::string report_to_json(const DisruptionReport& r) {
  json j;
  j["estimator"] =
      r.estimator == DisruptionEstimator::SumBins ? "sum_bins" : "complement";
  j["sessions"] = r.sessions;
  j["usage_seconds"] = r.usage_seconds;
  j["wifi_only"] = r.wifi_only;
  j["brute_force"] = r.brute_force;
  json w = json::object();
  for (auto& [k, v] : r.wait_n_migrate) w[wait_key(k)] = v;
  j["wait_n_migrate"] = w;
  return j.dump(2);
}

std::vector<UsageSession> parse_sessions_jsonl(const std::string& text,
                                               const std::string& origin_label) {
  std::vector<UsageSession> out;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::string where = origin_label + ":" + std::to_string(lineno);
    try {
      json j = json::parse(line);
      UsageSession s;
      s.session_id = j.value("id", "session-" + std::to_string(lineno));
      for (auto& sj : j.at("signal")) {
        SignalSample x;
        x.t = sj.at("t").get<double>();
        x.rssi_dbm = sj.at("rssi_dbm").get<double>();
        if (sj.contains("ap_id") && !sj["ap_id"].is_null())
          x.ap_id = sj["ap_id"].get<std::string>();
        x.associated = sj.value("associated", true);
        if (!s.signal.empty() && x.t < s.signal.back().t)
          throw SchemaError(where + ": signal samples out of order");
        s.signal.push_back(std::move(x));
      }
      for (auto& uj : j.at("usage")) {
        Interval u{uj.at("begin").get<double>(), uj.at("end").get<double>()};
        if (!(u.end > u.begin)) throw SchemaError(where + ": empty usage interval");
        s.usage.push_back(u);
      }
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    }
  }
  return out;
}

std::vector<UsageSession> load_sessions_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open session trace: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_sessions_jsonl(ss.str(), path);
}

void save_sessions_jsonl(const std::string& path,
                         const std::vector<UsageSession>& sessions) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write session trace: " + path);
  for (auto& s : sessions) {
    json j;
    j["id"] = s.session_id;
    j["signal"] = json::array();
    for (auto& x : s.signal) {
      json sj;
      sj["t"] = x.t;
      sj["rssi_dbm"] = x.rssi_dbm;
      if (x.ap_id) sj["ap_id"] = *x.ap_id;
      sj["associated"] = x.associated;
      j["signal"].push_back(std::move(sj));
    }
    j["usage"] = json::array();
    for (auto& u : s.usage) j["usage"].push_back({{"begin", u.begin}, {"end", u.end}});
    out << j.dump() << "\n";
  }
}

}  // namespace flowmig

#include "flowmig/traffic_model.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace flowmig {

using nlohmann::json;

std::string to_string(PortCategory c) {
  switch (c) {
    case PortCategory::Web: return "web";
    case PortCategory::Email: return "email";
    case PortCategory::Push: return "push";
    case PortCategory::Other: return "other";
    case PortCategory::Local: return "local";
  }
  return "?";
}

std::optional<PortCategory> port_category_from_string(std::string_view s) {
  if (s == "web") return PortCategory::Web;
  if (s == "email") return PortCategory::Email;
  if (s == "push") return PortCategory::Push;
  if (s == "other") return PortCategory::Other;
  if (s == "local") return PortCategory::Local;
  return std::nullopt;
}

PortCategory classify_port(int dst_port, bool loopback) {
  if (loopback) return PortCategory::Local;
  switch (dst_port) {
    case 80:
    case 443:
      return PortCategory::Web;
    case 143:
    case 993:
    case 110:
    case 995:
    case 25:
    case 465:
      return PortCategory::Email;
    case 5223:
      return PortCategory::Push;
    default:
      return PortCategory::Other;
  }
}

double LifetimeCdf::value(Seconds x) const {
  // Largest breakpoint <= x.
  double cum = 0.0;
  for (auto& p : points) {
    if (p.lifetime <= x)
      cum = p.cum;
    else
      break;
  }
  return cum;
}

namespace {

LifetimeCdf build_cdf(std::vector<Seconds> lifetimes, size_t open_count) {
  LifetimeCdf cdf;
  cdf.samples = lifetimes.size();
  cdf.open_flows = open_count;
  size_t total = lifetimes.size() + open_count;
  if (total == 0) return cdf;
  std::sort(lifetimes.begin(), lifetimes.end());
  size_t i = 0;
  while (i < lifetimes.size()) {
    size_t j = i;
    while (j < lifetimes.size() && lifetimes[j] == lifetimes[i]) ++j;
    cdf.points.push_back({lifetimes[i], static_cast<double>(j) / total});
    i = j;
  }
  return cdf;
}

}  // namespace

LifetimeCdf lifetime_cdf(const std::vector<FlowRecord>& flows, PortCategory category,
                         bool interactive) {
  std::vector<Seconds> lifetimes;
  for (auto& f : flows) {
    if (!f.closed()) continue;
    if (f.category() != category || f.interactive != interactive) continue;
    lifetimes.push_back(f.lifetime());
  }
  return build_cdf(std::move(lifetimes), 0);
}

LifetimeCdf lifetime_cdf_with_open(const std::vector<FlowRecord>& flows,
                                   PortCategory category, bool interactive) {
  std::vector<Seconds> lifetimes;
  size_t open_count = 0;
  for (auto& f : flows) {
    if (f.category() != category || f.interactive != interactive) continue;
    if (f.closed())
      lifetimes.push_back(f.lifetime());
    else
      ++open_count;
  }
  return build_cdf(std::move(lifetimes), open_count);
}

std::map<size_t, double> concurrency_distribution(const std::vector<FlowRecord>& flows,
                                                  bool exclude_push) {
  // Sweep over open/close events; fractions are of covered time
  // (earliest start to latest end among considered flows).
  struct Event {
    Seconds t;
    int delta;
  };
  std::vector<Event> events;
  Seconds lo = kInfSeconds, hi = -kInfSeconds;
  for (auto& f : flows) {
    if (!f.closed()) continue;
    if (exclude_push && f.category() == PortCategory::Push) continue;
    events.push_back({f.t_start, +1});
    events.push_back({*f.t_end, -1});
    lo = std::min(lo, f.t_start);
    hi = std::max(hi, *f.t_end);
  }
  std::map<size_t, double> out;
  if (events.empty() || hi <= lo) return out;
  std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
    if (a.t != b.t) return a.t < b.t;
    return a.delta < b.delta;  // close before open at ties
  });
  double span = hi - lo;
  Seconds prev = lo;
  long count = 0;
  for (auto& e : events) {
    if (e.t > prev) {
      out[static_cast<size_t>(count)] += (e.t - prev) / span;
      prev = e.t;
    }
    count += e.delta;
  }
  return out;
}

CdfSet CdfSet::build(const std::vector<FlowRecord>& flows) {
  CdfSet set;
  for (auto cat : {PortCategory::Web, PortCategory::Email, PortCategory::Push,
                   PortCategory::Other, PortCategory::Local}) {
    for (bool inter : {false, true}) {
      set.strata_[{cat, inter}] = lifetime_cdf_with_open(flows, cat, inter);
    }
  }
  return set;
}

const LifetimeCdf& CdfSet::lookup(PortCategory category, bool interactive) const {
  auto it = strata_.find({category, interactive});
  if (it != strata_.end() &&
      it->second.samples + it->second.open_flows >= kMinSamples)
    return it->second;
  auto fb = strata_.find({PortCategory::Other, interactive});
  if (fb != strata_.end() && !fb->second.empty()) return fb->second;
  if (it != strata_.end()) return it->second;
  return empty_;
}

bool predict_long_lived(const FlowRecord& flow, Seconds now, const CdfSet& cdfs,
                        Seconds wait_time, double threshold) {
  if (flow.category() == PortCategory::Push) return true;
  Seconds elapsed = std::max(0.0, now - flow.t_start);
  const LifetimeCdf& cdf = cdfs.lookup(flow.category(), flow.interactive);
  if (cdf.empty()) return false;
  double s_now = cdf.survival(elapsed);
  if (s_now <= 0.0) return false;
  double s_later = cdf.survival(elapsed + wait_time);
  return s_later / s_now >= threshold;
}

namespace {

FlowRecord flow_from_json(const json& j, const std::string& where) {
  try {
    FlowRecord f;
    f.flow_id = j.at("flow_id").get<std::string>();
    f.t_start = j.at("t_start").get<double>();
    if (!j.at("t_end").is_null()) f.t_end = j.at("t_end").get<double>();
    f.dst_port = j.at("dst_port").get<int>();
    f.loopback = j.at("loopback").get<bool>();
    f.app = j.at("app").get<std::string>();
    f.interactive = j.at("interactive").get<bool>();
    f.bytes = j.at("bytes").get<uint64_t>();
    if (f.t_end && *f.t_end < f.t_start)
      throw SchemaError(where + ": t_end before t_start");
    if (f.dst_port < 0 || f.dst_port > 65535)
      throw SchemaError(where + ": dst_port out of range");
    return f;
  } catch (const json::exception& e) {
    throw SchemaError(where + ": " + e.what());
  }
}

}  // namespace

std::vector<FlowRecord> parse_flows_jsonl(const std::string& text,
                                          const std::string& origin_label) {
  std::vector<FlowRecord> out;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw SchemaError(origin_label + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(flow_from_json(j, origin_label + ":" + std::to_string(lineno)));
  }
  return out;
}

std::vector<FlowRecord> load_flows_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open flow trace: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_flows_jsonl(ss.str(), path);
}

void save_flows_jsonl(const std::string& path, const std::vector<FlowRecord>& flows) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write flow trace: " + path);
  for (auto& f : flows) {
    json j;
    j["flow_id"] = f.flow_id;
    j["t_start"] = f.t_start;
    if (f.t_end)
      j["t_end"] = *f.t_end;
    else
      j["t_end"] = nullptr;
    j["dst_port"] = f.dst_port;
    j["loopback"] = f.loopback;
    j["app"] = f.app;
    j["interactive"] = f.interactive;
    j["bytes"] = f.bytes;
    out << j.dump() << "\n";
  }
}

}  // namespace flowmig

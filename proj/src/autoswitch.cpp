#include "flowmig/autoswitch.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace flowmig {

using nlohmann::json;

SwitchAction observe(PolicyState& state, const PolicyConfig& cfg,
                     const SignalSample& sample) {
  if (sample.t < state.last_sample_t)
    throw Error("signal sample out of order: t=" + std::to_string(sample.t));
  state.last_sample_t = sample.t;

  double rssi = sample.associated ? sample.rssi_dbm : -kInfSeconds;

  if (state.current_target == SwitchTarget::Wifi) {
    if (rssi <= cfg.down_threshold_dbm) {
      if (!state.below_since) state.below_since = sample.t;
      if (sample.t - *state.below_since >= cfg.down_hold_s) {
        state.current_target = SwitchTarget::Cellular;
        state.last_switch = sample.t;
        state.below_since.reset();
        return SwitchAction::SwitchToCellular;
      }
    } else {
      state.below_since.reset();
    }
    return SwitchAction::None;
  }

  // On cellular: recovery requires signal at the higher threshold and the
  // dwell floor since the last switch.
  if (rssi >= cfg.up_threshold_dbm && sample.t - state.last_switch >= cfg.min_dwell_s) {
    state.current_target = SwitchTarget::Wifi;
    state.last_switch = sample.t;
    state.below_since.reset();
    return SwitchAction::SwitchToWifi;
  }
  return SwitchAction::None;
}

double DisconnectionModel::probability(double rssi_dbm) const {
  if (bins.empty()) throw Error("empty disconnection model");
  double p = bins.front().probability;
  for (auto& b : bins) {
    if (b.rssi_dbm <= rssi_dbm)
      p = b.probability;
    else
      break;
  }
  return p;
}

DisconnectionModel parse_disconnection_model(const std::string& text,
                                             const std::string& origin_label) {
  DisconnectionModel m;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::string_view s = trim(line);
    if (s.empty()) continue;
    size_t comma = s.find(',');
    if (comma == std::string_view::npos)
      throw SchemaError(origin_label + ":" + std::to_string(lineno) +
                        ": expected rssi_dbm_bin,probability");
    std::string a(trim(s.substr(0, comma)));
    std::string b(trim(s.substr(comma + 1)));
    if (lineno == 1 && a == "rssi_dbm_bin") continue;  // header
    try {
      double rssi = std::stod(a);
      double p = std::stod(b);
      if (p < 0.0 || p > 1.0)
        throw SchemaError(origin_label + ":" + std::to_string(lineno) +
                          ": probability outside [0,1]");
      m.bins.push_back({rssi, p});
    } catch (const std::invalid_argument&) {
      throw SchemaError(origin_label + ":" + std::to_string(lineno) +
                        ": non-numeric field");
    }
  }
  if (m.bins.empty()) throw SchemaError(origin_label + ": no bins");
  for (size_t i = 1; i < m.bins.size(); ++i) {
    if (m.bins[i].rssi_dbm <= m.bins[i - 1].rssi_dbm)
      throw SchemaError(origin_label + ": bins not strictly ascending by rssi");
    if (m.bins[i].probability > m.bins[i - 1].probability)
      throw SchemaError(origin_label +
                        ": disconnection probability rises with signal strength");
  }
  return m;
}

DisconnectionModel load_disconnection_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open disconnection model: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_disconnection_model(ss.str(), path);
}

void save_disconnection_model(const std::string& path, const DisconnectionModel& m) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write disconnection model: " + path);
  out << "rssi_dbm_bin,probability\n";
  for (auto& b : m.bins) out << b.rssi_dbm << "," << b.probability << "\n";
}

bool ping_disconnect_judge(const std::vector<std::pair<Seconds, bool>>& probe_ok,
                           Seconds window) {
  if (probe_ok.empty()) throw Error("empty probe window");
  Seconds lo = probe_ok.front().first, hi = probe_ok.front().first;
  for (auto& [t, ok] : probe_ok) {
    lo = std::min(lo, t);
    hi = std::max(hi, t);
  }
  if (hi - lo < window)
    throw Error("probe series spans " + std::to_string(hi - lo) +
                " s, shorter than the judgment window");
  for (auto& [t, ok] : probe_ok)
    if (ok) return false;
  return true;
}

std::vector<SignalSample> parse_signals_jsonl(const std::string& text,
                                              const std::string& origin_label) {
  std::vector<SignalSample> out;
  std::istringstream in(text);
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::string where = origin_label + ":" + std::to_string(lineno);
    try {
      json j = json::parse(line);
      SignalSample s;
      s.t = j.at("t").get<double>();
      s.rssi_dbm = j.at("rssi_dbm").get<double>();
      if (j.contains("ap_id") && !j["ap_id"].is_null())
        s.ap_id = j["ap_id"].get<std::string>();
      s.associated = j.value("associated", true);
      if (!out.empty() && s.t < out.back().t)
        throw SchemaError(where + ": samples out of order");
      out.push_back(std::move(s));
    } catch (const json::exception& e) {
      throw SchemaError(where + ": " + e.what());
    }
  }
  return out;
}

std::vector<SignalSample> load_signals_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open signal trace: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_signals_jsonl(ss.str(), path);
}

void save_signals_jsonl(const std::string& path,
                        const std::vector<SignalSample>& samples) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write signal trace: " + path);
  for (auto& s : samples) {
    json j;
    j["t"] = s.t;
    j["rssi_dbm"] = s.rssi_dbm;
    if (s.ap_id)
      j["ap_id"] = *s.ap_id;
    else
      j["ap_id"] = nullptr;
    j["associated"] = s.associated;
    out << j.dump() << "\n";
  }
}

}  // namespace flowmig

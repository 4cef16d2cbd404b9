#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flowmig/common.hpp"

namespace flowmig {

struct SignalSample {
  Seconds t = 0;
  double rssi_dbm = 0;
  std::optional<std::string> ap_id;
  bool associated = true;
};

struct PolicyConfig {
  double down_threshold_dbm = -75;
  Seconds down_hold_s = 3;
  double up_threshold_dbm = -70;
  Seconds min_dwell_s = 10;  // floor before switching back to wifi
};

enum class SwitchAction { None, SwitchToCellular, SwitchToWifi };
enum class SwitchTarget { Wifi, Cellular };

struct PolicyState {
  SwitchTarget current_target = SwitchTarget::Wifi;
  std::optional<Seconds> below_since;
  Seconds last_switch = -kInfSeconds;
  Seconds last_sample_t = -kInfSeconds;
};

// Hysteresis over signal strength and time: weak wifi held for the full hold
// interval switches to cellular; recovered wifi (and an elapsed dwell floor)
// switches back. Disassociated samples count as no signal.
SwitchAction observe(PolicyState& state, const PolicyConfig& cfg,
                     const SignalSample& sample);

struct DisconnectionModel {
  struct Bin {
    double rssi_dbm;  // lower edge, ascending
    double probability;
  };
  std::vector<Bin> bins;

  // Step lookup: the bin whose lower edge is the largest <= rssi, clamped to
  // the end bins outside the covered range.
  double probability(double rssi_dbm) const;
};

// CSV columns rssi_dbm_bin,probability ascending by rssi; optional header.
// Validates range, ordering, and that probability never rises with rssi.
DisconnectionModel load_disconnection_model(const std::string& path);
DisconnectionModel parse_disconnection_model(const std::string& text,
                                             const std::string& origin_label);
void save_disconnection_model(const std::string& path, const DisconnectionModel& m);

// True iff every probe in the series failed; the series must span the window.
bool ping_disconnect_judge(const std::vector<std::pair<Seconds, bool>>& probe_ok,
                           Seconds window = 5.0);

std::vector<SignalSample> load_signals_jsonl(const std::string& path);
std::vector<SignalSample> parse_signals_jsonl(const std::string& text,
                                              const std::string& origin_label);
void save_signals_jsonl(const std::string& path,
                        const std::vector<SignalSample>& samples);

}  // namespace flowmig

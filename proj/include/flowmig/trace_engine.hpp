#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowmig/autoswitch.hpp"
#include "flowmig/common.hpp"
#include "flowmig/http.hpp"
#include "flowmig/traffic_model.hpp"

namespace flowmig {

class TraceError : public Error {
 public:
  using Error::Error;
};

struct EvalConfig {
  enum class Mode { DualPath, SinglePathSpecial };

  std::vector<Seconds> wait_times;  // each >= 0, +inf allowed
  Mode mode = Mode::DualPath;
  // When set, success is the empirical fraction over exactly these switch
  // instants; otherwise exact integration over the trace timeline.
  std::optional<std::vector<Seconds>> switch_instants;
};

// Success fractions per wait time and flow category. A switch attempt at
// time t succeeds for a category when no flow of that category is cut:
// dual-path mode cuts flows whose remaining lifetime exceeds the wait time;
// single-path mode switches at the first moment with zero live web flows
// (no later than t + wait) and cuts whatever is live at that moment.
struct SuccessCurve {
  EvalConfig::Mode mode = EvalConfig::Mode::DualPath;
  Seconds t_begin = 0;
  Seconds t_end = 0;
  std::map<Seconds, std::map<PortCategory, double>> points;
  std::map<Seconds, double> overall;  // all categories together

  bool empty() const { return points.empty(); }
};

SuccessCurve migration_success_curve(const std::vector<FlowRecord>& flows,
                                     const EvalConfig& cfg);

std::string curve_to_json(const SuccessCurve& c);
std::string curve_to_csv(const SuccessCurve& c);

// One HTTP exchange made on behalf of the prober. range_from, when present,
// asks for "bytes=<range_from>-".
struct ProbeResponse {
  bool ok = false;  // transport-level outcome; false marks the probe incomplete
  int status = 0;
  HeaderMap headers;
  std::string body;
};
using ProbeFetcher = std::function<ProbeResponse(
    const std::string& url, const std::optional<uint64_t>& range_from)>;

struct ProbeVerdict {
  std::string url;
  bool complete = false;  // all three downloads finished
  std::optional<uint64_t> length_first;
  std::optional<uint64_t> length_second;
  bool supports_range = false;
  bool is_static = false;
  bool same_length = false;
  double length_delta_fraction = 0.0;
  bool no_cache = false;
};

// Two full downloads plus one resume from floor(length/2); classifies the
// URL's resume capability and content stability.
ProbeVerdict probe_url(const std::string& url, const ProbeFetcher& fetch);

struct ProbeSummary {
  size_t total = 0;
  size_t complete = 0;
  size_t range_resumable = 0;
  size_t static_content = 0;
  size_t same_length_dynamic = 0;  // equal lengths, different bytes
  size_t dynamic = 0;              // differing lengths
  size_t no_cache = 0;
};

ProbeSummary summarize_probes(const std::vector<ProbeVerdict>& verdicts);
std::string probes_to_json(const std::vector<ProbeVerdict>& verdicts);

// Empirical CDF over length_delta_fraction for verdicts where both full
// downloads finished.
LifetimeCdf length_delta_cdf(const std::vector<ProbeVerdict>& verdicts);

struct Interval {
  Seconds begin = 0;
  Seconds end = 0;
};

struct UsageSession {
  std::string session_id;
  std::vector<SignalSample> signal;  // time-ordered
  std::vector<Interval> usage;       // interactive web usage
};

std::vector<UsageSession> load_sessions_jsonl(const std::string& path);
std::vector<UsageSession> parse_sessions_jsonl(const std::string& text,
                                               const std::string& origin_label);
void save_sessions_jsonl(const std::string& path,
                         const std::vector<UsageSession>& sessions);

// Per-session bin exposure is counted once per distinct 1 dBm signal bin
// visited during usage while still on wifi; SumBins adds the bins'
// disconnection probabilities, Complement computes 1 - prod(1 - p).
enum class DisruptionEstimator { SumBins, Complement };

struct DisruptionPolicy {
  enum class Kind { WifiOnly, BruteForce, WaitNMigrate };
  Kind kind = Kind::WifiOnly;
  Seconds wait_time = 10;  // WaitNMigrate only

  static DisruptionPolicy wifi_only() { return {Kind::WifiOnly, 0}; }
  static DisruptionPolicy brute_force() { return {Kind::BruteForce, 0}; }
  static DisruptionPolicy wait_n_migrate(Seconds w) {
    return {Kind::WaitNMigrate, w};
  }
};

// Expected disruptions summed over sessions. BruteForce and WaitNMigrate run
// the hysteresis policy over the signal trace: time on cellular stops wifi
// exposure, every switch landing inside a usage interval cuts it (BruteForce),
// and WaitNMigrate only counts cuts whose remaining usage exceeds the wait.
double expected_disruptions(const std::vector<UsageSession>& sessions,
                            const DisconnectionModel& model,
                            const DisruptionPolicy& policy,
                            DisruptionEstimator estimator = DisruptionEstimator::SumBins,
                            const PolicyConfig& autoswitch_cfg = {});

struct DisruptionReport {
  double wifi_only = 0;
  double brute_force = 0;
  std::map<Seconds, double> wait_n_migrate;
  DisruptionEstimator estimator = DisruptionEstimator::SumBins;
  size_t sessions = 0;
  Seconds usage_seconds = 0;
};

DisruptionReport disruption_report(const std::vector<UsageSession>& sessions,
                                   const DisconnectionModel& model,
                                   const std::vector<Seconds>& wait_times,
                                   DisruptionEstimator estimator = DisruptionEstimator::SumBins,
                                   const PolicyConfig& autoswitch_cfg = {});

std::string report_to_json(const DisruptionReport& r);

}  // namespace flowmig

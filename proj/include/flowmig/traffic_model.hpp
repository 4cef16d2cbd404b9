#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flowmig/common.hpp"

namespace flowmig {

enum class PortCategory { Web, Email, Push, Other, Local };

std::string to_string(PortCategory c);
std::optional<PortCategory> port_category_from_string(std::string_view s);

PortCategory classify_port(int dst_port, bool loopback);

struct FlowRecord {
  std::string flow_id;
  Seconds t_start = 0;
  std::optional<Seconds> t_end;  // open flow when absent
  int dst_port = 0;
  bool loopback = false;
  std::string app;
  bool interactive = false;
  uint64_t bytes = 0;

  bool closed() const { return t_end.has_value(); }
  Seconds lifetime() const { return t_end ? *t_end - t_start : kInfSeconds; }
  PortCategory category() const { return classify_port(dst_port, loopback); }
};

// Empirical CDF over nonnegative lifetimes: breakpoints sorted by lifetime,
// cumulative fraction reaching 1.0 at the last closed-flow breakpoint.
// Open flows may contribute mass at +inf (value() then tops out below 1).
struct LifetimeCdf {
  struct Point {
    Seconds lifetime;
    double cum;
  };
  std::vector<Point> points;
  size_t samples = 0;     // closed samples represented by points
  size_t open_flows = 0;  // censored samples treated as +inf

  bool empty() const { return samples == 0 && open_flows == 0; }
  // P(lifetime <= x).
  double value(Seconds x) const;
  // P(lifetime > x) = 1 - value(x).
  double survival(Seconds x) const { return 1.0 - value(x); }
};

LifetimeCdf lifetime_cdf(const std::vector<FlowRecord>& flows, PortCategory category,
                         bool interactive);

// Same stratification but keeping open flows as censored +inf mass, which is
// what conditional-survival prediction needs.
LifetimeCdf lifetime_cdf_with_open(const std::vector<FlowRecord>& flows,
                                   PortCategory category, bool interactive);

// Fraction of covered trace time spent with exactly k concurrent flows.
std::map<size_t, double> concurrency_distribution(const std::vector<FlowRecord>& flows,
                                                  bool exclude_push);

// Stratified CDFs with small-stratum fallback for prediction.
class CdfSet {
 public:
  static constexpr size_t kMinSamples = 20;

  static CdfSet build(const std::vector<FlowRecord>& flows);
  // Stratum CDF, falling back to (Other, same interactivity) when the
  // stratum has too few samples.
  const LifetimeCdf& lookup(PortCategory category, bool interactive) const;

 private:
  std::map<std::pair<PortCategory, bool>, LifetimeCdf> strata_;
  LifetimeCdf empty_;
};

// True when the open flow is likely to outlive elapsed + wait_time given it
// has already lived `elapsed`. Push flows are always long-lived.
bool predict_long_lived(const FlowRecord& flow, Seconds now, const CdfSet& cdfs,
                        Seconds wait_time, double threshold);

std::vector<FlowRecord> load_flows_jsonl(const std::string& path);
void save_flows_jsonl(const std::string& path, const std::vector<FlowRecord>& flows);
std::vector<FlowRecord> parse_flows_jsonl(const std::string& text,
                                          const std::string& origin_label);

}  // namespace flowmig

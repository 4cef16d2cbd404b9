#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "doctest.h"
#include "flowmig/trace_engine.hpp"
#include "json.hpp"

using namespace flowmig;

namespace {

FlowRecord closed_flow(const std::string& id, Seconds s, Seconds e, int port) {
  FlowRecord f;
  f.flow_id = id;
  f.t_start = s;
  f.t_end = e;
  f.dst_port = port;
  return f;
}

// Monte Carlo oracle for dual-path success: draw uniform switch instants and
// test every flow of the category directly.
double mc_dual(const std::vector<FlowRecord>& flows, PortCategory cat, Seconds w,
               size_t draws, uint64_t seed) {
  Seconds t0 = kInfSeconds, t1 = -kInfSeconds;
  for (auto& f : flows) {
    t0 = std::min(t0, f.t_start);
    t1 = std::max(t1, *f.t_end);
  }
  Rng rng(seed);
  std::uniform_real_distribution<double> u(t0, t1);
  size_t ok = 0;
  for (size_t i = 0; i < draws; ++i) {
    double t = u(rng);
    bool fail = false;
    for (auto& f : flows) {
      if (f.category() != cat) continue;
      if (f.t_start <= t && t < *f.t_end && *f.t_end - t > w) {
        fail = true;
        break;
      }
    }
    if (!fail) ++ok;
  }
  return double(ok) / double(draws);
}

// Independent derivation of the single-path switch instant: extend through
// overlapping web flows one at a time instead of premerging intervals.
double sigma_oracle(const std::vector<FlowRecord>& flows, Seconds t0, Seconds window) {
  Seconds t = t0;
  for (;;) {
    Seconds ext = -kInfSeconds;
    for (auto& f : flows) {
      if (f.category() != PortCategory::Web) continue;
      if (f.t_start <= t && t < *f.t_end) ext = std::max(ext, *f.t_end);
    }
    if (ext < 0 || ext <= t) break;
    t = ext;
  }
  return std::min(t, t0 + window);
}

double mc_single(const std::vector<FlowRecord>& flows, PortCategory cat, Seconds window,
                 size_t draws, uint64_t seed) {
  Seconds t0 = kInfSeconds, t1 = -kInfSeconds;
  for (auto& f : flows) {
    t0 = std::min(t0, f.t_start);
    t1 = std::max(t1, *f.t_end);
  }
  Rng rng(seed);
  std::uniform_real_distribution<double> u(t0, t1);
  size_t ok = 0;
  for (size_t i = 0; i < draws; ++i) {
    double s = sigma_oracle(flows, u(rng), window);
    bool fail = false;
    for (auto& f : flows) {
      if (f.category() != cat) continue;
      if (f.t_start <= s && s < *f.t_end) {
        fail = true;
        break;
      }
    }
    if (!fail) ++ok;
  }
  return double(ok) / double(draws);
}

std::vector<FlowRecord> synthetic_trace(uint64_t seed, size_t n) {
  Rng rng(seed);
  std::uniform_real_distribution<double> start(0.0, 100.0);
  std::uniform_real_distribution<double> life(0.1, 40.0);
  std::vector<FlowRecord> flows;
  const int ports[] = {443, 80, 9999, 25};
  for (size_t i = 0; i < n; ++i) {
    double s = start(rng);
    flows.push_back(
        closed_flow("f" + std::to_string(i), s, s + life(rng), ports[rng() % 4]));
  }
  return flows;
}

void check_within_3se(double exact, double mc, size_t draws) {
  double se = std::sqrt(std::max(mc * (1.0 - mc), 1e-12) / double(draws));
  CHECK(std::abs(exact - mc) <= 3.0 * se + 1e-6);
}

}  // namespace

TEST_CASE("dual-path success: hand-computed two-flow trace") {
  std::vector<FlowRecord> flows{closed_flow("a", 0, 2, 443), closed_flow("b", 5, 7, 443)};
  EvalConfig cfg;
  cfg.wait_times = {0.0, 1.0, 1.5, 2.0, kInfSeconds};
  auto curve = migration_success_curve(flows, cfg);
  CHECK(curve.t_begin == 0.0);
  CHECK(curve.t_end == 7.0);
  // Failure window for wait w is [start, end - w) per flow over a 7 s timeline.
  CHECK(curve.points.at(0.0).at(PortCategory::Web) == doctest::Approx(3.0 / 7.0));
  CHECK(curve.points.at(1.0).at(PortCategory::Web) == doctest::Approx(5.0 / 7.0));
  CHECK(curve.points.at(1.5).at(PortCategory::Web) == doctest::Approx(6.0 / 7.0));
  CHECK(curve.points.at(2.0).at(PortCategory::Web) == doctest::Approx(1.0));
  CHECK(curve.points.at(kInfSeconds).at(PortCategory::Web) == doctest::Approx(1.0));
  for (auto& [w, v] : curve.overall)
    CHECK(v == doctest::Approx(curve.points.at(w).at(PortCategory::Web)));
}

TEST_CASE("dual-path success: short flows always migrate within a long wait") {
  std::vector<FlowRecord> flows;
  for (int i = 0; i < 5; ++i)
    flows.push_back(closed_flow("f" + std::to_string(i), i * 0.7, i * 0.7 + 1.0, 443));
  EvalConfig cfg;
  cfg.wait_times = {10.0};
  auto curve = migration_success_curve(flows, cfg);
  CHECK(curve.points.at(10.0).at(PortCategory::Web) == doctest::Approx(1.0));
  CHECK(curve.overall.at(10.0) == doctest::Approx(1.0));
}

TEST_CASE("dual-path success matches the Monte Carlo oracle on a synthetic trace") {
  auto flows = synthetic_trace(2026, 60);
  EvalConfig cfg;
  cfg.wait_times = {1.0, 3.0, 10.0, 30.0};
  auto curve = migration_success_curve(flows, cfg);
  const size_t draws = 1000000;
  for (size_t wi = 0; wi < cfg.wait_times.size(); ++wi) {
    Seconds w = cfg.wait_times[wi];
    for (PortCategory cat : {PortCategory::Web, PortCategory::Other, PortCategory::Email}) {
      double mc = mc_dual(flows, cat, w, draws, 7000 + wi);
      check_within_3se(curve.points.at(w).at(cat), mc, draws);
    }
  }
  // Monotone in wait for every category.
  for (PortCategory cat : {PortCategory::Web, PortCategory::Other, PortCategory::Email}) {
    double prev = -1;
    for (Seconds w : cfg.wait_times) {
      CHECK(curve.points.at(w).at(cat) >= prev);
      prev = curve.points.at(w).at(cat);
    }
  }
}

TEST_CASE("dual-path success over explicit switch instants") {
  std::vector<FlowRecord> flows{closed_flow("a", 0, 2, 443), closed_flow("b", 5, 7, 443)};
  EvalConfig cfg;
  cfg.wait_times = {0.0, 1.0};
  cfg.switch_instants = std::vector<Seconds>{1.0, 3.0, 6.5};
  auto curve = migration_success_curve(flows, cfg);
  CHECK(curve.points.at(0.0).at(PortCategory::Web) == doctest::Approx(1.0 / 3.0));
  CHECK(curve.points.at(1.0).at(PortCategory::Web) == doctest::Approx(1.0));
}

TEST_CASE("success curve input validation") {
  EvalConfig cfg;
  cfg.wait_times = {1.0};
  CHECK(migration_success_curve({}, cfg).empty());

  FlowRecord open;
  open.flow_id = "open";
  open.t_start = 0;
  open.dst_port = 443;
  CHECK_THROWS_AS(migration_success_curve({open}, cfg), TraceError);

  std::vector<FlowRecord> flows{closed_flow("a", 0, 1, 443)};
  EvalConfig bad;
  bad.wait_times = {-1.0};
  CHECK_THROWS_AS(migration_success_curve(flows, bad), TraceError);
}

TEST_CASE("single-path switch: hand-computed mixed trace") {
  // Web busy spans [0,2) and [5,7); one non-web flow [1,3). Timeline [0,7).
  std::vector<FlowRecord> flows{closed_flow("w1", 0, 2, 443), closed_flow("w2", 5, 7, 443),
                                closed_flow("o1", 1, 3, 9999)};
  EvalConfig cfg;
  cfg.mode = EvalConfig::Mode::SinglePathSpecial;
  cfg.wait_times = {1.5, 10.0};
  auto curve = migration_success_curve(flows, cfg);
  // Window 1.5: attempts in [0,0.5) and [5,5.5) expire mid-busy and cut web.
  CHECK(curve.points.at(1.5).at(PortCategory::Web) == doctest::Approx(6.0 / 7.0));
  // Non-web failures: switch lands inside [1,3) for t0 in [0,3).
  CHECK(curve.points.at(1.5).at(PortCategory::Other) == doctest::Approx(4.0 / 7.0));
  // Window 10 never expires: web always drains, other still in the way early.
  CHECK(curve.points.at(10.0).at(PortCategory::Web) == doctest::Approx(1.0));
  CHECK(curve.points.at(10.0).at(PortCategory::Other) == doctest::Approx(4.0 / 7.0));
}

TEST_CASE("single-path switch matches the Monte Carlo oracle") {
  auto flows = synthetic_trace(99, 40);
  EvalConfig cfg;
  cfg.mode = EvalConfig::Mode::SinglePathSpecial;
  cfg.wait_times = {0.5, 2.0, 5.0};
  auto curve = migration_success_curve(flows, cfg);
  const size_t draws = 300000;
  for (size_t wi = 0; wi < cfg.wait_times.size(); ++wi) {
    Seconds w = cfg.wait_times[wi];
    for (PortCategory cat : {PortCategory::Web, PortCategory::Other}) {
      double mc = mc_single(flows, cat, w, draws, 500 + wi);
      check_within_3se(curve.points.at(w).at(cat), mc, draws);
    }
  }
}

TEST_CASE("curve exports parse and carry every point") {
  auto flows = synthetic_trace(5, 20);
  EvalConfig cfg;
  cfg.wait_times = {1.0, 10.0, kInfSeconds};
  auto curve = migration_success_curve(flows, cfg);

  auto j = nlohmann::json::parse(curve_to_json(curve));
  CHECK(j.at("mode") == "dual_path");
  CHECK(j.at("points").size() == 3);
  bool saw_inf = false;
  for (auto& p : j.at("points")) {
    if (p.at("wait_time").is_string() && p.at("wait_time") == "inf") saw_inf = true;
    CHECK(p.at("success").contains("web"));
    CHECK(p.contains("overall"));
  }
  CHECK(saw_inf);

  auto csv = curve_to_csv(curve);
  size_t lines = std::count(csv.begin(), csv.end(), '\n');
  CHECK(lines == 4);  // header + one row per wait
  CHECK(csv.find("wait_time") == 0);
  CHECK(csv.find("web") != std::string::npos);
}

namespace {

ProbeFetcher fixed_fetcher(std::string body, bool ranges, bool no_cache) {
  return [body = std::move(body), ranges, no_cache](
             const std::string&, const std::optional<uint64_t>& from) {
    ProbeResponse r;
    r.ok = true;
    if (no_cache) r.headers.add("Cache-Control", "no-cache");
    if (from && ranges) {
      r.status = 206;
      r.headers.add("Content-Range", "bytes " + std::to_string(*from) + "-" +
                                         std::to_string(body.size() - 1) + "/" +
                                         std::to_string(body.size()));
      r.body = body.substr(std::min<size_t>(*from, body.size()));
    } else {
      r.status = 200;
      r.body = body;
    }
    return r;
  };
}

}  // namespace

TEST_CASE("probe_url classifies fixture servers") {
  std::string body = seeded_bytes(1, 1000);

  SUBCASE("static with range support") {
    auto v = probe_url("http://a.test/x", fixed_fetcher(body, true, false));
    CHECK(v.complete);
    CHECK(v.supports_range);
    CHECK(v.is_static);
    CHECK(v.same_length);
    CHECK(v.length_delta_fraction == 0.0);
    CHECK_FALSE(v.no_cache);
    CHECK(*v.length_first == 1000);
  }

  SUBCASE("static without range support") {
    auto v = probe_url("http://a.test/x", fixed_fetcher(body, false, false));
    CHECK(v.complete);
    CHECK_FALSE(v.supports_range);
    CHECK(v.is_static);
  }

  SUBCASE("no-cache marking") {
    auto v = probe_url("http://a.test/x", fixed_fetcher(body, true, true));
    CHECK(v.no_cache);
  }

  SUBCASE("dynamic with small length jitter") {
    int calls = 0;
    ProbeFetcher f = [&](const std::string&, const std::optional<uint64_t>& from) {
      ProbeResponse r;
      r.ok = true;
      r.status = 200;
      r.body = seeded_bytes(100 + calls, calls == 0 ? 1000 : 1004);
      ++calls;
      (void)from;
      return r;
    };
    auto v = probe_url("http://dyn.test/", f);
    CHECK(v.complete);
    CHECK_FALSE(v.is_static);
    CHECK_FALSE(v.same_length);
    CHECK(v.length_delta_fraction == doctest::Approx(4.0 / 1004.0));
    CHECK(v.length_delta_fraction <= 0.01);
  }

  SUBCASE("same length, different bytes") {
    int calls = 0;
    ProbeFetcher f = [&](const std::string&, const std::optional<uint64_t>&) {
      ProbeResponse r;
      r.ok = true;
      r.status = 200;
      r.body = seeded_bytes(200 + calls++, 500);
      return r;
    };
    auto v = probe_url("http://dyn.test/", f);
    CHECK(v.same_length);
    CHECK_FALSE(v.is_static);
    CHECK(v.length_delta_fraction == 0.0);
  }

  SUBCASE("wrong content-range start is not resumable") {
    ProbeFetcher f = [&](const std::string&, const std::optional<uint64_t>& from) {
      ProbeResponse r;
      r.ok = true;
      if (from) {
        r.status = 206;
        r.headers.add("Content-Range", "bytes 0-999/1000");
        r.body = seeded_bytes(1, 1000);
      } else {
        r.status = 200;
        r.body = seeded_bytes(1, 1000);
      }
      return r;
    };
    auto v = probe_url("http://weird.test/", f);
    CHECK(v.complete);
    CHECK_FALSE(v.supports_range);
  }

  SUBCASE("mid-probe failure preserves partial fields") {
    int calls = 0;
    ProbeFetcher f = [&](const std::string&, const std::optional<uint64_t>&) {
      ProbeResponse r;
      if (calls++ == 0) {
        r.ok = true;
        r.status = 200;
        r.body = seeded_bytes(1, 300);
      }
      return r;
    };
    auto v = probe_url("http://flaky.test/", f);
    CHECK_FALSE(v.complete);
    REQUIRE(v.length_first.has_value());
    CHECK(*v.length_first == 300);
    CHECK_FALSE(v.length_second.has_value());
  }
}

TEST_CASE("probe summary buckets the fixture corpus exactly") {
  std::vector<ProbeVerdict> vs;
  auto add = [&](bool range, bool stat, bool same, bool nocache) {
    ProbeVerdict v;
    v.complete = true;
    v.length_first = 10;
    v.length_second = same ? 10 : 12;
    v.supports_range = range;
    v.is_static = stat;
    v.same_length = same;
    v.no_cache = nocache;
    vs.push_back(v);
  };
  add(true, true, true, false);    // static + range
  add(true, true, true, false);    // static + range
  add(false, true, true, false);   // static, no range
  add(false, false, true, false);  // same-length dynamic
  add(false, false, false, true);  // dynamic, no-cache
  ProbeVerdict incomplete;
  incomplete.url = "x";
  vs.push_back(incomplete);

  auto s = summarize_probes(vs);
  CHECK(s.total == 6);
  CHECK(s.complete == 5);
  CHECK(s.range_resumable == 2);
  CHECK(s.static_content == 3);
  CHECK(s.same_length_dynamic == 1);
  CHECK(s.dynamic == 1);
  CHECK(s.no_cache == 1);

  auto j = nlohmann::json::parse(probes_to_json(vs));
  CHECK(j.at("verdicts").size() == 6);
  CHECK(j.at("summary").at("range_resumable") == 2);
}

TEST_CASE("length delta CDF matches a rank oracle") {
  Rng rng(17);
  std::uniform_real_distribution<double> d(0.0, 0.2);
  std::vector<double> deltas;
  std::vector<ProbeVerdict> vs;
  for (int i = 0; i < 100; ++i) {
    ProbeVerdict v;
    v.length_first = 1000;
    v.length_second = 900;  // values unused by the CDF beyond presence
    v.length_delta_fraction = d(rng);
    v.complete = true;
    deltas.push_back(v.length_delta_fraction);
    vs.push_back(v);
  }
  ProbeVerdict missing;  // second download never finished: excluded
  missing.length_first = 10;
  missing.length_delta_fraction = 0.5;
  vs.push_back(missing);

  auto cdf = length_delta_cdf(vs);
  CHECK(cdf.samples == 100);
  std::uniform_real_distribution<double> probe(-0.01, 0.25);
  for (int i = 0; i < 50; ++i) {
    double x = probe(rng);
    size_t rank = 0;
    for (double v : deltas)
      if (v <= x) ++rank;
    CHECK(cdf.value(x) == doctest::Approx(double(rank) / 100.0));
  }
}

TEST_CASE("length delta CDF of an all-static corpus is a point mass at zero") {
  std::vector<ProbeVerdict> vs;
  for (int i = 0; i < 5; ++i) {
    ProbeVerdict v;
    v.complete = true;
    v.length_first = 100;
    v.length_second = 100;
    v.length_delta_fraction = 0.0;
    vs.push_back(v);
  }
  auto cdf = length_delta_cdf(vs);
  CHECK(cdf.value(0.0) == doctest::Approx(1.0));
  CHECK(cdf.value(-1e-9) == doctest::Approx(0.0));
}

namespace {

const char* kModelCsv =
    "rssi_dbm_bin,probability\n"
    "-90,0.9\n"
    "-85,0.5\n"
    "-80,0.2\n"
    "-75,0.1\n"
    "-70,0.0\n";

UsageSession hand_session() {
  UsageSession s;
  s.session_id = "s1";
  for (int t = 0; t < 20; ++t) {
    SignalSample x;
    x.t = t;
    x.rssi_dbm = t < 5 ? -65.0 : -77.0;
    s.signal.push_back(x);
  }
  s.usage.push_back({0.0, 20.0});
  return s;
}

}  // namespace

TEST_CASE("expected disruptions: hand-stepped session") {
  auto model = parse_disconnection_model(kModelCsv, "test");
  std::vector<UsageSession> sessions{hand_session()};

  // Bins visited during usage: -65 (p=0) and -77 (p=0.2).
  double wifi = expected_disruptions(sessions, model, DisruptionPolicy::wifi_only());
  CHECK(wifi == doctest::Approx(0.2));

  // Signal drops below -75 at t=5; the 3 s hold fires a switch at t=8 with
  // 12 s of the usage interval left.
  double brute = expected_disruptions(sessions, model, DisruptionPolicy::brute_force());
  CHECK(brute == doctest::Approx(1.2));

  double wnm5 =
      expected_disruptions(sessions, model, DisruptionPolicy::wait_n_migrate(5.0));
  CHECK(wnm5 == doctest::Approx(1.2));  // 12 s remaining > 5 s wait: still cut

  double wnm20 =
      expected_disruptions(sessions, model, DisruptionPolicy::wait_n_migrate(20.0));
  CHECK(wnm20 == doctest::Approx(0.2));  // drains within the wait

  double wnm_inf = expected_disruptions(sessions, model,
                                        DisruptionPolicy::wait_n_migrate(kInfSeconds));
  CHECK(wnm_inf == doctest::Approx(0.2));
}

TEST_CASE("expected disruptions: quiet strong-signal session is zero everywhere") {
  auto model = parse_disconnection_model(kModelCsv, "test");
  UsageSession s;
  s.session_id = "quiet";
  for (int t = 0; t < 10; ++t) s.signal.push_back({double(t), -60.0, std::nullopt, true});
  s.usage.push_back({0.0, 10.0});
  std::vector<UsageSession> sessions{s};
  for (auto p : {DisruptionPolicy::wifi_only(), DisruptionPolicy::brute_force(),
                 DisruptionPolicy::wait_n_migrate(10.0)})
    CHECK(expected_disruptions(sessions, model, p) == 0.0);
}

TEST_CASE("estimators differ as sum vs complement") {
  auto model = parse_disconnection_model(kModelCsv, "test");
  UsageSession s;
  s.session_id = "two-bins";
  s.signal.push_back({0.0, -77.0, std::nullopt, true});  // p=0.2
  s.signal.push_back({1.0, -84.0, std::nullopt, true});  // p=0.5
  s.usage.push_back({0.0, 2.0});
  std::vector<UsageSession> sessions{s};
  double sum = expected_disruptions(sessions, model, DisruptionPolicy::wifi_only(),
                                    DisruptionEstimator::SumBins);
  double comp = expected_disruptions(sessions, model, DisruptionPolicy::wifi_only(),
                                     DisruptionEstimator::Complement);
  CHECK(sum == doctest::Approx(0.7));
  CHECK(comp == doctest::Approx(0.6));  // 1 - 0.8 * 0.5
}

TEST_CASE("policy dominance holds on a random corpus") {
  auto model = parse_disconnection_model(kModelCsv, "test");
  Rng rng(31);
  std::uniform_real_distribution<double> step(-4.0, 4.0);
  std::vector<UsageSession> sessions;
  for (int k = 0; k < 10; ++k) {
    UsageSession s;
    s.session_id = "r" + std::to_string(k);
    double rssi = -60;
    for (int t = 0; t < 600; ++t) {
      rssi = std::clamp(rssi + step(rng), -95.0, -50.0);
      s.signal.push_back({double(t), rssi, std::nullopt, true});
    }
    double a = 0;
    while (a < 560) {
      double b = a + 20 + (rng() % 60);
      s.usage.push_back({a, std::min(b, 600.0)});
      a = b + 10 + (rng() % 40);
    }
    sessions.push_back(std::move(s));
  }

  double wifi = expected_disruptions(sessions, model, DisruptionPolicy::wifi_only());
  double brute = expected_disruptions(sessions, model, DisruptionPolicy::brute_force());
  double w1 = expected_disruptions(sessions, model, DisruptionPolicy::wait_n_migrate(1.0));
  double w10 =
      expected_disruptions(sessions, model, DisruptionPolicy::wait_n_migrate(10.0));
  double w100 =
      expected_disruptions(sessions, model, DisruptionPolicy::wait_n_migrate(100.0));
  double winf = expected_disruptions(sessions, model,
                                     DisruptionPolicy::wait_n_migrate(kInfSeconds));

  CHECK(brute >= w1);
  CHECK(w1 >= w10);
  CHECK(w10 >= w100);
  CHECK(w100 >= winf);
  CHECK(wifi >= winf);  // switching away only removes exposure
  CHECK(winf >= 0.0);

  auto rep = disruption_report(sessions, model, {1.0, 10.0, 100.0});
  CHECK(rep.wifi_only == doctest::Approx(wifi));
  CHECK(rep.brute_force == doctest::Approx(brute));
  CHECK(rep.wait_n_migrate.at(10.0) == doctest::Approx(w10));
  CHECK(rep.sessions == 10);
  CHECK(rep.usage_seconds > 0);

  auto j = nlohmann::json::parse(report_to_json(rep));
  CHECK(j.at("estimator") == "sum_bins");
  CHECK(j.at("wait_n_migrate").size() == 3);
}

TEST_CASE("sessions must cover their usage intervals") {
  auto model = parse_disconnection_model(kModelCsv, "test");
  UsageSession s;
  s.session_id = "bad";
  s.signal.push_back({0.0, -60.0, std::nullopt, true});
  s.signal.push_back({5.0, -60.0, std::nullopt, true});
  s.usage.push_back({10.0, 12.0});  // starts after the last sample
  std::vector<UsageSession> sessions{s};
  CHECK_THROWS_AS(
      expected_disruptions(sessions, model, DisruptionPolicy::wifi_only()), TraceError);
}

TEST_CASE("session JSONL round-trips") {
  std::vector<UsageSession> sessions{hand_session()};
  sessions[0].signal[3].ap_id = "ap-7";
  std::string path = "/tmp/flowmig_sessions_test.jsonl";
  save_sessions_jsonl(path, sessions);
  auto back = load_sessions_jsonl(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].session_id == "s1");
  REQUIRE(back[0].signal.size() == 20);
  CHECK(back[0].signal[3].ap_id == "ap-7");
  CHECK(back[0].signal[7].rssi_dbm == -77.0);
  REQUIRE(back[0].usage.size() == 1);
  CHECK(back[0].usage[0].end == 20.0);
  std::remove(path.c_str());

  CHECK_THROWS_AS(parse_sessions_jsonl("{\"nope\":1}", "t"), SchemaError);
}

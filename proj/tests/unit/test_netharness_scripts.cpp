#include <unistd.h>

#include <atomic>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "flowmig/netharness.hpp"

using namespace flowmig;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string temp_path(const std::string& stem) {
  return std::string("/tmp/flowmig_") + stem + "_" +
         std::to_string(::getpid()) + ".jsonl";
}

}  // namespace

// --- script files ---

TEST_CASE("link scripts survive a save/load round trip") {
  LinkScript s;
  s.events.push_back({0.0, "wifi0", LinkEvent::Kind::Latency, 50});
  s.events.push_back({2.0, "wifi0", LinkEvent::Kind::Down, 0});
  s.events.push_back({2.5, "wifi0", LinkEvent::Kind::Rssi, -71.5});
  s.events.push_back({4.0, "wifi0", LinkEvent::Kind::Up, 0});
  s.duration = 4.0;

  auto path = temp_path("roundtrip");
  save_script_jsonl(path, s);
  LinkScript back = load_script_jsonl(path);
  std::remove(path.c_str());

  REQUIRE(back.events.size() == 4);
  CHECK(back.duration == 4.0);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(back.events[i].t == s.events[i].t);
    CHECK(back.events[i].path == s.events[i].path);
    CHECK(back.events[i].kind == s.events[i].kind);
  }
  CHECK(back.events[0].value == 50);
  CHECK(back.events[2].value == -71.5);
}

TEST_CASE("script parsing rejects malformed input") {
  CHECK_THROWS_AS(parse_script_jsonl("not json\n"), SchemaError);
  CHECK_THROWS_AS(parse_script_jsonl(R"({"t":1,"path":"w","event":"flap"})"),
                  SchemaError);
  CHECK_THROWS_AS(parse_script_jsonl(R"({"t":1,"path":"w","event":"latency"})"),
                  SchemaError);
  CHECK_THROWS_AS(parse_script_jsonl(R"({"t":1,"event":"up"})"), SchemaError);
  CHECK_THROWS_AS(
      parse_script_jsonl("{\"t\":5,\"path\":\"w\",\"event\":\"up\"}\n"
                         "{\"t\":4,\"path\":\"w\",\"event\":\"down\"}\n"),
      SchemaError);
  CHECK_THROWS_AS(
      parse_script_jsonl(R"({"t":1,"path":"w","event":"latency","value":-3})"),
      SchemaError);
  CHECK(parse_script_jsonl("").events.empty());
}

// --- run_script contract ---

TEST_CASE("empty script leaves paths untouched") {
  Net net;
  auto wifi = net.make_path("wifi0", "wifi");
  Net::ActorGuard me(net, "driver");
  auto stats = run_script(net, {{"wifi0", wifi}}, LinkScript{});
  CHECK(stats.events_applied == 0);
  CHECK(stats.rssi_samples == 0);
  CHECK(wifi->state() == PathState::Up);
  CHECK(net.connect_via(*wifi, "nowhere", 1) == nullptr);  // no listener
  net.shutdown();
}

TEST_CASE("down and up events gate connects and stall in-flight bytes") {
  Net net;
  auto wifi = net.make_path("wifi0", "wifi");
  auto lst = net.listen("origin", 80);
  LinkScript s;
  s.events.push_back({2.0, "wifi0", LinkEvent::Kind::Down, 0});
  s.events.push_back({4.0, "wifi0", LinkEvent::Kind::Up, 0});

  Seconds unstalled_at = -1;
  bool connect_during_down_failed = false;
  bool connect_after_up_ok = false;
  {
    Net::ActorGuard me(net, "driver");
    WaitGroup wg(net);
    wg.add(2);
    net.spawn("server", [&] {
      auto c = lst->accept();
      if (c) {
        c->write(std::string_view("early"));
        net.sleep_until(2.5);
        c->write(std::string_view("late"));  // written while the path is down
        net.sleep_until(6.0);
        c->close();
      }
      wg.done();
    });
    net.spawn("prober", [&] {
      net.sleep_until(3.0);
      connect_during_down_failed =
          net.connect_via(*wifi, "origin", 80) == nullptr;
      net.sleep_until(4.5);
      auto c2 = net.connect_via(*wifi, "origin", 80);
      connect_after_up_ok = c2 != nullptr;
      wg.done();
    });
    net.spawn("script", [&] { run_script(net, {{"wifi0", wifi}}, s); });

    auto c = net.connect_via(*wifi, "origin", 80);
    REQUIRE(c);
    std::string got;
    char buf[64];
    while (got.size() < 9) {
      auto r = c->read(buf, sizeof buf, std::nullopt);
      if (r.status != StreamStatus::Ok) break;
      got.append(buf, r.n);
      unstalled_at = net.now();
    }
    CHECK(got == "earlylate");
    wg.wait();
  }
  net.shutdown();
  CHECK(connect_during_down_failed);
  CHECK(connect_after_up_ok);
  CHECK(unstalled_at >= 4.0);
  CHECK(unstalled_at <= 4.1);
}

TEST_CASE("latency events change delivery timing") {
  Net net;
  auto wifi = net.make_path("wifi0", "wifi");
  auto lst = net.listen("origin", 80);
  LinkScript s;
  s.events.push_back({0.0, "wifi0", LinkEvent::Kind::Latency, 100});

  Seconds got_at = -1;
  {
    Net::ActorGuard me(net, "driver");
    net.spawn("script", [&] { run_script(net, {{"wifi0", wifi}}, s); });
    net.spawn("server", [&] {
      auto c = lst->accept();
      if (!c) return;
      net.sleep_until(1.0);
      c->write(std::string_view("x"));
      c->close();
    });
    net.sleep_until(0.5);  // let the latency event land first
    auto c = net.connect_via(*wifi, "origin", 80);
    REQUIRE(c);
    char buf[4];
    auto r = c->read(buf, sizeof buf, std::nullopt);
    REQUIRE(r.status == StreamStatus::Ok);
    got_at = net.now();
  }
  net.shutdown();
  CHECK(got_at == doctest::Approx(1.1));
}

TEST_CASE("rssi events reach the callback and reflect association") {
  Net net;
  auto wifi = net.make_path("wifi0", "wifi");
  LinkScript s;
  s.events.push_back({1.0, "wifi0", LinkEvent::Kind::Rssi, -50});
  s.events.push_back({2.0, "wifi0", LinkEvent::Kind::Down, 0});
  s.events.push_back({3.0, "wifi0", LinkEvent::Kind::Rssi, -60});
  s.events.push_back({4.0, "wifi0", LinkEvent::Kind::Up, 0});
  s.events.push_back({5.0, "wifi0", LinkEvent::Kind::Rssi, -55});

  std::vector<SignalSample> seen;
  ScriptRunStats stats;
  {
    Net::ActorGuard me(net, "driver");
    stats = run_script(net, {{"wifi0", wifi}}, s,
                       [&](const std::string& id, const SignalSample& smp) {
                         CHECK(id == "wifi0");
                         seen.push_back(smp);
                       });
  }
  net.shutdown();
  CHECK(stats.events_applied == 5);
  CHECK(stats.rssi_samples == 3);
  CHECK(stats.end_time == 5.0);
  REQUIRE(seen.size() == 3);
  CHECK(seen[0].t == 1.0);
  CHECK(seen[0].rssi_dbm == -50);
  CHECK(seen[0].associated);
  CHECK(seen[1].t == 3.0);
  CHECK_FALSE(seen[1].associated);
  CHECK(seen[2].t == 5.0);
  CHECK(seen[2].associated);
}

TEST_CASE("script naming an unknown path is refused") {
  Net net;
  auto wifi = net.make_path("wifi0", "wifi");
  LinkScript s;
  s.events.push_back({1.0, "cell9", LinkEvent::Kind::Down, 0});
  {
    Net::ActorGuard me(net, "driver");
    CHECK_THROWS_AS(run_script(net, {{"wifi0", wifi}}, s), ConfigError);
  }
  net.shutdown();
}

// --- canned schedules ---

TEST_CASE("canned schedules are deterministic and well formed") {
  auto w1 = walk_script();
  auto w2 = walk_script();
  auto d1 = drive_script();
  REQUIRE(w1.events.size() == w2.events.size());
  for (size_t i = 0; i < w1.events.size(); ++i) {
    CHECK(w1.events[i].t == w2.events[i].t);
    CHECK(w1.events[i].kind == w2.events[i].kind);
    CHECK(w1.events[i].value == w2.events[i].value);
  }
  // walk: 300 rssi readings, three outages, two latency settings
  size_t rssi = 0, down = 0, up = 0, lat = 0;
  Seconds prev = -1;
  for (const auto& e : w1.events) {
    CHECK(e.t >= prev);
    prev = e.t;
    switch (e.kind) {
      case LinkEvent::Kind::Rssi: ++rssi; break;
      case LinkEvent::Kind::Down: ++down; break;
      case LinkEvent::Kind::Up: ++up; break;
      case LinkEvent::Kind::Latency: ++lat; break;
    }
  }
  CHECK(rssi == 300);
  CHECK(down == 3);
  CHECK(up == 3);
  CHECK(lat == 2);
  CHECK(w1.duration == 300.0);

  // drive: seven outages, one rssi reading per second
  size_t d_down = 0, d_rssi = 0;
  for (const auto& e : d1.events) {
    if (e.kind == LinkEvent::Kind::Down) ++d_down;
    if (e.kind == LinkEvent::Kind::Rssi) ++d_rssi;
  }
  CHECK(d_down == 7);
  CHECK(d_rssi == 300);
}

TEST_CASE("shipped script files match the generators") {
  auto check_file = [](const std::string& rel, const LinkScript& gen) {
    auto tmp = temp_path("gen");
    save_script_jsonl(tmp, gen);
    std::string from_gen = slurp(tmp);
    std::remove(tmp.c_str());
    std::string shipped = slurp(std::string(FLOWMIG_REPO_DIR) + "/" + rel);
    CHECK(shipped == from_gen);
  };
  check_file("data/scripts/walk.jsonl", walk_script());
  check_file("data/scripts/drive.jsonl", drive_script());
}

// --- origin profile contracts (no proxy involved) ---

namespace {

struct OriginRig {
  Net net;
  std::shared_ptr<SimPath> path;
  std::optional<Net::ActorGuard> guard;
  std::unique_ptr<Origin> origin;

  explicit OriginRig(OriginProfile prof) {
    path = net.make_path("wifi0", "wifi");
    guard.emplace(net, "client");
    origin = std::make_unique<Origin>(net, prof, "origin.test", 80);
    origin->start();
  }
  ~OriginRig() {
    net.shutdown();
    guard.reset();
  }

  HarnessFetchResult get(
      const std::vector<std::pair<std::string, std::string>>& hdrs = {}) {
    auto s = net.connect_via(*path, "origin.test", 80);
    REQUIRE(s);
    return harness_fetch(*s, "origin.test", "/file", std::nullopt, hdrs);
  }
};

}  // namespace

TEST_CASE("range-capable origin serves full and suffix reads") {
  OriginProfile p;
  p.behavior = OriginBehavior::StaticRange;
  p.body_length = 10000;
  OriginRig rig(p);
  const std::string body = rig.origin->canonical_body();

  auto full = rig.get();
  CHECK(full.ok);
  CHECK(full.status == 200);
  CHECK(full.head.accept_ranges());
  CHECK(full.body == body);

  auto tail = rig.get({{"Range", "bytes=6000-"}});
  CHECK(tail.status == 206);
  REQUIRE(tail.head.headers.get("Content-Range"));
  auto cr = parse_content_range(*tail.head.headers.get("Content-Range"));
  REQUIRE(cr);
  CHECK(cr->first == 6000);
  CHECK(cr->last == 9999);
  CHECK(cr->total.value_or(0) == 10000);
  CHECK(tail.body == body.substr(6000));
}

TEST_CASE("range-blind origin answers a range request with the whole body") {
  OriginProfile p;
  p.behavior = OriginBehavior::StaticNoRange;
  p.body_length = 5000;
  OriginRig rig(p);
  auto r = rig.get({{"Range", "bytes=100-"}});
  CHECK(r.ok);
  CHECK(r.status == 200);
  CHECK_FALSE(r.head.accept_ranges());
  CHECK(r.body == rig.origin->canonical_body());
}

TEST_CASE("chunked origin streams without a content length") {
  OriginProfile p;
  p.behavior = OriginBehavior::Chunked;
  p.body_length = 9000;
  OriginRig rig(p);
  auto r = rig.get();
  CHECK(r.ok);
  CHECK(r.status == 200);
  CHECK(r.head.chunked());
  CHECK_FALSE(r.head.content_length());
  CHECK(r.body == rig.origin->canonical_body());
}

TEST_CASE("jittery origin drifts content by the planted shifts") {
  OriginProfile p;
  p.behavior = OriginBehavior::DynamicJitter;
  p.body_length = 8000;
  p.length_jitter_fraction = 0.01;
  p.offset_region_begin = 100;
  p.offset_region_end = 200;
  p.jitter_shifts = {0, 37, -21};
  OriginRig rig(p);

  auto a = rig.get();
  auto b = rig.get();
  auto c = rig.get();
  CHECK(a.ok);
  CHECK(b.ok);
  CHECK(c.ok);
  CHECK(a.body == rig.origin->variant_body(0));
  CHECK(b.body == rig.origin->variant_body(1));
  CHECK(c.body == rig.origin->variant_body(2));
  CHECK(long(b.body.size()) - long(a.body.size()) == 37);
  CHECK(long(c.body.size()) - long(a.body.size()) == -21);
  // far tails agree modulo the shift; heads agree outright
  CHECK(a.body.substr(0, 100) == b.body.substr(0, 100));
  CHECK(a.body.substr(7000) == b.body.substr(7000 + 37));
}

TEST_CASE("no-cache origin marks every response") {
  OriginProfile p;
  p.behavior = OriginBehavior::NoCacheStatic;
  p.body_length = 3000;
  OriginRig rig(p);
  auto r = rig.get();
  CHECK(r.ok);
  CHECK(r.head.no_cache_response());
  CHECK(r.body == rig.origin->canonical_body());
}

TEST_CASE("echo origin returns the posted payload") {
  OriginProfile p;
  p.behavior = OriginBehavior::PostEcho;
  OriginRig rig(p);

  auto s = rig.net.connect_via(*rig.path, "origin.test", 80);
  REQUIRE(s);
  const std::string payload = "form=data&x=1";
  RequestHead req;
  req.method = "POST";
  req.target = "/submit";
  req.headers.add("Host", "origin.test");
  req.headers.add("Content-Length", std::to_string(payload.size()));
  req.headers.add("Connection", "close");
  REQUIRE(s->write(req.serialize()));
  REQUIRE(s->write(payload));

  BufferedReader r(*s);
  ResponseHead head;
  REQUIRE(read_response_head(r, head, std::nullopt) == HeadResult::Ok);
  CHECK(head.status == 200);
  auto cl = head.content_length();
  REQUIRE(cl);
  std::string body(*cl, '\0');
  REQUIRE(r.read_exact(body.data(), *cl, std::nullopt) == StreamStatus::Ok);
  CHECK(body == payload);
}

// --- transfer battery ---

namespace {

BatteryOptions small_battery(LinkScript script, Seconds duration) {
  BatteryOptions opt;
  opt.script = std::move(script);
  opt.duration = duration;
  return opt;
}

}  // namespace

TEST_CASE("battery on a healthy link completes everything") {
  auto opt = small_battery(LinkScript{}, 30.5);
  for (auto mode : {BatteryMode::NoPolicy, BatteryMode::WaitNMigrate,
                    BatteryMode::WaitNMigrateResumption}) {
    auto run = run_battery_once(opt, 100 * 1024, mode);
    CAPTURE(to_string(mode));
    CHECK(run.cell.attempts == 6);
    CHECK(run.cell.completed == 6);
  }
}

TEST_CASE("walk schedule: resumption completes everything, policies rank") {
  auto opt = small_battery(walk_script(), 300.0);
  auto table = transfer_battery(opt);

  const size_t k10 = 10 * 1024, k100 = 100 * 1024, m1 = 1024 * 1024;
  for (size_t size : {k10, k100, m1}) {
    CAPTURE(size);
    for (auto mode : {BatteryMode::NoPolicy, BatteryMode::WaitNMigrate,
                      BatteryMode::WaitNMigrateResumption})
      CHECK(table[size][mode].attempts == 60);
    // resumption recovers every transfer
    CHECK(table[size][BatteryMode::WaitNMigrateResumption].completed == 60);
    // migration alone beats no policy; resumption is at least as good
    CHECK(table[size][BatteryMode::NoPolicy].completed <
          table[size][BatteryMode::WaitNMigrate].completed);
    CHECK(table[size][BatteryMode::WaitNMigrate].completed <=
          table[size][BatteryMode::WaitNMigrateResumption].completed);
  }
  // two outages start while the only path is up for no-policy; the long
  // transfer also dies in the second outage it straddles
  CHECK(table[k10][BatteryMode::NoPolicy].completed == 58);
  CHECK(table[k100][BatteryMode::NoPolicy].completed == 58);
  CHECK(table[m1][BatteryMode::NoPolicy].completed == 57);
  CHECK(table[k10][BatteryMode::WaitNMigrate].completed == 60);
  CHECK(table[k100][BatteryMode::WaitNMigrate].completed == 60);
  CHECK(table[m1][BatteryMode::WaitNMigrate].completed == 59);
}

TEST_CASE("drive schedule: policy modes stay above 95 percent") {
  auto opt = small_battery(drive_script(), 300.0);
  const size_t m1 = 1024 * 1024;
  auto np = run_battery_once(opt, m1, BatteryMode::NoPolicy).cell;
  auto wnm = run_battery_once(opt, m1, BatteryMode::WaitNMigrate).cell;
  auto res = run_battery_once(opt, m1, BatteryMode::WaitNMigrateResumption).cell;

  CHECK(np.attempts == 60);
  CHECK(np.completed == 51);
  CHECK(wnm.completed == 58);
  CHECK(res.completed == 58);
  CHECK(res.rate() >= 0.95);
  CHECK(np.rate() < res.rate());
}

TEST_CASE("identical battery runs produce identical logs") {
  auto opt = small_battery(walk_script(), 300.0);
  auto a = run_battery_once(opt, 100 * 1024, BatteryMode::WaitNMigrateResumption);
  auto b = run_battery_once(opt, 100 * 1024, BatteryMode::WaitNMigrateResumption);

  CHECK(a.cell.attempts == b.cell.attempts);
  CHECK(a.cell.completed == b.cell.completed);
  REQUIRE(a.origin_log.size() == b.origin_log.size());
  for (size_t i = 0; i < a.origin_log.size(); ++i) {
    CAPTURE(i);
    CHECK(a.origin_log[i].t == b.origin_log[i].t);
    CHECK(a.origin_log[i].method == b.origin_log[i].method);
    CHECK(a.origin_log[i].path_id == b.origin_log[i].path_id);
    CHECK(a.origin_log[i].range_header == b.origin_log[i].range_header);
    CHECK(a.origin_log[i].bytes_served == b.origin_log[i].bytes_served);
    CHECK(a.origin_log[i].status == b.origin_log[i].status);
  }
}

TEST_CASE("battery table serializes with one row per cell") {
  auto opt = small_battery(LinkScript{}, 10.5);
  opt.sizes = {2048};
  auto table = transfer_battery(opt);
  std::string js = battery_to_json(table);
  CHECK(js.find("\"no_policy\"") != std::string::npos);
  CHECK(js.find("\"wait_n_migrate\"") != std::string::npos);
  CHECK(js.find("\"wnm_resumption\"") != std::string::npos);
  CHECK(js.find("\"attempts\": 2") != std::string::npos);
}

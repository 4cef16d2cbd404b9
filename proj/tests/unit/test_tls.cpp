#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "flowmig/net.hpp"
#include "flowmig/tls.hpp"

using namespace flowmig;

namespace {

namespace fs = std::filesystem;

struct TmpDir {
  std::string path;
  TmpDir() {
    static std::atomic<int> counter{0};
    path = "/tmp/flowmig_tls_" + std::to_string(::getpid()) + "_" +
           std::to_string(counter++);
    fs::create_directories(path);
  }
  ~TmpDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

std::string slurp(const std::string& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const std::string& p, const std::string& data) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  f << data;
}

}  // namespace

// --- root store ---

TEST_CASE("ensure_ca creates a root once and reloads it bit for bit") {
  TmpDir td;
  auto store = td.path + "/ca";
  LocalCa a = ensure_ca(store);
  CHECK(a.root.valid());
  CHECK(a.root.cert_pem.find("BEGIN CERTIFICATE") != std::string::npos);
  CHECK(a.root.key_pem.find("PRIVATE KEY") != std::string::npos);
  CHECK(fs::exists(store + "/ca_cert.pem"));
  CHECK(fs::exists(store + "/ca_key.pem"));

  LocalCa b = ensure_ca(store);
  CHECK(b.root.cert_pem == a.root.cert_pem);
  CHECK(b.root.key_pem == a.root.key_pem);
}

TEST_CASE("ensure_ca refuses a corrupt or half-present store") {
  TmpDir td;
  auto store = td.path + "/ca";
  LocalCa a = ensure_ca(store);

  SUBCASE("garbage key") {
    spit(store + "/ca_key.pem", "not a key\n");
    CHECK_THROWS_AS(ensure_ca(store), ConfigError);
    CHECK(slurp(store + "/ca_cert.pem") == a.root.cert_pem);
    CHECK(slurp(store + "/ca_key.pem") == "not a key\n");
  }
  SUBCASE("missing key file") {
    fs::remove(store + "/ca_key.pem");
    CHECK_THROWS_WITH_AS(ensure_ca(store),
                         doctest::Contains("refusing to regenerate"),
                         ConfigError);
    CHECK(slurp(store + "/ca_cert.pem") == a.root.cert_pem);
    CHECK(!fs::exists(store + "/ca_key.pem"));
  }
  SUBCASE("key from another root") {
    LocalCa other = ensure_ca(td.path + "/other");
    spit(store + "/ca_key.pem", other.root.key_pem);
    CHECK_THROWS_AS(ensure_ca(store), ConfigError);
  }
}

// --- leaf issuance ---

TEST_CASE("leaf cache signs once per domain and normalizes case") {
  TmpDir td;
  auto ca = ensure_ca(td.path + "/ca");
  LeafCertCache cache;

  CertKey first = issue_leaf("Site.Example", ca, cache);
  CertKey again = issue_leaf("site.example", ca, cache);
  CHECK(first.valid());
  CHECK(again.cert_pem == first.cert_pem);
  CHECK(again.key_pem == first.key_pem);
  CHECK(cache.size() == 1);
  CHECK(cache.issued() == 1);

  auto recs = cache.records();
  REQUIRE(recs.size() == 2);
  CHECK(!recs[0].cache_hit);
  CHECK(recs[1].cache_hit);
  CHECK(recs[0].domain == "site.example");
}

TEST_CASE("leaf issuance rejects broken hostnames") {
  TmpDir td;
  auto ca = ensure_ca(td.path + "/ca");
  LeafCertCache cache;
  for (const char* bad :
       {"", "a..b", ".lead", "trail.", "has_underscore", "-dash.lead",
        "dash-.trail", "spa ce"}) {
    CAPTURE(bad);
    CHECK_THROWS_AS(cache.issue(bad, ca), ConfigError);
  }
  std::string long_label(64, 'a');
  CHECK_THROWS_AS(cache.issue(long_label + ".test", ca), ConfigError);
  std::string long_name;
  for (int i = 0; i < 64; ++i) long_name += "abcd.";
  long_name += "test";
  CHECK_THROWS_AS(cache.issue(long_name, ca), ConfigError);
  CHECK(cache.issued() == 0);
}

TEST_CASE("persisted leaves are reloaded, not re-signed") {
  TmpDir td;
  auto ca = ensure_ca(td.path + "/ca");
  std::string pem;
  {
    LeafCertCache first(td.path + "/leaves");
    pem = first.issue("keep.example", ca).cert_pem;
    CHECK(first.issued() == 1);
  }
  CHECK(fs::exists(td.path + "/leaves/keep.example.crt.pem"));
  CHECK(fs::exists(td.path + "/leaves/keep.example.key.pem"));

  LeafCertCache second(td.path + "/leaves");
  CertKey back = second.issue("keep.example", ca);
  CHECK(second.issued() == 0);
  CHECK(back.cert_pem == pem);
  auto recs = second.records();
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].cache_hit);

  // A mangled leaf pair is replaced rather than trusted or fatal.
  spit(td.path + "/leaves/keep.example.key.pem", "junk");
  LeafCertCache third(td.path + "/leaves");
  CertKey fresh = third.issue("keep.example", ca);
  CHECK(third.issued() == 1);
  CHECK(fresh.cert_pem != pem);
  CHECK(slurp(td.path + "/leaves/keep.example.key.pem") == fresh.key_pem);
}

TEST_CASE("concurrent requests for one domain share a single signing") {
  TmpDir td;
  auto ca = ensure_ca(td.path + "/ca");
  LeafCertCache cache;
  const int kThreads = 8;
  std::vector<std::string> pems(kThreads);
  std::atomic<int> errors{0};
  std::vector<std::thread> ths;
  for (int i = 0; i < kThreads; ++i)
    ths.emplace_back([&, i] {
      try {
        pems[i] = cache.issue("racy.example", ca).cert_pem;
      } catch (...) {
        ++errors;
      }
    });
  for (auto& t : ths) t.join();
  CHECK(errors == 0);
  CHECK(cache.issued() == 1);
  for (int i = 1; i < kThreads; ++i) CHECK(pems[i] == pems[0]);
}

TEST_CASE("signing a leaf stays well under the latency budget") {
  TmpDir td;
  auto ca = ensure_ca(td.path + "/ca");
  LeafCertCache cache;
  for (int i = 0; i < 8; ++i)
    cache.issue("host" + std::to_string(i) + ".example", ca);
  double total = 0;
  int n = 0;
  for (const auto& r : cache.records())
    if (!r.cache_hit) {
      total += r.elapsed_s;
      ++n;
    }
  REQUIRE(n == 8);
  CHECK(total / n < 1.7);
}

// --- handshakes over harness channels ---

namespace {

struct TlsPairRig {
  Net net;
  TmpDir td;
  LocalCa ca;
  LeafCertCache cache;
  CertKey leaf;
  std::shared_ptr<VirtualListener> lst;
  std::optional<Net::ActorGuard> guard;
  WaitGroup wg;

  // Server-side observations, written by the actor, read after wg.wait().
  std::optional<std::string> seen_sni;
  std::string srv_error;
  bool srv_got_eof = false;
  std::string srv_received;

  TlsPairRig()
      : ca(ensure_ca(td.path + "/ca")),
        leaf(issue_leaf("echo.example", ca, cache)),
        lst(net.listen("echo.example", 443)),
        wg(net) {
    guard.emplace(net, "main");
  }

  ~TlsPairRig() {
    net.shutdown();
    guard.reset();
  }

  // Echo server: reads once, writes "echo: " + payload, reads to EOF, closes.
  void spawn_echo() {
    wg.add(1);
    net.spawn("server", [this] {
      auto raw = lst->accept();
      if (!raw) {
        wg.done();
        return;
      }
      auto r = tls_accept(
          std::move(raw),
          [this](const std::optional<std::string>&) -> std::optional<CertKey> {
            return leaf;
          },
          std::nullopt);
      seen_sni = r.sni;
      srv_error = r.error;
      if (r.stream) {
        char buf[512];
        auto rr = r.stream->read(buf, sizeof buf, std::nullopt);
        if (rr.status == StreamStatus::Ok) {
          srv_received.assign(buf, rr.n);
          r.stream->write("echo: " + srv_received);
        }
        auto rr2 = r.stream->read(buf, sizeof buf, std::nullopt);
        srv_got_eof = rr2.status == StreamStatus::Eof;
        r.stream->close();
      }
      wg.done();
    });
  }
};

}  // namespace

TEST_CASE("tls round trip: verified client, echo, clean close") {
  TlsPairRig rig;
  rig.spawn_echo();

  auto raw = rig.net.connect_local("echo.example", 443);
  REQUIRE(raw);
  auto c = tls_connect(std::move(raw), "echo.example", {rig.ca.root.cert_pem},
                       std::nullopt);
  REQUIRE(c.stream);
  CHECK(c.verified);
  CHECK(c.error.empty());

  CHECK(c.stream->write("ping"));
  std::string got;
  char buf[64];
  while (got.size() < 10) {
    auto rr = c.stream->read(buf, sizeof buf, std::nullopt);
    REQUIRE(rr.status == StreamStatus::Ok);
    got.append(buf, rr.n);
  }
  CHECK(got == "echo: ping");
  c.stream->close();

  rig.wg.wait();
  CHECK(rig.srv_error.empty());
  REQUIRE(rig.seen_sni.has_value());
  CHECK(*rig.seen_sni == "echo.example");
  CHECK(rig.srv_received == "ping");
  CHECK(rig.srv_got_eof);  // close_notify surfaces as EOF, not an error
}

TEST_CASE("verification flags without enforcement") {
  SUBCASE("no trust root installed") {
    TlsPairRig rig;
    rig.spawn_echo();
    auto c = tls_connect(rig.net.connect_local("echo.example", 443),
                         "echo.example", {}, std::nullopt);
    REQUIRE(c.stream);
    CHECK(!c.verified);
    CHECK(!c.verify_detail.empty());
    c.stream->write("x");
    c.stream->close();
    rig.wg.wait();
  }
  SUBCASE("hostname mismatch") {
    TlsPairRig rig;
    rig.spawn_echo();
    auto c = tls_connect(rig.net.connect_local("echo.example", 443),
                         "wrong.example", {rig.ca.root.cert_pem}, std::nullopt);
    REQUIRE(c.stream);
    CHECK(!c.verified);
    CHECK(c.verify_detail.find("ostname") != std::string::npos);
    c.stream->write("x");
    c.stream->close();
    rig.wg.wait();
  }
}

TEST_CASE("enforced verification aborts the handshake") {
  TlsPairRig rig;
  rig.spawn_echo();
  TmpDir other_dir;
  LocalCa other = ensure_ca(other_dir.path + "/ca");
  auto c = tls_connect(rig.net.connect_local("echo.example", 443),
                       "echo.example", {other.root.cert_pem}, std::nullopt,
                       /*enforce=*/true);
  CHECK(!c.stream);
  CHECK(!c.error.empty());
  rig.wg.wait();
  CHECK(!rig.srv_error.empty());  // client sent a fatal alert
}

TEST_CASE("server aborts when no certificate can be picked") {
  TlsPairRig rig;
  rig.wg.add(1);
  rig.net.spawn("server", [&] {
    auto raw = rig.lst->accept();
    if (raw) {
      auto r = tls_accept(
          std::move(raw),
          [](const std::optional<std::string>&) -> std::optional<CertKey> {
            return std::nullopt;
          },
          std::nullopt);
      rig.srv_error = r.error;
    }
    rig.wg.done();
  });
  auto c = tls_connect(rig.net.connect_local("echo.example", 443),
                       "echo.example", {rig.ca.root.cert_pem}, std::nullopt);
  CHECK(!c.stream);
  rig.wg.wait();
  CHECK(rig.srv_error == "certificate issuance refused");
}

TEST_CASE("handshake deadline fires against a silent peer") {
  TlsPairRig rig;
  rig.wg.add(1);
  rig.net.spawn("server", [&] {
    auto raw = rig.lst->accept();
    rig.net.sleep_for(30.0);  // never speaks TLS
    if (raw) raw->close();
    rig.wg.done();
  });
  auto c = tls_connect(rig.net.connect_local("echo.example", 443),
                       "echo.example", {rig.ca.root.cert_pem},
                       rig.net.now() + 2.0);
  CHECK(!c.stream);
  CHECK(c.error == "handshake timed out");
  CHECK(rig.net.now() >= 2.0);
  CHECK(rig.net.now() < 30.0);
  rig.wg.wait();
}

TEST_CASE("read deadlines and idle detection pass through the record layer") {
  TlsPairRig rig;
  rig.wg.add(1);
  rig.net.spawn("server", [&] {
    auto raw = rig.lst->accept();
    if (!raw) {
      rig.wg.done();
      return;
    }
    auto r = tls_accept(
        std::move(raw),
        [&](const std::optional<std::string>&) -> std::optional<CertKey> {
          return rig.leaf;
        },
        std::nullopt);
    if (r.stream) {
      rig.net.sleep_until(3.0);
      r.stream->write("late");
      char buf[16];
      r.stream->read(buf, sizeof buf, std::nullopt);  // wait for client close
      r.stream->close();
    }
    rig.wg.done();
  });

  auto c = tls_connect(rig.net.connect_local("echo.example", 443),
                       "echo.example", {rig.ca.root.cert_pem}, std::nullopt);
  REQUIRE(c.stream);

  CHECK(detect_timeout(*c.stream, 1.0, rig.net) == StreamStatus::Timeout);
  CHECK(rig.net.now() >= 1.0);

  CHECK(detect_timeout(*c.stream, 10.0, rig.net) == StreamStatus::Ok);
  char buf[16];
  auto rr = c.stream->read(buf, sizeof buf, rig.net.now() + 1.0);
  REQUIRE(rr.status == StreamStatus::Ok);
  CHECK(std::string(buf, rr.n) == "late");

  auto rr2 = c.stream->read(buf, sizeof buf, rig.net.now() + 0.5);
  CHECK(rr2.status == StreamStatus::Timeout);

  c.stream->close();
  rig.wg.wait();
}

TEST_CASE("kill severs a blocked tls read abortively") {
  TlsPairRig rig;
  rig.wg.add(1);
  rig.net.spawn("server", [&] {
    auto raw = rig.lst->accept();
    if (!raw) {
      rig.wg.done();
      return;
    }
    auto r = tls_accept(
        std::move(raw),
        [&](const std::optional<std::string>&) -> std::optional<CertKey> {
          return rig.leaf;
        },
        std::nullopt);
    if (r.stream) {
      char buf[16];
      r.stream->read(buf, sizeof buf, std::nullopt);  // blocks until the kill
    }
    rig.wg.done();
  });

  auto c = tls_connect(rig.net.connect_local("echo.example", 443),
                       "echo.example", {rig.ca.root.cert_pem}, std::nullopt);
  REQUIRE(c.stream);

  Stream* target = c.stream.get();
  rig.wg.add(1);
  rig.net.spawn("killer", [&, target] {
    rig.net.sleep_for(1.0);
    target->kill();
    rig.wg.done();
  });

  char buf[16];
  auto rr = c.stream->read(buf, sizeof buf, std::nullopt);
  CHECK(rr.status == StreamStatus::Error);
  CHECK(rig.net.now() >= 1.0);
  rig.wg.wait();
}

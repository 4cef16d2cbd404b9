#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flowmig/proxy.hpp"
#include "flowmig/tls.hpp"

namespace flowmig {

// What to do when an upstream chain fails verification.
enum class TrustMode { Deny, Prompt, Allowlist };

std::string to_string(TrustMode m);

struct InterceptorConfig {
  std::string ca_dir;    // local root store (required)
  std::string leaf_dir;  // persisted leaf cache; empty keeps leaves in memory
  // Anchors for upstream verification. Origins that do not chain to one of
  // these count as unverified and go through the trust policy.
  std::vector<std::string> trust_roots_pem;
  TrustMode on_unverified = TrustMode::Deny;
  // Prompt mode: asked once per connection attempt against an unverified
  // upstream; absent means refuse.
  std::function<bool(const std::string& domain, const std::string& reason)> prompt;
  std::string allowlist_path;  // Allowlist mode: persisted allowed domains
  // First CONNECT per domain passes through as a blind tunnel; interception
  // starts with the second access.
  bool tunnel_first_access = false;
};

struct InterceptEvent {
  enum class Kind {
    TunneledFirst,
    Intercepted,
    ClientHandshakeFailed,
    UpstreamUnverified,
    UpstreamAllowed,
    UpstreamRefused,
  };
  Kind kind;
  std::string domain;
  std::string detail;
};

std::string to_string(InterceptEvent::Kind k);

// Terminates client TLS with locally-issued leaves and re-originates TLS
// toward the real server with strict verification, handing the proxy plain
// byte streams on both sides.
class TlsInterceptor {
 public:
  explicit TlsInterceptor(InterceptorConfig cfg);

  // CONNECT handler to install via ResumptionProxy::set_connect_handler.
  ResumptionProxy::ConnectHandler handler(ResumptionProxy& proxy);

  // Upstream TLS wrapper for one host, with handshake deadlines taken from
  // clock + timeout; refused or failed upstreams yield nullptr.
  std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)>
  upstream_wrapper(const std::string& host, const Clock& clock,
                   Seconds timeout_s);

  const LocalCa& ca() const { return ca_; }
  LeafCertCache& leaves() { return leaves_; }
  std::vector<InterceptEvent> events() const;

  // Adds a domain to the allowlist and persists it when a path is configured.
  void remember_allowed(const std::string& domain);
  bool is_allowed(const std::string& domain) const;

 private:
  bool allow_unverified(const std::string& domain, const std::string& reason);
  bool first_access(const std::string& domain);
  void note(InterceptEvent::Kind kind, const std::string& domain,
            std::string detail = {});
  void save_allowlist_locked();

  InterceptorConfig cfg_;
  LocalCa ca_;
  LeafCertCache leaves_;
  mutable std::mutex mu_;
  std::set<std::string> tunneled_;
  std::set<std::string> allowlist_;
  std::vector<InterceptEvent> events_;
};

}  // namespace flowmig

#include "flowmig/intercept.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "flowmig/http.hpp"

namespace flowmig {

std::string to_string(TrustMode m) {
  switch (m) {
    case TrustMode::Deny: return "deny";
    case TrustMode::Prompt: return "prompt";
    case TrustMode::Allowlist: return "allowlist";
  }
  return "?";
}

std::string to_string(InterceptEvent::Kind k) {
  switch (k) {
    case InterceptEvent::Kind::TunneledFirst: return "tunneled_first";
    case InterceptEvent::Kind::Intercepted: return "intercepted";
    case InterceptEvent::Kind::ClientHandshakeFailed: return "client_handshake_failed";
    case InterceptEvent::Kind::UpstreamUnverified: return "upstream_unverified";
    case InterceptEvent::Kind::UpstreamAllowed: return "upstream_allowed";
    case InterceptEvent::Kind::UpstreamRefused: return "upstream_refused";
  }
  return "?";
}

TlsInterceptor::TlsInterceptor(InterceptorConfig cfg)
    : cfg_(std::move(cfg)), ca_(ensure_ca(cfg_.ca_dir)), leaves_(cfg_.leaf_dir) {
  if (!cfg_.allowlist_path.empty()) {
    std::ifstream f(cfg_.allowlist_path);
    std::string line;
    while (std::getline(f, line)) {
      std::string d(trim(line));
      if (!d.empty()) allowlist_.insert(to_lower(d));
    }
  }
}

ResumptionProxy::ConnectHandler TlsInterceptor::handler(ResumptionProxy& proxy) {
  ResumptionProxy* px = &proxy;
  return [this, px](std::unique_ptr<Stream> client, const std::string& authority) {
    auto auth = parse_authority(authority);
    if (!auth) {
      // Let the proxy produce its usual 400 for a broken authority.
      px->tunnel(std::move(client), authority);
      return;
    }
    const std::string host = to_lower(auth->first);
    if (cfg_.tunnel_first_access && first_access(host)) {
      note(InterceptEvent::Kind::TunneledFirst, host);
      px->tunnel(std::move(client), authority);
      return;
    }
    if (!client->write("HTTP/1.1 200 Connection Established\r\n\r\n")) return;

    const Seconds hs_deadline = px->net().now() + px->config().connect_timeout_s;
    auto res = tls_accept(
        std::move(client),
        [this, &host](const std::optional<std::string>& sni)
            -> std::optional<CertKey> {
          try {
            return leaves_.issue(sni ? *sni : host, ca_);
          } catch (const std::exception&) {
            return std::nullopt;
          }
        },
        hs_deadline);
    if (!res.stream) {
      note(InterceptEvent::Kind::ClientHandshakeFailed,
           res.sni ? to_lower(*res.sni) : host, res.error);
      return;
    }
    note(InterceptEvent::Kind::Intercepted,
         res.sni ? to_lower(*res.sni) : host);

    ResumptionProxy::FixedTarget tgt;
    tgt.scheme = "https";
    tgt.host = host;
    tgt.port = auth->second;
    tgt.wrap_upstream =
        upstream_wrapper(host, px->net(), px->config().connect_timeout_s);
    px->serve_fixed(std::move(res.stream), tgt);
  };
}

std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)>
TlsInterceptor::upstream_wrapper(const std::string& host, const Clock& clock,
                                 Seconds timeout_s) {
  const Clock* clk = &clock;
  return [this, host, clk, timeout_s](
             std::unique_ptr<Stream> raw) -> std::unique_ptr<Stream> {
    auto res = tls_connect(std::move(raw), host, cfg_.trust_roots_pem,
                           clk->now() + timeout_s, false);
    if (!res.stream) {
      note(InterceptEvent::Kind::UpstreamRefused, host, res.error);
      return nullptr;
    }
    if (!res.verified) {
      note(InterceptEvent::Kind::UpstreamUnverified, host, res.verify_detail);
      if (!allow_unverified(host, res.verify_detail)) {
        note(InterceptEvent::Kind::UpstreamRefused, host, res.verify_detail);
        res.stream->close();
        return nullptr;
      }
      note(InterceptEvent::Kind::UpstreamAllowed, host);
    }
    return std::move(res.stream);
  };
}

std::vector<InterceptEvent> TlsInterceptor::events() const {
  std::lock_guard<std::mutex> g(mu_);
  return events_;
}

void TlsInterceptor::remember_allowed(const std::string& domain) {
  std::lock_guard<std::mutex> g(mu_);
  allowlist_.insert(to_lower(domain));
  save_allowlist_locked();
}

bool TlsInterceptor::is_allowed(const std::string& domain) const {
  std::lock_guard<std::mutex> g(mu_);
  return allowlist_.count(to_lower(domain)) > 0;
}

bool TlsInterceptor::allow_unverified(const std::string& domain,
                                      const std::string& reason) {
  switch (cfg_.on_unverified) {
    case TrustMode::Deny:
      return false;
    case TrustMode::Prompt:
      // Allow-once: an accepted prompt is not remembered.
      return cfg_.prompt ? cfg_.prompt(domain, reason) : false;
    case TrustMode::Allowlist:
      return is_allowed(domain);
  }
  return false;
}

bool TlsInterceptor::first_access(const std::string& domain) {
  std::lock_guard<std::mutex> g(mu_);
  return tunneled_.insert(domain).second;
}

void TlsInterceptor::note(InterceptEvent::Kind kind, const std::string& domain,
                          std::string detail) {
  std::lock_guard<std::mutex> g(mu_);
  events_.push_back({kind, domain, std::move(detail)});
}

void TlsInterceptor::save_allowlist_locked() {
  if (cfg_.allowlist_path.empty()) return;
  std::ofstream f(cfg_.allowlist_path, std::ios::trunc);
  for (const auto& d : allowlist_) f << d << "\n";
}

}  // namespace flowmig

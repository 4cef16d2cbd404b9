#pragma once

#include <condition_variable>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "flowmig/common.hpp"
#include "flowmig/stream.hpp"

typedef struct x509_st X509;
typedef struct evp_pkey_st EVP_PKEY;

namespace flowmig {

// Certificate plus private key, held parsed and as PEM.
struct CertKey {
  std::shared_ptr<X509> cert;
  std::shared_ptr<EVP_PKEY> key;
  std::string cert_pem;
  std::string key_pem;

  bool valid() const { return cert && key; }
};

// Self-signed signing root kept on disk. The root key never leaves the store
// directory; clients install cert_pem as a trust anchor.
struct LocalCa {
  CertKey root;
  std::string store_path;
};

// Loads the root from store_path (ca_cert.pem / ca_key.pem) or creates one.
// A half-written or unparsable store raises instead of regenerating: silently
// minting a fresh root would orphan every client that installed the old one.
LocalCa ensure_ca(const std::string& store_path);

struct IssuanceRecord {
  std::string domain;
  double elapsed_s = 0;  // wall-clock signing time
  bool cache_hit = false;
};

// Per-domain leaf certificates signed by the local root. Lookups are
// concurrent; the first request for a domain signs exactly once while later
// requests for it wait (single flight). With a directory, pairs persist as
// <domain>.crt.pem / <domain>.key.pem and survive restarts.
class LeafCertCache {
 public:
  explicit LeafCertCache(std::string dir = {});

  CertKey issue(const std::string& domain, const LocalCa& ca);

  size_t size() const;
  size_t issued() const;  // fresh signings, excluding cache/disk hits
  std::vector<IssuanceRecord> records() const;

 private:
  CertKey load_or_make(const std::string& domain, const LocalCa& ca,
                       bool& made);

  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, CertKey> cache_;
  std::set<std::string> in_flight_;
  std::vector<IssuanceRecord> records_;
  std::string dir_;
  size_t issued_ = 0;
};

CertKey issue_leaf(const std::string& domain, const LocalCa& ca,
                   LeafCertCache& cache);

// --- TLS over any Stream ---

struct TlsServerResult {
  std::unique_ptr<Stream> stream;  // null when the handshake failed
  std::optional<std::string> sni;
  std::string error;
};

// Server-side handshake. pick_cert runs once the client hello is seen (and
// once up front with nullopt for clients that send no SNI); returning nullopt
// aborts the handshake.
TlsServerResult tls_accept(
    std::unique_ptr<Stream> inner,
    const std::function<std::optional<CertKey>(const std::optional<std::string>& sni)>&
        pick_cert,
    std::optional<Seconds> deadline);

struct TlsClientResult {
  std::unique_ptr<Stream> stream;  // null when the handshake failed
  bool verified = false;  // chain anchored in roots_pem and hostname matched
  std::string verify_detail;  // human-readable verify outcome
  std::string error;
};

// Client-side handshake with SNI = host. The chain is always evaluated
// against roots_pem with hostname checking; with enforce=false a failed
// evaluation still yields a usable stream plus verified=false so the caller
// can apply policy, with enforce=true the handshake itself fails.
TlsClientResult tls_connect(std::unique_ptr<Stream> inner,
                            const std::string& host,
                            const std::vector<std::string>& roots_pem,
                            std::optional<Seconds> deadline,
                            bool enforce = false);

// Convenience server wrapper for harness origins: picks the same certificate
// for every connection.
std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)>
tls_server_wrapper(CertKey ck);

}  // namespace flowmig

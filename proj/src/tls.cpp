#include "flowmig/tls.hpp"

#include <openssl/bio.h>
#include <openssl/bn.h>
#include <openssl/err.h>
#include <openssl/evp.h>
#include <openssl/pem.h>
#include <openssl/rand.h>
#include <openssl/ssl.h>
#include <openssl/x509v3.h>

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace flowmig {

namespace {

namespace fs = std::filesystem;

std::string ssl_errors() {
  std::string out;
  unsigned long e;
  char buf[256];
  while ((e = ERR_get_error()) != 0) {
    ERR_error_string_n(e, buf, sizeof buf);
    if (!out.empty()) out += "; ";
    out += buf;
  }
  return out.empty() ? "unspecified TLS failure" : out;
}

std::shared_ptr<X509> own_cert(X509* c) {
  return std::shared_ptr<X509>(c, X509_free);
}
std::shared_ptr<EVP_PKEY> own_key(EVP_PKEY* k) {
  return std::shared_ptr<EVP_PKEY>(k, EVP_PKEY_free);
}

std::string cert_to_pem(X509* c) {
  BIO* b = BIO_new(BIO_s_mem());
  PEM_write_bio_X509(b, c);
  char* p = nullptr;
  long n = BIO_get_mem_data(b, &p);
  std::string out(p, (size_t)n);
  BIO_free(b);
  return out;
}

std::string key_to_pem(EVP_PKEY* k) {
  BIO* b = BIO_new(BIO_s_mem());
  PEM_write_bio_PrivateKey(b, k, nullptr, nullptr, 0, nullptr, nullptr);
  char* p = nullptr;
  long n = BIO_get_mem_data(b, &p);
  std::string out(p, (size_t)n);
  BIO_free(b);
  return out;
}

X509* pem_to_cert(const std::string& pem) {
  BIO* b = BIO_new_mem_buf(pem.data(), (int)pem.size());
  X509* c = PEM_read_bio_X509(b, nullptr, nullptr, nullptr);
  BIO_free(b);
  ERR_clear_error();
  return c;
}

EVP_PKEY* pem_to_key(const std::string& pem) {
  BIO* b = BIO_new_mem_buf(pem.data(), (int)pem.size());
  EVP_PKEY* k = PEM_read_bio_PrivateKey(b, nullptr, nullptr, nullptr);
  BIO_free(b);
  ERR_clear_error();
  return k;
}

std::shared_ptr<EVP_PKEY> gen_key() {
  EVP_PKEY* k = EVP_EC_gen("P-256");
  if (!k) throw Error("key generation failed: " + ssl_errors());
  return own_key(k);
}

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ConfigError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& data) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write " + p.string());
  f << data;
  f.flush();
  if (!f) throw ConfigError("short write to " + p.string());
}

CertKey make_cert(const std::string& cn, const std::string* san_dns,
                  std::shared_ptr<EVP_PKEY> key, X509* issuer_cert,
                  EVP_PKEY* issuer_key, long days) {
  X509* x = X509_new();
  if (!x) throw Error("X509_new failed");
  auto cert = own_cert(x);
  X509_set_version(x, 2);

  unsigned char sbytes[16];
  RAND_bytes(sbytes, sizeof sbytes);
  sbytes[0] &= 0x7f;  // positive serial
  BIGNUM* bn = BN_bin2bn(sbytes, sizeof sbytes, nullptr);
  BN_to_ASN1_INTEGER(bn, X509_get_serialNumber(x));
  BN_free(bn);

  X509_gmtime_adj(X509_getm_notBefore(x), -300);
  X509_gmtime_adj(X509_getm_notAfter(x), days * 86400L);

  X509_NAME* name = X509_get_subject_name(x);
  X509_NAME_add_entry_by_txt(name, "O", MBSTRING_ASC,
                             (const unsigned char*)"flowmig", -1, -1, 0);
  X509_NAME_add_entry_by_txt(name, "CN", MBSTRING_ASC,
                             (const unsigned char*)cn.c_str(), -1, -1, 0);
  const bool self_signed = issuer_cert == nullptr;
  X509_set_issuer_name(x, self_signed ? name : X509_get_subject_name(issuer_cert));
  X509_set_pubkey(x, key.get());

  X509V3_CTX ctx;
  X509V3_set_ctx_nodb(&ctx);
  X509V3_set_ctx(&ctx, self_signed ? x : issuer_cert, x, nullptr, nullptr, 0);
  auto add_ext = [&](int nid, const std::string& value) {
    X509_EXTENSION* ex = X509V3_EXT_conf_nid(nullptr, &ctx, nid, value.c_str());
    if (!ex) throw Error("bad certificate extension: " + value + ": " + ssl_errors());
    X509_add_ext(x, ex, -1);
    X509_EXTENSION_free(ex);
  };
  if (self_signed) {
    add_ext(NID_basic_constraints, "critical,CA:TRUE");
    add_ext(NID_key_usage, "critical,keyCertSign,cRLSign");
  } else {
    add_ext(NID_basic_constraints, "critical,CA:FALSE");
    add_ext(NID_key_usage, "critical,digitalSignature,keyEncipherment");
    add_ext(NID_ext_key_usage, "serverAuth");
    add_ext(NID_subject_alt_name, "DNS:" + *san_dns);
  }
  add_ext(NID_subject_key_identifier, "hash");
  if (!self_signed) add_ext(NID_authority_key_identifier, "keyid:always");

  if (!X509_sign(x, self_signed ? key.get() : issuer_key, EVP_sha256()))
    throw Error("certificate signing failed: " + ssl_errors());

  CertKey ck;
  ck.cert = cert;
  ck.key = std::move(key);
  ck.cert_pem = cert_to_pem(x);
  ck.key_pem = key_to_pem(ck.key.get());
  return ck;
}

void validate_hostname(const std::string& d) {
  auto bad = [&](const char* why) {
    throw ConfigError("invalid hostname '" + d + "': " + why);
  };
  if (d.empty()) bad("empty");
  if (d.size() > 253) bad("too long");
  size_t label = 0;
  for (size_t i = 0; i <= d.size(); ++i) {
    if (i == d.size() || d[i] == '.') {
      if (label == 0) bad("empty label");
      if (label > 63) bad("label too long");
      if (d[i - 1] == '-' || d[i - label] == '-') bad("label edge dash");
      label = 0;
    } else {
      char c = d[i];
      bool okc = (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '-';
      if (!okc) bad("bad character");
      ++label;
    }
  }
}

}  // namespace

LocalCa ensure_ca(const std::string& store_path) {
  fs::path dir(store_path);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create CA store " + store_path);
  const fs::path certp = dir / "ca_cert.pem";
  const fs::path keyp = dir / "ca_key.pem";
  const bool has_cert = fs::exists(certp);
  const bool has_key = fs::exists(keyp);
  if (has_cert != has_key)
    throw ConfigError("CA store " + store_path +
                      " is incomplete (need both ca_cert.pem and ca_key.pem); "
                      "refusing to regenerate an installed root");
  LocalCa ca;
  ca.store_path = store_path;
  if (has_cert) {
    std::string cpem = read_file(certp);
    std::string kpem = read_file(keyp);
    X509* c = pem_to_cert(cpem);
    EVP_PKEY* k = pem_to_key(kpem);
    if (!c || !k || X509_check_private_key(c, k) != 1) {
      if (c) X509_free(c);
      if (k) EVP_PKEY_free(k);
      throw ConfigError("CA store " + store_path +
                        " is unreadable or inconsistent; refusing to "
                        "regenerate an installed root");
    }
    ca.root.cert = own_cert(c);
    ca.root.key = own_key(k);
    ca.root.cert_pem = std::move(cpem);
    ca.root.key_pem = std::move(kpem);
    return ca;
  }
  ca.root = make_cert("flowmig local root", nullptr, gen_key(), nullptr,
                      nullptr, 3650);
  write_file(keyp, ca.root.key_pem);
  fs::permissions(keyp, fs::perms::owner_read | fs::perms::owner_write, ec);
  write_file(certp, ca.root.cert_pem);
  return ca;
}

LeafCertCache::LeafCertCache(std::string dir) : dir_(std::move(dir)) {
  if (!dir_.empty()) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw ConfigError("cannot create leaf cache directory " + dir_);
  }
}

CertKey LeafCertCache::issue(const std::string& raw_domain, const LocalCa& ca) {
  std::string domain = to_lower(raw_domain);
  validate_hostname(domain);

  std::unique_lock<std::mutex> lk(mu_);
  for (;;) {
    auto it = cache_.find(domain);
    if (it != cache_.end()) {
      records_.push_back({domain, 0.0, true});
      return it->second;
    }
    if (!in_flight_.count(domain)) break;
    cv_.wait(lk);
  }
  in_flight_.insert(domain);
  lk.unlock();

  auto t0 = std::chrono::steady_clock::now();
  CertKey ck;
  bool made = false;
  std::exception_ptr ep;
  try {
    ck = load_or_make(domain, ca, made);
  } catch (...) {
    ep = std::current_exception();
  }
  double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();

  lk.lock();
  in_flight_.erase(domain);
  cv_.notify_all();
  if (ep) std::rethrow_exception(ep);
  if (made) ++issued_;
  cache_[domain] = ck;
  records_.push_back({domain, elapsed, !made});
  return ck;
}

CertKey LeafCertCache::load_or_make(const std::string& domain,
                                    const LocalCa& ca, bool& made) {
  made = false;
  if (!dir_.empty()) {
    fs::path cp = fs::path(dir_) / (domain + ".crt.pem");
    fs::path kp = fs::path(dir_) / (domain + ".key.pem");
    if (fs::exists(cp) && fs::exists(kp)) {
      std::string cpem = read_file(cp);
      std::string kpem = read_file(kp);
      X509* c = pem_to_cert(cpem);
      EVP_PKEY* k = pem_to_key(kpem);
      if (c && k && X509_check_private_key(c, k) == 1) {
        CertKey ck;
        ck.cert = own_cert(c);
        ck.key = own_key(k);
        ck.cert_pem = std::move(cpem);
        ck.key_pem = std::move(kpem);
        return ck;
      }
      // A stale leaf pair is not a trust anchor; re-sign it.
      if (c) X509_free(c);
      if (k) EVP_PKEY_free(k);
    }
  }
  CertKey ck = make_cert(domain, &domain, gen_key(), ca.root.cert.get(),
                         ca.root.key.get(), 90);
  made = true;
  if (!dir_.empty()) {
    write_file(fs::path(dir_) / (domain + ".key.pem"), ck.key_pem);
    write_file(fs::path(dir_) / (domain + ".crt.pem"), ck.cert_pem);
  }
  return ck;
}

size_t LeafCertCache::size() const {
  std::lock_guard<std::mutex> g(mu_);
  return cache_.size();
}

size_t LeafCertCache::issued() const {
  std::lock_guard<std::mutex> g(mu_);
  return issued_;
}

std::vector<IssuanceRecord> LeafCertCache::records() const {
  std::lock_guard<std::mutex> g(mu_);
  return records_;
}

CertKey issue_leaf(const std::string& domain, const LocalCa& ca,
                   LeafCertCache& cache) {
  return cache.issue(domain, ca);
}

// --- TLS stream over an inner Stream via memory BIOs ---

namespace {

class TlsStream : public Stream {
 public:
  TlsStream(std::unique_ptr<Stream> inner, SSL* ssl, BIO* rbio, BIO* wbio)
      : inner_(std::move(inner)), ssl_(ssl), rbio_(rbio), wbio_(wbio) {}

  ~TlsStream() override {
    if (!closed_) {
      SSL_shutdown(ssl_);
      flush();
      inner_->close();
    }
    SSL_free(ssl_);
    ERR_clear_error();
  }

  ReadResult read(char* buf, size_t max, std::optional<Seconds> deadline) override {
    if (max == 0) return {0, StreamStatus::Ok};
    for (;;) {
      size_t n = 0;
      int ok = SSL_read_ex(ssl_, buf, max, &n);
      flush();
      if (ok == 1) return {n, StreamStatus::Ok};
      int err = SSL_get_error(ssl_, ok);
      if (err == SSL_ERROR_ZERO_RETURN) return {0, StreamStatus::Eof};
      if (err != SSL_ERROR_WANT_READ && err != SSL_ERROR_WANT_WRITE) {
        ERR_clear_error();
        return {0, StreamStatus::Error};
      }
      if (err == SSL_ERROR_WANT_READ) {
        auto st = fill(deadline);
        if (st == StreamStatus::Timeout) return {0, StreamStatus::Timeout};
        if (st != StreamStatus::Ok) return {0, StreamStatus::Error};
      }
    }
  }

  bool write(const char* data, size_t len) override {
    size_t off = 0;
    while (off < len) {
      size_t n = 0;
      int ok = SSL_write_ex(ssl_, data + off, len - off, &n);
      if (ok == 1) {
        off += n;
        if (flush() != StreamStatus::Ok) return false;
        continue;
      }
      int err = SSL_get_error(ssl_, ok);
      if (err == SSL_ERROR_WANT_WRITE) {
        if (flush() != StreamStatus::Ok) return false;
        continue;
      }
      if (err == SSL_ERROR_WANT_READ) {
        if (fill(std::nullopt) != StreamStatus::Ok) return false;
        continue;
      }
      ERR_clear_error();
      return false;
    }
    return true;
  }

  StreamStatus wait_readable(std::optional<Seconds> deadline) override {
    for (;;) {
      if (SSL_pending(ssl_) > 0) return StreamStatus::Ok;
      char c;
      size_t n = 0;
      int ok = SSL_peek_ex(ssl_, &c, 1, &n);
      flush();
      if (ok == 1) return StreamStatus::Ok;
      int err = SSL_get_error(ssl_, ok);
      if (err == SSL_ERROR_ZERO_RETURN) return StreamStatus::Eof;
      if (err != SSL_ERROR_WANT_READ) {
        ERR_clear_error();
        return StreamStatus::Error;
      }
      auto st = fill(deadline);
      if (st == StreamStatus::Timeout) return StreamStatus::Timeout;
      if (st != StreamStatus::Ok) return StreamStatus::Error;
    }
  }

  void close() override {
    if (closed_) return;
    closed_ = true;
    SSL_shutdown(ssl_);  // one-way close_notify; no wait for the peer's
    flush();
    ERR_clear_error();
    inner_->close();
  }

  // Safe from another thread while the owner is blocked: touches only the
  // inner stream, never the SSL state.
  void kill() override { inner_->kill(); }

  std::string peer_label() const override { return inner_->peer_label(); }

  std::string do_handshake(std::optional<Seconds> deadline) {
    for (;;) {
      int ok = SSL_do_handshake(ssl_);
      bool sent = flush() == StreamStatus::Ok;
      if (ok == 1) return sent ? std::string() : "peer gone at handshake end";
      int err = SSL_get_error(ssl_, ok);
      if (err == SSL_ERROR_WANT_READ) {
        auto st = fill(deadline);
        if (st == StreamStatus::Timeout) return "handshake timed out";
        if (st != StreamStatus::Ok) return "connection lost during handshake";
        continue;
      }
      if (err == SSL_ERROR_WANT_WRITE) continue;
      return ssl_errors();
    }
  }

 private:
  StreamStatus flush() {
    char buf[4096];
    int n;
    while ((n = BIO_read(wbio_, buf, sizeof buf)) > 0)
      if (!inner_->write(buf, (size_t)n)) return StreamStatus::Error;
    return StreamStatus::Ok;
  }

  StreamStatus fill(std::optional<Seconds> deadline) {
    char buf[4096];
    auto rr = inner_->read(buf, sizeof buf, deadline);
    if (rr.status == StreamStatus::Ok && rr.n > 0) {
      BIO_write(rbio_, buf, (int)rr.n);
      return StreamStatus::Ok;
    }
    if (rr.status == StreamStatus::Ok) return StreamStatus::Error;
    return rr.status;
  }

  std::unique_ptr<Stream> inner_;
  SSL* ssl_;
  BIO* rbio_;
  BIO* wbio_;
  bool closed_ = false;
};

struct PickState {
  const std::function<std::optional<CertKey>(const std::optional<std::string>&)>*
      pick = nullptr;
  std::optional<std::string> sni;
  CertKey held;
  bool pick_failed = false;
};

int servername_cb(SSL* s, int* al, void* arg) {
  auto* ps = static_cast<PickState*>(arg);
  const char* name = SSL_get_servername(s, TLSEXT_NAMETYPE_host_name);
  if (name && *name) ps->sni = std::string(name);
  auto ck = (*ps->pick)(ps->sni);
  if (!ck || !ck->valid()) {
    ps->pick_failed = true;
    *al = SSL_AD_HANDSHAKE_FAILURE;
    return SSL_TLSEXT_ERR_ALERT_FATAL;
  }
  ps->held = *ck;
  if (SSL_use_certificate(s, ps->held.cert.get()) != 1 ||
      SSL_use_PrivateKey(s, ps->held.key.get()) != 1) {
    ps->pick_failed = true;
    *al = SSL_AD_INTERNAL_ERROR;
    return SSL_TLSEXT_ERR_ALERT_FATAL;
  }
  return SSL_TLSEXT_ERR_OK;
}

}  // namespace

TlsServerResult tls_accept(
    std::unique_ptr<Stream> inner,
    const std::function<std::optional<CertKey>(const std::optional<std::string>&)>&
        pick_cert,
    std::optional<Seconds> deadline) {
  TlsServerResult out;
  SSL_CTX* ctx = SSL_CTX_new(TLS_server_method());
  if (!ctx) {
    out.error = ssl_errors();
    return out;
  }
  SSL_CTX_set_min_proto_version(ctx, TLS1_2_VERSION);
  PickState ps;
  ps.pick = &pick_cert;
  SSL_CTX_set_tlsext_servername_callback(ctx, servername_cb);
  SSL_CTX_set_tlsext_servername_arg(ctx, &ps);

  SSL* ssl = SSL_new(ctx);
  SSL_CTX_free(ctx);  // ssl keeps its own reference
  if (!ssl) {
    out.error = ssl_errors();
    return out;
  }
  // Default certificate covers clients that send no SNI at all.
  CertKey fallback;
  if (auto def = pick_cert(std::nullopt); def && def->valid()) {
    fallback = *def;
    SSL_use_certificate(ssl, fallback.cert.get());
    SSL_use_PrivateKey(ssl, fallback.key.get());
  }
  BIO* rbio = BIO_new(BIO_s_mem());
  BIO* wbio = BIO_new(BIO_s_mem());
  SSL_set_bio(ssl, rbio, wbio);
  SSL_set_accept_state(ssl);

  auto ts = std::make_unique<TlsStream>(std::move(inner), ssl, rbio, wbio);
  std::string err = ts->do_handshake(deadline);
  out.sni = ps.sni;
  if (!err.empty()) {
    out.error = ps.pick_failed ? "certificate issuance refused" : err;
    return out;
  }
  out.stream = std::move(ts);
  return out;
}

TlsClientResult tls_connect(std::unique_ptr<Stream> inner,
                            const std::string& host,
                            const std::vector<std::string>& roots_pem,
                            std::optional<Seconds> deadline, bool enforce) {
  TlsClientResult out;
  SSL_CTX* ctx = SSL_CTX_new(TLS_client_method());
  if (!ctx) {
    out.error = ssl_errors();
    return out;
  }
  SSL_CTX_set_min_proto_version(ctx, TLS1_2_VERSION);
  X509_STORE* store = SSL_CTX_get_cert_store(ctx);
  for (const auto& pem : roots_pem) {
    X509* r = pem_to_cert(pem);
    if (!r) {
      SSL_CTX_free(ctx);
      out.error = "unparsable trust root PEM";
      return out;
    }
    X509_STORE_add_cert(store, r);
    X509_free(r);
  }
  SSL* ssl = SSL_new(ctx);
  SSL_CTX_free(ctx);
  if (!ssl) {
    out.error = ssl_errors();
    return out;
  }
  SSL_set_tlsext_host_name(ssl, host.c_str());
  X509_VERIFY_PARAM* vp = SSL_get0_param(ssl);
  X509_VERIFY_PARAM_set1_host(vp, host.c_str(), host.size());
  // The chain is evaluated either way; enforce only decides whether a bad
  // result aborts the handshake or is reported for the caller's policy.
  SSL_set_verify(ssl, enforce ? SSL_VERIFY_PEER : SSL_VERIFY_NONE, nullptr);
  BIO* rbio = BIO_new(BIO_s_mem());
  BIO* wbio = BIO_new(BIO_s_mem());
  SSL_set_bio(ssl, rbio, wbio);
  SSL_set_connect_state(ssl);

  auto ts = std::make_unique<TlsStream>(std::move(inner), ssl, rbio, wbio);
  std::string err = ts->do_handshake(deadline);
  if (!err.empty()) {
    out.error = err;
    return out;
  }
  long vr = SSL_get_verify_result(ssl);
  X509* peer = SSL_get1_peer_certificate(ssl);
  out.verified = (vr == X509_V_OK) && peer != nullptr;
  out.verify_detail =
      peer ? X509_verify_cert_error_string(vr) : "no peer certificate";
  if (peer) X509_free(peer);
  out.stream = std::move(ts);
  return out;
}

std::function<std::unique_ptr<Stream>(std::unique_ptr<Stream>)>
tls_server_wrapper(CertKey ck) {
  return [ck](std::unique_ptr<Stream> s) -> std::unique_ptr<Stream> {
    auto r = tls_accept(
        std::move(s),
        [&ck](const std::optional<std::string>&) -> std::optional<CertKey> {
          return ck;
        },
        std::nullopt);
    return std::move(r.stream);
  };
}

}  // namespace flowmig

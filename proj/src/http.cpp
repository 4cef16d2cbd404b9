#include "flowmig/http.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>

namespace flowmig {

std::optional<std::string> HeaderMap::get(std::string_view name) const {
  for (auto& [k, v] : items)
    if (iequals(k, name)) return v;
  return std::nullopt;
}

std::vector<std::string> HeaderMap::get_all(std::string_view name) const {
  std::vector<std::string> out;
  for (auto& [k, v] : items)
    if (iequals(k, name)) out.push_back(v);
  return out;
}

void HeaderMap::add(std::string name, std::string value) {
  items.emplace_back(std::move(name), std::move(value));
}

void HeaderMap::set(std::string_view name, std::string value) {
  remove(name);
  items.emplace_back(std::string(name), std::move(value));
}

void HeaderMap::remove(std::string_view name) {
  items.erase(std::remove_if(items.begin(), items.end(),
                             [&](auto& kv) { return iequals(kv.first, name); }),
              items.end());
}

bool HeaderMap::has_token(std::string_view name, std::string_view token) const {
  for (auto& [k, v] : items) {
    if (!iequals(k, name)) continue;
    std::string_view rest = v;
    while (!rest.empty()) {
      size_t comma = rest.find(',');
      std::string_view part = trim(rest.substr(0, comma));
      // Parameters after ';' are not part of the token.
      size_t semi = part.find(';');
      if (semi != std::string_view::npos) part = trim(part.substr(0, semi));
      if (iequals(part, token)) return true;
      if (comma == std::string_view::npos) break;
      rest = rest.substr(comma + 1);
    }
  }
  return false;
}

std::string RequestHead::serialize() const {
  std::string out = method + " " + target + " " + version + "\r\n";
  for (auto& [k, v] : headers.items) out += k + ": " + v + "\r\n";
  out += "\r\n";
  return out;
}

std::string ResponseHead::serialize() const {
  std::string out = version + " " + std::to_string(status) + " " + reason + "\r\n";
  for (auto& [k, v] : headers.items) out += k + ": " + v + "\r\n";
  out += "\r\n";
  return out;
}

std::optional<uint64_t> ResponseHead::content_length() const {
  auto v = headers.get("Content-Length");
  if (!v) return std::nullopt;
  std::string_view s = trim(*v);
  if (s.empty()) return std::nullopt;
  uint64_t n = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
    n = n * 10 + static_cast<uint64_t>(c - '0');
  }
  return n;
}

bool ResponseHead::chunked() const {
  return headers.has_token("Transfer-Encoding", "chunked");
}

bool ResponseHead::accept_ranges() const {
  return headers.has_token("Accept-Ranges", "bytes");
}

bool ResponseHead::no_cache_response() const {
  return headers.has_token("Cache-Control", "no-cache");
}

ReadResult BufferedReader::read_some(char* dst, size_t max,
                                     std::optional<Seconds> deadline) {
  if (max == 0) return {0, StreamStatus::Ok};
  if (pos_ < buf_.size()) {
    size_t n = std::min(max, buf_.size() - pos_);
    std::copy_n(buf_.data() + pos_, n, dst);
    pos_ += n;
    if (pos_ == buf_.size()) {
      buf_.clear();
      pos_ = 0;
    }
    return {n, StreamStatus::Ok};
  }
  return s_.read(dst, max, deadline);
}

StreamStatus BufferedReader::fill(std::optional<Seconds> deadline) {
  char tmp[4096];
  auto r = s_.read(tmp, sizeof(tmp), deadline);
  if (r.status != StreamStatus::Ok) return r.status;
  buf_.append(tmp, r.n);
  return StreamStatus::Ok;
}

StreamStatus BufferedReader::read_line(std::string& out,
                                       std::optional<Seconds> deadline,
                                       size_t max_len) {
  out.clear();
  for (;;) {
    size_t nl = buf_.find('\n', pos_);
    if (nl != std::string::npos) {
      out.assign(buf_, pos_, nl - pos_);
      pos_ = nl + 1;
      if (pos_ == buf_.size()) {
        buf_.clear();
        pos_ = 0;
      }
      if (!out.empty() && out.back() == '\r') out.pop_back();
      return StreamStatus::Ok;
    }
    if (buf_.size() - pos_ > max_len) return StreamStatus::Error;
    auto st = fill(deadline);
    if (st != StreamStatus::Ok) return st;
  }
}

StreamStatus BufferedReader::read_exact(char* dst, size_t n,
                                        std::optional<Seconds> deadline) {
  size_t off = 0;
  while (off < n) {
    auto r = read_some(dst + off, n - off, deadline);
    if (r.status != StreamStatus::Ok)
      return r.status == StreamStatus::Eof ? StreamStatus::Error : r.status;
    off += r.n;
  }
  return StreamStatus::Ok;
}

namespace {

HeadResult from_status(StreamStatus st) {
  switch (st) {
    case StreamStatus::Eof: return HeadResult::Eof;
    case StreamStatus::Timeout: return HeadResult::Timeout;
    default: return HeadResult::Error;
  }
}

bool parse_headers(BufferedReader& r, HeaderMap& out,
                   std::optional<Seconds> deadline, HeadResult& err) {
  std::string line;
  for (int i = 0; i < 500; ++i) {
    auto st = r.read_line(line, deadline);
    if (st != StreamStatus::Ok) {
      err = from_status(st);
      return false;
    }
    if (line.empty()) return true;
    size_t colon = line.find(':');
    if (colon == std::string::npos || colon == 0) {
      err = HeadResult::Malformed;
      return false;
    }
    std::string name = line.substr(0, colon);
    if (!trim(name).size() || trim(name).size() != name.size()) {
      err = HeadResult::Malformed;
      return false;
    }
    out.add(std::move(name), std::string(trim(std::string_view(line).substr(colon + 1))));
  }
  err = HeadResult::Malformed;  // header section absurdly long
  return false;
}

}  // namespace

HeadResult read_request_head(BufferedReader& r, RequestHead& out,
                             std::optional<Seconds> deadline) {
  std::string line;
  auto st = r.read_line(line, deadline);
  if (st != StreamStatus::Ok) return from_status(st);
  if (line.empty()) {
    // Tolerate one stray blank line before the request line.
    st = r.read_line(line, deadline);
    if (st != StreamStatus::Ok) return from_status(st);
  }
  size_t sp1 = line.find(' ');
  size_t sp2 = line.rfind(' ');
  if (sp1 == std::string::npos || sp2 == sp1) return HeadResult::Malformed;
  out.method = line.substr(0, sp1);
  out.target = line.substr(sp1 + 1, sp2 - sp1 - 1);
  out.version = line.substr(sp2 + 1);
  if (out.method.empty() || out.target.empty()) return HeadResult::Malformed;
  if (out.version != "HTTP/1.0" && out.version != "HTTP/1.1")
    return HeadResult::Malformed;
  HeadResult err = HeadResult::Ok;
  out.headers.items.clear();
  if (!parse_headers(r, out.headers, deadline, err)) return err;
  return HeadResult::Ok;
}

HeadResult read_response_head(BufferedReader& r, ResponseHead& out,
                              std::optional<Seconds> deadline) {
  std::string line;
  auto st = r.read_line(line, deadline);
  if (st != StreamStatus::Ok) return from_status(st);
  if (line.rfind("HTTP/", 0) != 0) return HeadResult::Malformed;
  size_t sp1 = line.find(' ');
  if (sp1 == std::string::npos) return HeadResult::Malformed;
  out.version = line.substr(0, sp1);
  size_t sp2 = line.find(' ', sp1 + 1);
  std::string code = sp2 == std::string::npos ? line.substr(sp1 + 1)
                                              : line.substr(sp1 + 1, sp2 - sp1 - 1);
  if (code.size() != 3 || !std::isdigit((unsigned char)code[0]) ||
      !std::isdigit((unsigned char)code[1]) || !std::isdigit((unsigned char)code[2]))
    return HeadResult::Malformed;
  out.status = std::atoi(code.c_str());
  out.reason = sp2 == std::string::npos ? "" : line.substr(sp2 + 1);
  HeadResult err = HeadResult::Ok;
  out.headers.items.clear();
  if (!parse_headers(r, out.headers, deadline, err)) return err;
  return HeadResult::Ok;
}

ReadResult ChunkedBodyReader::read(char* dst, size_t max,
                                   std::optional<Seconds> deadline) {
  if (done_) return {0, StreamStatus::Eof};
  std::string line;
  if (remaining_ == 0) {
    if (started_) {
      // Consume the CRLF terminating the previous chunk's data.
      auto st = r_.read_line(line, deadline);
      if (st != StreamStatus::Ok) return {0, st};
    }
    auto st = r_.read_line(line, deadline);
    if (st != StreamStatus::Ok) return {0, st};
    size_t semi = line.find(';');
    std::string hex = semi == std::string::npos ? line : line.substr(0, semi);
    char* end = nullptr;
    unsigned long long v = std::strtoull(hex.c_str(), &end, 16);
    if (end == hex.c_str()) return {0, StreamStatus::Error};
    started_ = true;
    if (v == 0) {
      // Trailers until the blank line.
      for (;;) {
        auto st2 = r_.read_line(line, deadline);
        if (st2 != StreamStatus::Ok) return {0, st2};
        if (line.empty()) break;
      }
      done_ = true;
      return {0, StreamStatus::Eof};
    }
    remaining_ = v;
  }
  size_t want = static_cast<size_t>(std::min<uint64_t>(remaining_, max));
  auto r = r_.read_some(dst, want, deadline);
  if (r.status != StreamStatus::Ok)
    return {0, r.status == StreamStatus::Eof ? StreamStatus::Error : r.status};
  remaining_ -= r.n;
  return r;
}

std::optional<Url> parse_absolute_url(std::string_view target) {
  Url u;
  size_t scheme_end = target.find("://");
  if (scheme_end == std::string_view::npos) return std::nullopt;
  u.scheme = to_lower(target.substr(0, scheme_end));
  if (u.scheme != "http" && u.scheme != "https") return std::nullopt;
  u.port = u.scheme == "https" ? 443 : 80;
  std::string_view rest = target.substr(scheme_end + 3);
  size_t slash = rest.find('/');
  std::string_view hostport = slash == std::string_view::npos ? rest : rest.substr(0, slash);
  u.path = slash == std::string_view::npos ? "/" : std::string(rest.substr(slash));
  if (hostport.empty()) return std::nullopt;
  size_t colon = hostport.rfind(':');
  if (colon != std::string_view::npos && colon + 1 < hostport.size() &&
      hostport.find(':') == colon) {
    u.host = std::string(hostport.substr(0, colon));
    int port = 0;
    for (char c : hostport.substr(colon + 1)) {
      if (c < '0' || c > '9') return std::nullopt;
      port = port * 10 + (c - '0');
      if (port > 65535) return std::nullopt;
    }
    u.port = port;
  } else {
    u.host = std::string(hostport);
  }
  if (u.host.empty()) return std::nullopt;
  return u;
}

std::optional<std::pair<std::string, int>> parse_authority(std::string_view s) {
  size_t colon = s.rfind(':');
  if (colon == std::string_view::npos || colon == 0 || colon + 1 >= s.size())
    return std::nullopt;
  int port = 0;
  for (char c : s.substr(colon + 1)) {
    if (c < '0' || c > '9') return std::nullopt;
    port = port * 10 + (c - '0');
    if (port > 65535) return std::nullopt;
  }
  return std::make_pair(std::string(s.substr(0, colon)), port);
}

std::optional<uint64_t> parse_single_open_range(std::string_view value) {
  std::string_view s = trim(value);
  if (!s.starts_with("bytes=")) return std::nullopt;
  s = s.substr(6);
  if (s.empty() || s.back() != '-') return std::nullopt;
  s = s.substr(0, s.size() - 1);
  if (s.empty()) return std::nullopt;  // suffix range "bytes=-N"
  uint64_t n = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
    n = n * 10 + static_cast<uint64_t>(c - '0');
  }
  return n;
}

std::optional<ContentRange> parse_content_range(std::string_view value) {
  std::string_view s = trim(value);
  if (!s.starts_with("bytes ")) return std::nullopt;
  s = s.substr(6);
  size_t dash = s.find('-');
  size_t slash = s.find('/');
  if (dash == std::string_view::npos || slash == std::string_view::npos ||
      dash > slash)
    return std::nullopt;
  auto num = [](std::string_view t) -> std::optional<uint64_t> {
    if (t.empty()) return std::nullopt;
    uint64_t n = 0;
    for (char c : t) {
      if (c < '0' || c > '9') return std::nullopt;
      n = n * 10 + static_cast<uint64_t>(c - '0');
    }
    return n;
  };
  ContentRange cr;
  auto first = num(s.substr(0, dash));
  auto last = num(s.substr(dash + 1, slash - dash - 1));
  if (!first || !last) return std::nullopt;
  cr.first = *first;
  cr.last = *last;
  std::string_view tot = s.substr(slash + 1);
  if (tot != "*") {
    auto t = num(tot);
    if (!t) return std::nullopt;
    cr.total = *t;
  }
  return cr;
}

bool is_hop_by_hop(std::string_view name) {
  static const char* kNames[] = {"Connection",        "Proxy-Connection",
                                 "Keep-Alive",        "TE",
                                 "Trailer",           "Transfer-Encoding",
                                 "Upgrade",           "Proxy-Authenticate",
                                 "Proxy-Authorization"};
  for (auto* n : kNames)
    if (iequals(name, n)) return true;
  return false;
}

}  // namespace flowmig

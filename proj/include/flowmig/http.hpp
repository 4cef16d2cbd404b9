#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "flowmig/stream.hpp"

namespace flowmig {

// Ordered multimap preserving original casing and order for forwarding;
// lookups are case-insensitive.
struct HeaderMap {
  std::vector<std::pair<std::string, std::string>> items;

  std::optional<std::string> get(std::string_view name) const;
  std::vector<std::string> get_all(std::string_view name) const;
  bool has(std::string_view name) const { return get(name).has_value(); }
  void add(std::string name, std::string value);
  void set(std::string_view name, std::string value);
  void remove(std::string_view name);
  // True if any header of this name contains the token in its comma list.
  bool has_token(std::string_view name, std::string_view token) const;
};

struct RequestHead {
  std::string method;
  std::string target;
  std::string version = "HTTP/1.1";
  HeaderMap headers;

  std::string serialize() const;
  bool is_http10() const { return version == "HTTP/1.0"; }
};

struct ResponseHead {
  std::string version = "HTTP/1.1";
  int status = 0;
  std::string reason;
  HeaderMap headers;

  std::string serialize() const;
  std::optional<uint64_t> content_length() const;
  bool chunked() const;
  bool accept_ranges() const;
  bool no_cache_response() const;  // Cache-Control: no-cache
};

enum class HeadResult { Ok, Eof, Timeout, Error, Malformed };

// Line/byte reader with lookahead over a Stream.
class BufferedReader {
 public:
  explicit BufferedReader(Stream& s) : s_(s) {}

  ReadResult read_some(char* dst, size_t max, std::optional<Seconds> deadline);
  StreamStatus read_line(std::string& out, std::optional<Seconds> deadline,
                         size_t max_len = 64 * 1024);
  StreamStatus read_exact(char* dst, size_t n, std::optional<Seconds> deadline);
  size_t buffered() const { return buf_.size() - pos_; }
  Stream& stream() { return s_; }

 private:
  StreamStatus fill(std::optional<Seconds> deadline);

  Stream& s_;
  std::string buf_;
  size_t pos_ = 0;
};

HeadResult read_request_head(BufferedReader& r, RequestHead& out,
                             std::optional<Seconds> deadline);
HeadResult read_response_head(BufferedReader& r, ResponseHead& out,
                              std::optional<Seconds> deadline);

// Decodes a chunked transfer coding into the logical byte sequence.
class ChunkedBodyReader {
 public:
  explicit ChunkedBodyReader(BufferedReader& r) : r_(r) {}
  // Eof after the terminal chunk and trailers are consumed.
  ReadResult read(char* dst, size_t max, std::optional<Seconds> deadline);

 private:
  BufferedReader& r_;
  uint64_t remaining_ = 0;
  bool started_ = false;
  bool done_ = false;
};

struct Url {
  std::string scheme;
  std::string host;
  int port = 0;
  std::string path = "/";
};

std::optional<Url> parse_absolute_url(std::string_view target);
// "host:port" (CONNECT authority); port required.
std::optional<std::pair<std::string, int>> parse_authority(std::string_view s);

// "bytes=N-" → N. Closed or multi ranges return nullopt.
std::optional<uint64_t> parse_single_open_range(std::string_view value);

struct ContentRange {
  uint64_t first = 0;
  uint64_t last = 0;
  std::optional<uint64_t> total;
};
std::optional<ContentRange> parse_content_range(std::string_view value);

bool is_hop_by_hop(std::string_view name);

}  // namespace flowmig

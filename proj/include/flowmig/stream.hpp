#pragma once

#include <memory>
#include <optional>
#include <string>

#include "flowmig/common.hpp"

namespace flowmig {

enum class StreamStatus { Ok, Eof, Timeout, Error };

struct ReadResult {
  size_t n = 0;
  StreamStatus status = StreamStatus::Ok;
};

// Bidirectional byte stream. Implementations: TcpStream (kernel sockets),
// ChannelStream (in-memory harness links), TlsStream (TLS over either).
// Deadlines are absolute times on the stream's clock domain; nullopt blocks
// until data or close.
class Stream {
 public:
  virtual ~Stream() = default;

  virtual ReadResult read(char* buf, size_t max, std::optional<Seconds> deadline) = 0;
  // Writes the whole buffer or reports failure.
  virtual bool write(const char* data, size_t len) = 0;
  // Blocks until a byte could be read without consuming it.
  virtual StreamStatus wait_readable(std::optional<Seconds> deadline) = 0;
  virtual void close() = 0;
  // Abortive severing, safe to call from another thread while the owner is
  // blocked in read/write; pending data is discarded.
  virtual void kill() { close(); }
  virtual std::string peer_label() const { return {}; }

  bool write(std::string_view s) { return write(s.data(), s.size()); }
};

// Reports whether the stream delivers a byte before idle_limit elapses.
// Timeout means no data arrived for idle_limit consecutive seconds.
StreamStatus detect_timeout(Stream& s, Seconds idle_limit, const class Clock& clock);

class Listener {
 public:
  virtual ~Listener() = default;
  // Blocks until a connection arrives or the listener is closed (nullptr).
  virtual std::unique_ptr<Stream> accept() = 0;
  virtual void close() = 0;
  virtual int port() const = 0;
};

// Capability to open client connections; the flow manager hands out one bound
// to the current primary path.
class Connector {
 public:
  virtual ~Connector() = default;
  // timeout is relative; connection attempts on dead links fail fast.
  virtual std::unique_ptr<Stream> connect(const std::string& host, int port,
                                          std::optional<Seconds> timeout) = 0;
  virtual std::string path_id() const { return "direct"; }
};

// --- kernel TCP implementations ---

class TcpStream : public Stream {
 public:
  explicit TcpStream(int fd, std::string peer = {});
  ~TcpStream() override;
  TcpStream(const TcpStream&) = delete;
  TcpStream& operator=(const TcpStream&) = delete;

  ReadResult read(char* buf, size_t max, std::optional<Seconds> deadline) override;
  bool write(const char* data, size_t len) override;
  StreamStatus wait_readable(std::optional<Seconds> deadline) override;
  void close() override;
  std::string peer_label() const override { return peer_; }
  int fd() const { return fd_; }
  // Abortive: shuts both directions down but leaves the fd for the owner to
  // close, so it is safe while another thread is blocked on the stream.
  void kill() override;

 private:
  int fd_;
  std::string peer_;
};

std::unique_ptr<Stream> tcp_connect(const std::string& host, int port,
                                    std::optional<Seconds> timeout_s);

class TcpListener : public Listener {
 public:
  // port 0 picks a free port.
  explicit TcpListener(int port, const std::string& bind_addr = "127.0.0.1");
  ~TcpListener() override;

  std::unique_ptr<Stream> accept() override;
  void close() override;
  int port() const override { return port_; }

 private:
  int fd_;
  int port_;
};

class DirectTcpConnector : public Connector {
 public:
  explicit DirectTcpConnector(std::optional<Seconds> connect_timeout = 10.0)
      : timeout_(connect_timeout) {}
  std::unique_ptr<Stream> connect(const std::string& host, int port,
                                  std::optional<Seconds>) override {
    return tcp_connect(host, port, timeout_);
  }

 private:
  std::optional<Seconds> timeout_;
};

}  // namespace flowmig

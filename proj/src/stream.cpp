#include "flowmig/stream.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "flowmig/clock.hpp"
#include "flowmig/paths.hpp"

namespace flowmig {

std::string to_string(PathKind k) {
  switch (k) {
    case PathKind::Wifi: return "wifi";
    case PathKind::Cellular: return "cellular";
    case PathKind::Simulated: return "sim";
  }
  return "?";
}

std::string to_string(PathState s) {
  switch (s) {
    case PathState::Up: return "up";
    case PathState::Down: return "down";
    case PathState::Disabled: return "disabled";
  }
  return "?";
}

namespace {

void set_nonblocking(int fd, bool on) {
  int flags = fcntl(fd, F_GETFL, 0);
  if (flags < 0) return;
  if (on)
    fcntl(fd, F_SETFL, flags | O_NONBLOCK);
  else
    fcntl(fd, F_SETFL, flags & ~O_NONBLOCK);
}

// Returns poll() result semantics; -1 with errno != EINTR is an error.
int poll_one(int fd, short events, int timeout_ms) {
  pollfd p{fd, events, 0};
  for (;;) {
    int r = ::poll(&p, 1, timeout_ms);
    if (r < 0 && errno == EINTR) continue;
    return r;
  }
}

RealClock g_wall;

int remaining_ms(std::optional<Seconds> deadline) {
  if (!deadline) return -1;
  double left = *deadline - g_wall.now();
  if (left <= 0) return 0;
  if (left > 3600) left = 3600;
  return static_cast<int>(left * 1000) + 1;
}

}  // namespace

TcpStream::TcpStream(int fd, std::string peer) : fd_(fd), peer_(std::move(peer)) {
  int one = 1;
  setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

TcpStream::~TcpStream() { close(); }

ReadResult TcpStream::read(char* buf, size_t max, std::optional<Seconds> deadline) {
  if (fd_ < 0) return {0, StreamStatus::Error};
  for (;;) {
    int r = poll_one(fd_, POLLIN, remaining_ms(deadline));
    if (r == 0) return {0, StreamStatus::Timeout};
    if (r < 0) return {0, StreamStatus::Error};
    ssize_t n = ::recv(fd_, buf, max, 0);
    if (n > 0) return {static_cast<size_t>(n), StreamStatus::Ok};
    if (n == 0) return {0, StreamStatus::Eof};
    if (errno == EINTR || errno == EAGAIN || errno == EWOULDBLOCK) continue;
    return {0, StreamStatus::Error};
  }
}

StreamStatus TcpStream::wait_readable(std::optional<Seconds> deadline) {
  if (fd_ < 0) return StreamStatus::Error;
  int r = poll_one(fd_, POLLIN, remaining_ms(deadline));
  if (r == 0) return StreamStatus::Timeout;
  if (r < 0) return StreamStatus::Error;
  char c;
  ssize_t n = ::recv(fd_, &c, 1, MSG_PEEK);
  if (n > 0) return StreamStatus::Ok;
  if (n == 0) return StreamStatus::Eof;
  return StreamStatus::Error;
}

bool TcpStream::write(const char* data, size_t len) {
  size_t off = 0;
  while (off < len) {
    if (fd_ < 0) return false;
    ssize_t n = ::send(fd_, data + off, len - off, MSG_NOSIGNAL);
    if (n > 0) {
      off += static_cast<size_t>(n);
      continue;
    }
    if (n < 0 && (errno == EINTR)) continue;
    if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      if (poll_one(fd_, POLLOUT, 10000) <= 0) return false;
      continue;
    }
    return false;
  }
  return true;
}

void TcpStream::close() {
  if (fd_ >= 0) {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    fd_ = -1;
  }
}

void TcpStream::kill() {
  if (fd_ >= 0) {
    linger lg{1, 0};
    setsockopt(fd_, SOL_SOCKET, SO_LINGER, &lg, sizeof(lg));
    ::shutdown(fd_, SHUT_RDWR);
  }
}

std::unique_ptr<Stream> tcp_connect(const std::string& host, int port,
                                    std::optional<Seconds> timeout_s) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  std::string portstr = std::to_string(port);
  if (getaddrinfo(host.c_str(), portstr.c_str(), &hints, &res) != 0) return nullptr;

  std::unique_ptr<Stream> out;
  for (addrinfo* ai = res; ai && !out; ai = ai->ai_next) {
    int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    set_nonblocking(fd, true);
    int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
    if (rc < 0 && errno == EINPROGRESS) {
      int ms = timeout_s ? static_cast<int>(*timeout_s * 1000) : -1;
      if (poll_one(fd, POLLOUT, ms) > 0) {
        int err = 0;
        socklen_t len = sizeof(err);
        getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        rc = err == 0 ? 0 : -1;
      } else {
        rc = -1;
      }
    }
    if (rc == 0) {
      set_nonblocking(fd, false);
      out = std::make_unique<TcpStream>(fd, host + ":" + portstr);
    } else {
      ::close(fd);
    }
  }
  freeaddrinfo(res);
  return out;
}

TcpListener::TcpListener(int port, const std::string& bind_addr) : fd_(-1), port_(port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw NetError("socket: " + std::string(strerror(errno)));
  int one = 1;
  setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<uint16_t>(port));
  if (inet_pton(AF_INET, bind_addr.c_str(), &addr.sin_addr) != 1)
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
    ::close(fd_);
    throw NetError("bind " + bind_addr + ":" + std::to_string(port) + ": " +
                   strerror(errno));
  }
  if (::listen(fd_, 64) < 0) {
    ::close(fd_);
    throw NetError("listen: " + std::string(strerror(errno)));
  }
  socklen_t len = sizeof(addr);
  getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
}

TcpListener::~TcpListener() { close(); }

std::unique_ptr<Stream> TcpListener::accept() {
  for (;;) {
    if (fd_ < 0) return nullptr;
    int r = poll_one(fd_, POLLIN, 200);
    if (fd_ < 0) return nullptr;
    if (r == 0) continue;
    if (r < 0) return nullptr;
    sockaddr_in peer{};
    socklen_t len = sizeof(peer);
    int cfd = ::accept(fd_, reinterpret_cast<sockaddr*>(&peer), &len);
    if (cfd < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      return nullptr;
    }
    char ip[INET_ADDRSTRLEN] = "?";
    inet_ntop(AF_INET, &peer.sin_addr, ip, sizeof(ip));
    return std::make_unique<TcpStream>(
        cfd, std::string(ip) + ":" + std::to_string(ntohs(peer.sin_port)));
  }
}

void TcpListener::close() {
  if (fd_ >= 0) {
    int fd = fd_;
    fd_ = -1;
    ::shutdown(fd, SHUT_RDWR);
    ::close(fd);
  }
}

StreamStatus detect_timeout(Stream& s, Seconds idle_limit, const Clock& clock) {
  return s.wait_readable(clock.now() + idle_limit);
}

}  // namespace flowmig

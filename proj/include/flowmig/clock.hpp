#pragma once

#include <chrono>

#include "flowmig/common.hpp"

namespace flowmig {

// Read-only time source. Harness components that only stamp events take a
// Clock&; blocking/waiting goes through Net (virtual mode) or the OS (real
// sockets), never through this interface.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual Seconds now() const = 0;
  virtual bool is_virtual() const { return false; }
};

// All real clocks share one process-wide origin so absolute deadlines mean
// the same instant to every component.
inline std::chrono::steady_clock::time_point process_time_origin() {
  static const auto t0 = std::chrono::steady_clock::now();
  return t0;
}

class RealClock : public Clock {
 public:
  Seconds now() const override {
    auto d = std::chrono::steady_clock::now() - process_time_origin();
    return std::chrono::duration<double>(d).count();
  }
};

}  // namespace flowmig

#ifndef NCGP_STOPWATCH_HPP
#define NCGP_STOPWATCH_HPP

#include <chrono>

namespace ncgp {

// Accumulating wall-clock timer that can be paused.
class Stopwatch {
public:
  void start() {
    if (!running_) {
      begin_ = Clock::now();
      running_ = true;
    }
  }
  void stop() {
    if (running_) {
      total_ += std::chrono::duration<double>(Clock::now() - begin_).count();
      running_ = false;
    }
  }
  double elapsed() const {
    if (running_) {
      return total_ +
             std::chrono::duration<double>(Clock::now() - begin_).count();
    }
    return total_;
  }

private:
  using Clock = std::chrono::steady_clock;
  Clock::time_point begin_;
  double total_ = 0.0;
  bool running_ = false;
};

} // namespace ncgp

#endif

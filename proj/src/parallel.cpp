#include "ncgp/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace ncgp {

std::size_t thread_budget() {
  if (const char *env = std::getenv("NCGP_THREADS")) {
    try {
      const long requested = std::stol(env);
      if (requested > 0) {
        return static_cast<std::size_t>(requested);
      }
    } catch (const std::exception &) {
    }
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

void parallel_for(std::size_t num_tasks,
                  const std::function<void(std::size_t)> &body) {
  const std::size_t workers = std::min(thread_budget(), num_tasks);
  if (workers <= 1) {
    for (std::size_t task = 0; task < num_tasks; ++task) {
      body(task);
    }
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t task = next++; task < num_tasks; task = next++) {
      body(task);
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t w = 1; w < workers; ++w) {
    pool.emplace_back(worker);
  }
  worker();
  for (auto &t : pool) {
    t.join();
  }
}

} // namespace ncgp

#ifndef NCGP_PARALLEL_HPP
#define NCGP_PARALLEL_HPP

#include <cstddef>
#include <functional>

namespace ncgp {

// Worker count: NCGP_THREADS if set and positive, else hardware concurrency.
std::size_t thread_budget();

// Runs body(task) for task in [0, num_tasks). Tasks are handed out in index
// order; callers must write only to task-private output so results do not
// depend on scheduling.
void parallel_for(std::size_t num_tasks,
                  const std::function<void(std::size_t)> &body);

} // namespace ncgp

#endif

#ifndef PAED_PARALLEL_HPP
#define PAED_PARALLEL_HPP

#include <cstdint>
#include <functional>

namespace paed {

// Global worker count for parallel_for. 0 or 1 means serial.
void set_num_threads(int n);
int num_threads();

// Runs fn(begin, end) over contiguous chunks of [0, n). Each index is owned
// by exactly one chunk, so results are identical for any thread count as long
// as chunks write disjoint outputs.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace paed

#endif  // PAED_PARALLEL_HPP

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace d4pm {

using Vec = std::vector<double>;

// Error taxonomy mirrored by the CLI exit codes: ConfigError -> 2,
// IoError -> 3, CheckFailure -> 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline bool all_finite(const Vec& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

double l2_norm(const Vec& v);
double sum_squares(const Vec& v);
double mean(const Vec& v);

// Thread budget for data-parallel sections. Reads D4PM_THREADS once; falls
// back to hardware_concurrency. Always >= 1.
int thread_budget();

// Runs fn(i) for i in [0, n). Splits work into contiguous chunks across at
// most thread_budget() threads. Results must not depend on execution order;
// callers that accumulate do so afterwards in index order.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace d4pm

#include "bdnet/parallel.hpp"

#include <omp.h>

#include <cstdlib>

#include "bdnet/error.hpp"

namespace bdnet {

int apply_thread_env() {
  const char* env = std::getenv("BDNET_THREADS");
  if (env && *env) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (*end != '\0' || n < 1) {
      throw UsageError(std::string("BDNET_THREADS must be a positive integer, got '") + env + "'");
    }
    omp_set_num_threads(static_cast<int>(n));
  }
  return omp_get_max_threads();
}

ThreadLimit::ThreadLimit(int threads) : previous_(omp_get_max_threads()) {
  omp_set_num_threads(threads);
}

ThreadLimit::~ThreadLimit() { omp_set_num_threads(previous_); }

}  // namespace bdnet

#pragma once

#include <string>

namespace bdnet {

/// Applies BDNET_THREADS (a positive integer) as the OpenMP thread cap.
/// Returns the resulting thread count. Throws UsageError on a bad value.
int apply_thread_env();

/// Caps OpenMP threads for the lifetime of the object.
class ThreadLimit {
 public:
  explicit ThreadLimit(int threads);
  ~ThreadLimit();
  ThreadLimit(const ThreadLimit&) = delete;
  ThreadLimit& operator=(const ThreadLimit&) = delete;

 private:
  int previous_;
};

}  // namespace bdnet

// Copyright 2026 The MoLEx Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <string>
#include <thread>

namespace molex {

// MOLEX_THREADS caps parallelism; 0 (the default) means fully sequential.
inline int threads_from_env() {
  const char* v = std::getenv("MOLEX_THREADS");
  if (v == nullptr || *v == '\0') return 0;
  try {
    return std::max(0, std::stoi(v));
  } catch (const std::exception&) {
    return 0;
  }
}

// One persistent helper thread that runs a side task while the caller runs
// its own. Used to evaluate the two layer experts of a MoLEx layer
// concurrently; each task writes only its own output.
class PairExecutor {
 public:
  PairExecutor() : worker_([this] { loop(); }) {}

  PairExecutor(const PairExecutor&) = delete;
  PairExecutor& operator=(const PairExecutor&) = delete;

  ~PairExecutor() {
    {
      std::lock_guard lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  void run_pair(const std::function<void()>& side, const std::function<void()>& main) {
    {
      std::lock_guard lk(mu_);
      task_ = &side;
      done_ = false;
      error_ = nullptr;
    }
    cv_.notify_all();
    main();
    std::unique_lock lk(mu_);
    done_cv_.wait(lk, [this] { return done_; });
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void loop() {
    std::unique_lock lk(mu_);
    while (true) {
      cv_.wait(lk, [this] { return stop_ || task_ != nullptr; });
      if (stop_) return;
      const auto* task = task_;
      task_ = nullptr;
      lk.unlock();
      std::exception_ptr err;
      try {
        (*task)();
      } catch (...) {
        err = std::current_exception();
      }
      lk.lock();
      error_ = err;
      done_ = true;
      done_cv_.notify_all();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  const std::function<void()>* task_ = nullptr;
  bool done_ = true;
  bool stop_ = false;
  std::exception_ptr error_;
  std::thread worker_;
};

}  // namespace molex

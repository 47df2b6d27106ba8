// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <condition_variable>
#include <cstddef>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace treepipe {

/// FIFO hand-off between threads. pop() blocks until a value arrives or the
/// channel is closed and drained.
template <typename T>
class Channel {
 public:
  void push(T value) {
    {
      std::lock_guard lock(mu_);
      queue_.push_back(std::move(value));
    }
    cv_.notify_one();
  }

  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return closed_ || !queue_.empty(); });
    if (queue_.empty()) return std::nullopt;
    T value = std::move(queue_.front());
    queue_.pop_front();
    return value;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> queue_;
  bool closed_ = false;
};

/// Runs the per-stage compute phase of one step. run() returns only after
/// every task finished (the verification barrier). If tasks throw, the
/// exception of the lowest-numbered stage is rethrown.
class Executor {
 public:
  virtual ~Executor() = default;
  virtual void run(std::size_t count, const std::function<void(std::size_t)>& task) = 0;
};

class SerialExecutor final : public Executor {
 public:
  void run(std::size_t count, const std::function<void(std::size_t)>& task) override;
};

/// One long-lived thread per stage.
class WorkerExecutor final : public Executor {
 public:
  explicit WorkerExecutor(std::size_t workers);
  ~WorkerExecutor() override;

  WorkerExecutor(const WorkerExecutor&) = delete;
  WorkerExecutor& operator=(const WorkerExecutor&) = delete;

  void run(std::size_t count, const std::function<void(std::size_t)>& task) override;

 private:
  struct Job {
    const std::function<void(std::size_t)>* task;
    std::size_t index;
  };
  struct Done {
    std::size_t index;
    std::exception_ptr error;
  };

  std::vector<std::unique_ptr<Channel<Job>>> inboxes_;
  Channel<Done> done_;
  std::vector<std::thread> threads_;
};

std::unique_ptr<Executor> make_executor(bool workers, std::size_t stages);

}  // namespace treepipe

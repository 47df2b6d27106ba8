// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/executor.hpp"

#include "treepipe/types.hpp"

namespace treepipe {

void SerialExecutor::run(std::size_t count, const std::function<void(std::size_t)>& task) {
  for (std::size_t i = 0; i < count; ++i) task(i);
}

WorkerExecutor::WorkerExecutor(std::size_t workers) {
  for (std::size_t w = 0; w < workers; ++w) inboxes_.push_back(std::make_unique<Channel<Job>>());
  for (std::size_t w = 0; w < workers; ++w) {
    threads_.emplace_back([this, w] {
      while (auto job = inboxes_[w]->pop()) {
        std::exception_ptr error;
        try {
          (*job->task)(job->index);
        } catch (...) {
          error = std::current_exception();
        }
        done_.push({job->index, error});
      }
    });
  }
}

WorkerExecutor::~WorkerExecutor() {
  for (auto& inbox : inboxes_) inbox->close();
  for (auto& t : threads_) t.join();
}

void WorkerExecutor::run(std::size_t count, const std::function<void(std::size_t)>& task) {
  if (count > threads_.size()) throw ContractViolation("more tasks than workers");
  for (std::size_t i = 0; i < count; ++i) inboxes_[i]->push({&task, i});
  std::vector<std::exception_ptr> errors(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto done = done_.pop();
    errors[done->index] = done->error;
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::unique_ptr<Executor> make_executor(bool workers, std::size_t stages) {
  if (workers) return std::make_unique<WorkerExecutor>(stages);
  return std::make_unique<SerialExecutor>();
}

}  // namespace treepipe

// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <atomic>
#include <mutex>
#include <thread>

#include "treepipe/executor.hpp"
#include "treepipe/types.hpp"

using namespace treepipe;

TEST_CASE("channel hands values across threads and drains on close") {
  Channel<int> ch;
  std::thread producer([&] {
    for (int i = 0; i < 100; ++i) ch.push(i);
    ch.close();
  });
  int expect = 0;
  while (auto v = ch.pop()) CHECK(*v == expect++);
  producer.join();
  CHECK(expect == 100);
}

TEST_CASE("executors run every task before returning") {
  SerialExecutor serial;
  WorkerExecutor workers(4);
  for (Executor* e : {static_cast<Executor*>(&serial), static_cast<Executor*>(&workers)}) {
    for (int round = 0; round < 50; ++round) {
      std::vector<int> hit(4, 0);
      e->run(4, [&](std::size_t i) { hit[i] += static_cast<int>(i) + 1; });
      CHECK(hit == std::vector<int>{1, 2, 3, 4});
    }
  }
}

TEST_CASE("workers really run concurrently") {
  WorkerExecutor workers(3);
  std::atomic<int> arrived{0};
  // Each task waits for all three; a serial runner would deadlock here.
  workers.run(3, [&](std::size_t) {
    ++arrived;
    while (arrived.load() < 3) std::this_thread::yield();
  });
  CHECK(arrived == 3);
}

TEST_CASE("the lowest failing stage's error is rethrown") {
  WorkerExecutor workers(4);
  try {
    workers.run(4, [](std::size_t i) {
      if (i == 1) throw InvariantViolation("one");
      if (i == 3) throw ShapeError("three");
    });
    FAIL("expected an exception");
  } catch (const InvariantViolation& e) {
    CHECK(std::string(e.what()) == "one");
  }
  // The executor stays usable.
  int n = 0;
  std::mutex mu;
  workers.run(4, [&](std::size_t) {
    std::lock_guard lock(mu);
    ++n;
  });
  CHECK(n == 4);
  CHECK_THROWS_AS(workers.run(5, [](std::size_t) {}), ContractViolation);
}

TEST_CASE("make_executor") {
  CHECK(dynamic_cast<SerialExecutor*>(make_executor(false, 4).get()) != nullptr);
  CHECK(dynamic_cast<WorkerExecutor*>(make_executor(true, 4).get()) != nullptr);
}

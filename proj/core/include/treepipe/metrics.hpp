// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace treepipe {

/// One row of the per-stage timeline.
struct TraceRow {
  std::uint64_t step = 0;
  std::size_t stage = 0;  // 1-based
  std::string phase;      // compute | prune | transmit | idle
  double start_ms = 0.0;
  double end_ms = 0.0;
  std::size_t resident_nodes = 0;
  bool hit = false;
  bool flush = false;

  friend bool operator==(const TraceRow&, const TraceRow&) = default;
};

struct RunCounters {
  std::size_t steps = 0;
  std::size_t verifications = 0;
  std::size_t hits = 0;
  std::size_t flushes = 0;
  std::size_t stalls = 0;
};

struct RunMetrics {
  double tbt_mean_ms = 0.0;
  double tbt_p50 = 0.0;
  double tbt_p99 = 0.0;
  double steps_per_token = 0.0;
  double hit_rate = 0.0;
  std::size_t flush_count = 0;
  double throughput_tps = 0.0;

  std::size_t tokens = 0;
  std::size_t steps = 0;
  std::size_t stalls = 0;
  double total_ms = 0.0;

  /// Compact JSON object with every field, keys in declaration order.
  std::string to_json() const;
};

/// Nearest-rank percentile (q in [0, 100]); 0 for an empty sample.
double percentile(std::vector<double> values, double q);

/// Time-between-token samples from emission timestamps.
std::vector<double> tbt_samples(std::span<const double> emit_ms);

/// Aggregates one run. `emit_steps` / `emit_ms` are the step index and end
/// time of every emitted token. steps_per_token skips the first gap (the
/// pipeline fill after prefill) when later gaps exist.
RunMetrics compute_metrics(std::span<const std::uint64_t> emit_steps, std::span<const double> emit_ms,
                           const RunCounters& counters, double total_ms);

/// CSV with a header line; `comment`, if non-empty, is written first after "# ".
void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows, std::string_view comment = {});

}  // namespace treepipe

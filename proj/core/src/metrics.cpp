// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include <json.hpp>

namespace treepipe {

namespace {

// Shortest round-trip representation keeps CSV output byte-stable.
std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  double back = 0.0;
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    std::sscanf(buf, "%lf", &back);
    if (back == v) break;
  }
  return buf;
}

}  // namespace

std::string RunMetrics::to_json() const {
  nlohmann::ordered_json j;
  j["tbt_mean_ms"] = tbt_mean_ms;
  j["tbt_p50"] = tbt_p50;
  j["tbt_p99"] = tbt_p99;
  j["steps_per_token"] = steps_per_token;
  j["hit_rate"] = hit_rate;
  j["flush_count"] = flush_count;
  j["throughput_tps"] = throughput_tps;
  j["tokens"] = tokens;
  j["steps"] = steps;
  j["stalls"] = stalls;
  j["total_ms"] = total_ms;
  return j.dump();
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

std::vector<double> tbt_samples(std::span<const double> emit_ms) {
  std::vector<double> out;
  for (std::size_t i = 1; i < emit_ms.size(); ++i) out.push_back(emit_ms[i] - emit_ms[i - 1]);
  return out;
}

RunMetrics compute_metrics(std::span<const std::uint64_t> emit_steps, std::span<const double> emit_ms,
                           const RunCounters& c, double total_ms) {
  RunMetrics m;
  m.tokens = emit_steps.size();
  m.steps = c.steps;
  m.stalls = c.stalls;
  m.flush_count = c.flushes;
  m.total_ms = total_ms;
  m.hit_rate = c.verifications == 0 ? 0.0 : static_cast<double>(c.hits) / static_cast<double>(c.verifications);
  m.throughput_tps = total_ms > 0.0 ? static_cast<double>(m.tokens) / (total_ms / 1000.0) : 0.0;

  const auto tbt = tbt_samples(emit_ms);
  if (!tbt.empty()) {
    double sum = 0.0;
    for (double t : tbt) sum += t;
    m.tbt_mean_ms = sum / static_cast<double>(tbt.size());
    m.tbt_p50 = percentile(tbt, 50.0);
    m.tbt_p99 = percentile(tbt, 99.0);
  }

  if (emit_steps.size() >= 2) {
    const std::size_t first = emit_steps.size() >= 3 ? 1 : 0;
    const auto span = emit_steps.back() - emit_steps[first];
    m.steps_per_token = static_cast<double>(span) / static_cast<double>(emit_steps.size() - 1 - first);
  }
  return m;
}

void write_trace_csv(std::ostream& out, std::span<const TraceRow> rows, std::string_view comment) {
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "step,stage,phase,start_ms,end_ms,resident_nodes,hit,flush\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.stage << ',' << r.phase << ',' << fmt(r.start_ms) << ',' << fmt(r.end_ms) << ','
        << r.resident_nodes << ',' << (r.hit ? 1 : 0) << ',' << (r.flush ? 1 : 0) << '\n';
  }
}

}  // namespace treepipe

// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/perf_model.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "json_io.hpp"

namespace treepipe {

double CostModel::step_cost(std::size_t w) const {
  if (w < 1) throw ContractViolation("step_cost needs w >= 1");
  const std::size_t buckets = (w + quantum - 1) / quantum;
  return base_ms + slope_ms_per_quantum * static_cast<double>(buckets - 1);
}

double CostModel::transmit_ms(std::size_t nodes) const {
  return nodes == 0 ? 0.0 : transmit_base_ms + transmit_per_node_ms * static_cast<double>(nodes);
}

void CostModel::validate() const {
  for (double v : {base_ms, slope_ms_per_quantum, prune_ms, transmit_base_ms, transmit_per_node_ms, draft_ms,
                   batch_overhead_ms}) {
    if (!(v >= 0.0)) throw ConfigError("cost model terms must be non-negative");
  }
  if (quantum < 1) throw ConfigError("cost model quantum must be >= 1");
}

CostModel CostModel::unit() {
  CostModel c;
  c.base_ms = 1.0;
  c.slope_ms_per_quantum = 0.0;
  c.prune_ms = 0.0;
  c.transmit_base_ms = 0.0;
  c.transmit_per_node_ms = 0.0;
  c.draft_ms = 0.0;
  return c;
}

AccuracyCurve::AccuracyCurve(std::map<std::size_t, double> points) : points_(std::move(points)) {
  double prev = 0.0;
  for (const auto& [w, p] : points_) {
    if (w < 1) throw ConfigError("accuracy curve widths must be >= 1");
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("accuracy values must lie in [0, 1]");
    if (p < prev) throw ConfigError("accuracy curve must be non-decreasing in w");
    prev = p;
  }
}

double AccuracyCurve::at(std::size_t w) const {
  const auto it = points_.find(w);
  if (it == points_.end()) throw ConfigError("width " + std::to_string(w) + " is not covered by the accuracy curve");
  return it->second;
}

double expected_tbt_general(std::span<const double> stage_ms, double p) {
  if (stage_ms.empty()) throw ContractViolation("expected_tbt_general needs at least one stage");
  double max_t = stage_ms[0];
  double sum = 0.0;
  for (double t : stage_ms) {
    max_t = std::max(max_t, t);
    sum += t;
  }
  return max_t + (1.0 - p) * sum;
}

double expected_tbt_uniform(double t, double p, std::size_t m) {
  return t + (1.0 - p) * static_cast<double>(m) * t;
}

std::size_t select_width(const CostModel& cost, const AccuracyCurve& acc, std::size_t m,
                         std::span<const std::size_t> candidates) {
  if (candidates.empty()) throw ContractViolation("select_width needs candidates");
  std::size_t best = 0;
  double best_tbt = std::numeric_limits<double>::infinity();
  for (std::size_t w : candidates) {
    const double tbt = expected_tbt_uniform(cost.step_cost(w), acc.at(w), m);
    if (tbt < best_tbt || (tbt == best_tbt && w < best)) {
      best = w;
      best_tbt = tbt;
    }
  }
  return best;
}

std::vector<double> isotonic_fit(std::span<const double> values, std::span<const double> weights) {
  if (values.size() != weights.size()) throw ShapeError("isotonic_fit values and weights differ in length");
  struct Block {
    double mean;
    double weight;
    std::size_t count;
  };
  std::vector<Block> blocks;
  for (std::size_t i = 0; i < values.size(); ++i) {
    blocks.push_back({values[i], weights[i], 1});
    while (blocks.size() > 1 && blocks[blocks.size() - 2].mean > blocks.back().mean) {
      const Block b = blocks.back();
      blocks.pop_back();
      Block& a = blocks.back();
      const double w = a.weight + b.weight;
      a.mean = w > 0.0 ? (a.mean * a.weight + b.mean * b.weight) / w : (a.mean + b.mean) / 2.0;
      a.weight = w;
      a.count += b.count;
    }
  }
  std::vector<double> out;
  out.reserve(values.size());
  for (const auto& b : blocks) out.insert(out.end(), b.count, b.mean);
  return out;
}

AccuracyCurve fit_accuracy_curve(std::span<const HitSample> samples) {
  if (samples.empty()) throw ContractViolation("fit_accuracy_curve needs at least one trace");
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> pooled;
  for (const auto& s : samples) {
    if (s.hits > s.verifications) throw ContractViolation("more hits than verifications");
    auto& [hits, total] = pooled[s.w];
    hits += s.hits;
    total += s.verifications;
  }
  std::vector<double> rates, weights;
  for (const auto& [w, hv] : pooled) {
    if (hv.second == 0) throw ContractViolation("width " + std::to_string(w) + " has no verifications");
    rates.push_back(static_cast<double>(hv.first) / static_cast<double>(hv.second));
    weights.push_back(static_cast<double>(hv.second));
  }
  const auto fitted = isotonic_fit(rates, weights);
  std::map<std::size_t, double> points;
  std::size_t i = 0;
  for (const auto& [w, hv] : pooled) points[w] = std::clamp(fitted[i++], 0.0, 1.0);
  return AccuracyCurve(std::move(points));
}

// ---------------------------------------------------------------------------
// JSON

std::string cost_model_to_json(const CostModel& c) { return detail::cost_to_json(c).dump(2); }

CostModel cost_model_from_json(const std::string& text) {
  try {
    return detail::cost_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad cost model: ") + e.what());
  }
}

CostModel load_cost_model(const std::string& path) { return cost_model_from_json(detail::read_file(path)); }

std::string accuracy_curve_to_json(const AccuracyCurve& acc) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& [w, p] : acc.points()) j.push_back({{"w", w}, {"p", p}});
  return nlohmann::json{{"points", j}}.dump(2);
}

AccuracyCurve accuracy_curve_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    std::map<std::size_t, double> points;
    for (const auto& pt : j.at("points")) {
      const auto w = pt.at("w").get<std::size_t>();
      if (!points.emplace(w, pt.at("p").get<double>()).second) {
        throw ConfigError("duplicate width " + std::to_string(w) + " in accuracy curve");
      }
    }
    return AccuracyCurve(std::move(points));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad accuracy curve: ") + e.what());
  }
}

AccuracyCurve load_accuracy_curve(const std::string& path) {
  return accuracy_curve_from_json(detail::read_file(path));
}

}  // namespace treepipe

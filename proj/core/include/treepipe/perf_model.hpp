// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "treepipe/types.hpp"

namespace treepipe {

/// Simulated per-step costs. Compute cost is for the whole model; a stage is
/// charged its share of layers.
struct CostModel {
  double base_ms = 300.0;
  double slope_ms_per_quantum = 24.0;
  std::size_t quantum = 64;

  double prune_ms = 0.5;
  double transmit_base_ms = 1.0;
  double transmit_per_node_ms = 0.01;
  double draft_ms = 20.0;
  /// Prune and transmit of one stage run concurrently when set.
  bool overlap_prune_transmit = true;
  /// Extra per-stage compute charge for packing more than one request.
  double batch_overhead_ms = 0.0;

  /// base + slope * (ceil(w / quantum) - 1). Throws ContractViolation if w < 1.
  double step_cost(std::size_t w) const;
  double transmit_ms(std::size_t nodes) const;

  void validate() const;

  /// Unit base cost, every other term zero.
  static CostModel unit();
};

/// Per-step hit probability as a function of tree width.
class AccuracyCurve {
 public:
  AccuracyCurve() = default;
  /// Throws ConfigError unless values are in [0, 1] and non-decreasing in w.
  explicit AccuracyCurve(std::map<std::size_t, double> points);

  bool covers(std::size_t w) const { return points_.contains(w); }
  double at(std::size_t w) const;
  const std::map<std::size_t, double>& points() const noexcept { return points_; }

  friend bool operator==(const AccuracyCurve&, const AccuracyCurve&) = default;

 private:
  std::map<std::size_t, double> points_;
};

/// max_i t_i + (1 - P) * sum_i t_i.
double expected_tbt_general(std::span<const double> stage_ms, double p);

/// t + (1 - P) * m * t.
double expected_tbt_uniform(double t, double p, std::size_t m);

/// argmin over candidates of expected_tbt_uniform(step_cost(w), acc(w), m);
/// ties go to the smaller width.
std::size_t select_width(const CostModel& cost, const AccuracyCurve& acc, std::size_t m,
                         std::span<const std::size_t> candidates);

/// Verification outcomes observed at one width.
struct HitSample {
  std::size_t w = 0;
  std::size_t hits = 0;
  std::size_t verifications = 0;
};

/// Pooled hit rate per width, then pool-adjacent-violators (weighted by
/// verification count) so the curve is non-decreasing.
AccuracyCurve fit_accuracy_curve(std::span<const HitSample> samples);

/// Weighted isotonic (non-decreasing) regression.
std::vector<double> isotonic_fit(std::span<const double> values, std::span<const double> weights);

std::string cost_model_to_json(const CostModel& cost);
CostModel cost_model_from_json(const std::string& text);
CostModel load_cost_model(const std::string& path);

std::string accuracy_curve_to_json(const AccuracyCurve& acc);
AccuracyCurve accuracy_curve_from_json(const std::string& text);
AccuracyCurve load_accuracy_curve(const std::string& path);

}  // namespace treepipe

// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "treepipe/executor.hpp"
#include "treepipe/metrics.hpp"
#include "treepipe/perf_model.hpp"
#include "treepipe/spec_tree.hpp"
#include "treepipe/stage.hpp"
#include "treepipe/token_source.hpp"
#include "treepipe/toy_model.hpp"

namespace treepipe {

enum class Mode { speculative, vanilla_pp };

std::string_view to_string(Mode mode);
/// Accepts "speculative", "vanilla-pp" and "vanilla_pp". Throws ConfigError.
Mode parse_mode(std::string_view text);

struct PipelineConfig {
  std::size_t stages = 4;
  /// Empty: split layers evenly, remainder to the earlier stages.
  std::vector<LayerRange> layers;
  BeamConfig beam;
  Mode mode = Mode::speculative;
  /// Per-step id-set and level-ledger checks.
  bool audit = true;

  std::vector<LayerRange> layer_ranges(std::size_t model_layers) const;
  void validate(std::size_t model_layers) const;
};

/// Work done by one stage in one step; input to the cost model.
struct StageWork {
  std::size_t computed = 0;
  std::size_t resident = 0;
  bool pruned = false;
  std::size_t transmitted = 0;
};

struct StageTiming {
  double compute_ms = 0.0;
  double prune_ms = 0.0;
  double transmit_ms = 0.0;
};

struct StepTiming {
  std::vector<StageTiming> stages;
  std::vector<double> busy_ms;
  double draft_ms = 0.0;
  double duration_ms = 0.0;
};

/// Stage i is charged step_cost(rows computed) * share[i] (+ batch overhead
/// when `requests` > 1), then prune and transmit either overlapped (max) or
/// back to back (sum). The step lasts as long as the busiest stage, plus any
/// draft time that this work does not cover.
StepTiming time_step(const CostModel& cost, std::span<const double> share, std::span<const StageWork> work,
                     bool drafted, std::size_t requests = 1);

/// Appends per-stage compute / prune / transmit / idle rows for one step.
void append_trace(std::vector<TraceRow>& rows, std::uint64_t step, double start_ms, const StepTiming& timing,
                  std::span<const StageWork> work, bool overlap, bool hit, bool flush);

struct StepOutcome {
  std::uint64_t step = 0;
  /// Token chosen by the last stage, if a verification ran this step.
  std::optional<TokenId> verified;
  bool hit = false;
  /// Speculative nodes were discarded because the verified token had none.
  bool flush = false;
  /// m on a miss; on a hit, the number of stages whose in-flight level was
  /// pruned away entirely.
  std::size_t flush_depth = 0;
  bool emitted = false;
  bool stalled = false;
  std::vector<StageWork> work;
  StepTiming timing;
  double start_ms = 0.0;
};

/// Levels ever injected into the tree versus where they went.
struct LevelLedger {
  std::size_t injected = 0;
  std::size_t retired = 0;
  std::size_t dropped = 0;
};

/// The speculative pipeline step machine over m stages.
///
/// Each step: every stage computes the level it received; the last stage
/// picks the greedy next token of the root (when the root has reached it)
/// and matches it against the root's children; every stage then prunes to
/// the verified child's subtree (or drops all speculative state on a miss);
/// finally each stage forwards its level to the next one and stage 1
/// receives the surviving part of the new level, or the verified token
/// itself after a miss.
class Pipeline {
 public:
  Pipeline(const ToyModel& model, PipelineConfig cfg, CostModel cost = {}, Executor* executor = nullptr);
  Pipeline(const Pipeline&) = delete;
  Pipeline& operator=(const Pipeline&) = delete;

  /// Causal pass over the prompt on every stage. Resets all state.
  void prefill(std::span<const TokenId> prompt);

  /// Next level from the draft provider, or nullopt on a stall. Rethrows
  /// SourceUnavailable when the provider is exhausted.
  std::optional<std::vector<LayerChild>> draft_level(DraftProvider& draft);

  /// One pipeline step. `new_layer` must be a legal layer_append payload for
  /// the current tree; nullopt marks a stall. Ignored in vanilla mode.
  StepOutcome step(std::optional<std::vector<LayerChild>> new_layer);

  void set_width(std::size_t w) { cfg_.beam.w = w; }

  const PipelineConfig& config() const noexcept { return cfg_; }
  const CostModel& cost() const noexcept { return cost_; }
  const ToyModel& model() const noexcept { return model_; }
  std::size_t stage_count() const noexcept { return stages_.size(); }
  const Stage& stage(std::size_t i) const { return stages_.at(i); }
  std::span<const double> layer_share() const noexcept { return share_; }

  const SpecTree& tree() const;
  /// Prompt followed by every emitted token; the last element is the root.
  std::span<const TokenId> sequence() const noexcept { return sequence_; }
  std::span<const TokenId> output() const noexcept;
  std::uint64_t steps() const noexcept { return steps_; }
  double now_ms() const noexcept { return now_ms_; }
  double prefill_ms() const noexcept { return prefill_ms_; }
  const LevelLedger& ledger() const noexcept { return ledger_; }
  const std::vector<TraceRow>& prefill_trace() const noexcept { return prefill_trace_; }

  /// Id-set, alignment and ledger audit. Throws InvariantViolation.
  void audit() const;

 private:
  const ToyModel& model_;
  PipelineConfig cfg_;
  CostModel cost_;
  Executor* executor_;
  SerialExecutor serial_;

  std::vector<Stage> stages_;
  std::vector<double> share_;
  std::optional<SpecTree> tree_;
  std::vector<TokenId> sequence_;
  std::size_t prompt_len_ = 0;
  std::uint64_t steps_ = 0;
  double now_ms_ = 0.0;
  double prefill_ms_ = 0.0;
  LevelLedger ledger_;
  std::vector<TraceRow> prefill_trace_;
};

/// Synthetic draft whose ground truth is the model's own greedy
/// continuation of `prompt`.
std::unique_ptr<DraftProvider> make_synthetic_draft(const ToyModel& model, std::span<const TokenId> prompt,
                                                    SyntheticDraftConfig cfg);

struct RunResult {
  std::vector<TokenId> tokens;
  RunMetrics metrics;
  std::vector<TraceRow> trace;
  std::vector<StepOutcome> outcomes;
  /// The draft provider ran dry before max_tokens were emitted.
  bool early_stop = false;
};

/// Prefill plus steps until `max_tokens` tokens are emitted. `draft` may be
/// null, which stalls every step. Vanilla mode never consults it.
RunResult run_pipeline(const ToyModel& model, const PipelineConfig& cfg, const CostModel& cost,
                       DraftProvider* draft, std::span<const TokenId> prompt, std::size_t max_tokens,
                       Executor* executor = nullptr);

}  // namespace treepipe

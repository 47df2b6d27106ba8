// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "treepipe/metrics.hpp"
#include "treepipe/pipeline.hpp"
#include "treepipe/spec_tree.hpp"
#include "treepipe/token_source.hpp"

namespace treepipe {

/// The packed batch would exceed the configured node budget.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Several requests' trees packed back to back. Segment r occupies
/// [offsets[r], offsets[r] + lengths[r]) of the node arrays; the combined
/// mask is total() x total().
struct RaggedBatch {
  std::vector<std::size_t> request_ids;
  std::vector<std::size_t> offsets;
  std::vector<std::size_t> lengths;
  std::vector<std::vector<std::size_t>> level_offsets;
  std::vector<TokenId> tokens;
  std::vector<double> probs;
  std::vector<NodeId> ids;
  std::vector<BitVector> mask;

  std::size_t total() const noexcept { return tokens.size(); }
  std::size_t segments() const noexcept { return offsets.size(); }

  /// Offsets strictly increasing, segments tile the payload, and no mask bit
  /// crosses a segment boundary.
  bool well_formed() const;
};

/// Throws ContractViolation on an empty batch and CapacityError when
/// `max_nodes` > 0 and the total exceeds it.
RaggedBatch pack(std::span<const std::size_t> request_ids, std::span<const SpecTree* const> trees,
                 std::size_t max_nodes = 0);

/// Rebuilds every segment's tree (NodeIds restart at 0 per segment).
std::vector<SpecTree> unpack(const RaggedBatch& batch, std::uint32_t vocab);

/// Node budget of `w_total` split evenly over `active` requests; the first
/// `w_total % active` (oldest) requests get one more. Never below 1.
std::vector<std::size_t> split_width(std::size_t w_total, std::size_t active);

struct WorkloadRequest {
  std::uint64_t arrival_step = 0;
  std::vector<TokenId> prompt;
  std::size_t max_new_tokens = 0;

  friend bool operator==(const WorkloadRequest&, const WorkloadRequest&) = default;
};

/// JSON Lines {arrival_step, prompt_tokens, max_new_tokens}. Throws
/// ParseError with the offending line.
std::vector<WorkloadRequest> parse_workload(std::istream& in, std::uint32_t vocab);
std::vector<WorkloadRequest> load_workload(const std::string& path, std::uint32_t vocab);

enum class RequestState { queued, prefilling, decoding, done };

struct RequestSlot {
  std::size_t id = 0;
  WorkloadRequest request;
  RequestState state = RequestState::queued;
  std::vector<TokenId> emitted;
  std::vector<std::uint64_t> emit_steps;  // the request's own pipeline step
  std::vector<double> emit_ms;
  double admitted_ms = 0.0;
  double finished_ms = 0.0;
  RunCounters counters;
  std::unique_ptr<Pipeline> pipeline;
  std::unique_ptr<DraftProvider> draft;
};

struct BatchConfig {
  std::size_t max_batch = 4;
  std::size_t w_total = 64;
  std::size_t max_batch_nodes = 0;
};

/// Builds the draft provider for a newly admitted request; may return null
/// (every step stalls).
using DraftFactory = std::function<std::unique_ptr<DraftProvider>(const RequestSlot&)>;

/// Synthetic drafts backed by a per-request greedy oracle; request i uses
/// seed cfg.seed + i.
DraftFactory synthetic_draft_factory(const ToyModel& model, SyntheticDraftConfig cfg);

struct BatchedStep {
  std::vector<StepOutcome> outcomes;
  std::vector<StageWork> work;
  StepTiming timing;
};

/// One step for every listed pipeline, timed as a single packed step.
/// Widths are applied before drafting. A request whose draft provider is
/// exhausted stalls.
BatchedStep batched_step(std::span<Pipeline* const> pipes, std::span<DraftProvider* const> drafts,
                         std::span<const std::size_t> widths, const CostModel& cost);

/// Iteration-level scheduler: FIFO admission up to max_batch running
/// requests, prefill of new requests ahead of decode work in the same tick.
class Batcher {
 public:
  Batcher(const ToyModel& model, PipelineConfig pipeline, CostModel cost, BatchConfig batch, DraftFactory drafts,
          Executor* executor = nullptr);

  void submit(WorkloadRequest request);

  /// One scheduler tick. Returns false once every submitted request is done.
  bool tick();
  void run();

  std::uint64_t ticks() const noexcept { return tick_; }
  double now_ms() const noexcept { return now_ms_; }
  std::span<const std::unique_ptr<RequestSlot>> slots() const noexcept { return slots_; }
  std::size_t arrived() const noexcept { return arrived_; }
  std::size_t completed() const noexcept { return completed_; }
  std::size_t running() const noexcept { return running_.size(); }
  std::size_t queued() const noexcept { return queue_.size(); }

 private:
  void admit();
  void check_conservation() const;

  const ToyModel& model_;
  PipelineConfig pipeline_;
  CostModel cost_;
  BatchConfig batch_;
  DraftFactory drafts_;
  Executor* executor_;

  std::vector<std::unique_ptr<RequestSlot>> slots_;
  std::deque<RequestSlot*> pending_;  // submitted, not yet arrived
  std::deque<RequestSlot*> queue_;
  std::vector<RequestSlot*> running_;
  std::size_t arrived_ = 0;
  std::size_t completed_ = 0;
  std::uint64_t tick_ = 0;
  double now_ms_ = 0.0;
};

struct RequestReport {
  std::size_t id = 0;
  std::vector<TokenId> tokens;
  RunMetrics metrics;
};

struct ServeReport {
  std::size_t batch = 0;
  /// Pooled over all requests; total_ms is the workload makespan.
  RunMetrics metrics;
  std::vector<double> per_request_tbt;
  std::vector<RequestReport> requests;

  std::string to_json() const;
};

/// Runs a whole workload at one batch size.
ServeReport serve_workload(const ToyModel& model, const PipelineConfig& pipeline, const CostModel& cost,
                           BatchConfig batch, const DraftFactory& drafts, std::span<const WorkloadRequest> workload,
                           Executor* executor = nullptr);

}  // namespace treepipe

// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/pipeline.hpp"

#include <algorithm>
#include <string>
#include <unordered_set>

namespace treepipe {

std::string_view to_string(Mode mode) {
  return mode == Mode::speculative ? "speculative" : "vanilla-pp";
}

Mode parse_mode(std::string_view text) {
  if (text == "speculative") return Mode::speculative;
  if (text == "vanilla-pp" || text == "vanilla_pp") return Mode::vanilla_pp;
  throw ConfigError("unknown mode '" + std::string(text) + "' (expected speculative or vanilla-pp)");
}

std::vector<LayerRange> PipelineConfig::layer_ranges(std::size_t model_layers) const {
  if (!layers.empty()) return layers;
  std::vector<LayerRange> out;
  if (stages == 0) return out;
  const std::size_t base = model_layers / stages;
  const std::size_t extra = model_layers % stages;
  std::size_t begin = 0;
  for (std::size_t i = 0; i < stages; ++i) {
    const std::size_t n = base + (i < extra ? 1 : 0);
    out.push_back({begin, begin + n});
    begin += n;
  }
  return out;
}

void PipelineConfig::validate(std::size_t model_layers) const {
  if (stages < 2) throw ConfigError("pipeline needs at least 2 stages");
  if (stages > model_layers) {
    throw ConfigError("pipeline has " + std::to_string(stages) + " stages but the model only " +
                      std::to_string(model_layers) + " layers");
  }
  const auto ranges = layer_ranges(model_layers);
  if (ranges.size() != stages) throw ConfigError("layer assignment must list one range per stage");
  std::size_t next = 0;
  for (const auto& r : ranges) {
    if (r.begin != next || r.end <= r.begin) throw ConfigError("layer ranges must partition [0, L) in order");
    next = r.end;
  }
  if (next != model_layers) throw ConfigError("layer ranges must cover every model layer");
  beam.validate();
}

StepTiming time_step(const CostModel& cost, std::span<const double> share, std::span<const StageWork> work,
                     bool drafted, std::size_t requests) {
  if (share.size() != work.size()) throw ShapeError("stage shares and work differ in length");
  StepTiming t;
  double max_busy = 0.0;
  for (std::size_t i = 0; i < work.size(); ++i) {
    StageTiming s;
    if (work[i].computed > 0) {
      s.compute_ms = cost.step_cost(work[i].computed) * share[i];
      if (requests > 1) s.compute_ms += cost.batch_overhead_ms;
    }
    s.prune_ms = work[i].pruned ? cost.prune_ms : 0.0;
    s.transmit_ms = cost.transmit_ms(work[i].transmitted);
    const double busy = s.compute_ms + (cost.overlap_prune_transmit ? std::max(s.prune_ms, s.transmit_ms)
                                                                     : s.prune_ms + s.transmit_ms);
    max_busy = std::max(max_busy, busy);
    t.stages.push_back(s);
    t.busy_ms.push_back(busy);
  }
  t.draft_ms = drafted ? cost.draft_ms : 0.0;
  t.duration_ms = max_busy + std::max(0.0, t.draft_ms - max_busy);
  return t;
}

void append_trace(std::vector<TraceRow>& rows, std::uint64_t step, double start_ms, const StepTiming& timing,
                  std::span<const StageWork> work, bool overlap, bool hit, bool flush) {
  const double end = start_ms + timing.duration_ms;
  for (std::size_t i = 0; i < timing.stages.size(); ++i) {
    const auto& s = timing.stages[i];
    const std::size_t resident = work[i].resident;
    auto add = [&](const char* phase, double a, double b) {
      if (b > a) rows.push_back({step, i + 1, phase, a, b, resident, hit, flush});
    };
    const double c_end = start_ms + s.compute_ms;
    add("compute", start_ms, c_end);
    add("prune", c_end, c_end + s.prune_ms);
    const double x_start = overlap ? c_end : c_end + s.prune_ms;
    add("transmit", x_start, x_start + s.transmit_ms);
    add("idle", start_ms + timing.busy_ms[i], end);
  }
}

Pipeline::Pipeline(const ToyModel& model, PipelineConfig cfg, CostModel cost, Executor* executor)
    : model_(model), cfg_(std::move(cfg)), cost_(cost), executor_(executor ? executor : &serial_) {
  cfg_.validate(model_.layer_count());
  cost_.validate();
  const auto ranges = cfg_.layer_ranges(model_.layer_count());
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    stages_.emplace_back(model_, i, ranges[i], i + 1 == ranges.size());
    share_.push_back(static_cast<double>(ranges[i].size()) / static_cast<double>(model_.layer_count()));
  }
}

const SpecTree& Pipeline::tree() const {
  if (!tree_) throw ContractViolation("pipeline has not been prefilled");
  return *tree_;
}

std::span<const TokenId> Pipeline::output() const noexcept {
  return std::span<const TokenId>(sequence_).subspan(prompt_len_);
}

void Pipeline::prefill(std::span<const TokenId> prompt) {
  if (prompt.empty()) throw ContractViolation("prompt must not be empty");
  for (auto t : prompt) {
    if (t.value >= model_.vocab()) throw InvalidToken("prompt token outside vocabulary");
  }
  sequence_.assign(prompt.begin(), prompt.end());
  prompt_len_ = prompt.size();
  steps_ = 0;
  ledger_ = {1, 0, 0};
  const NodeId root{0};
  tree_ = SpecTree::new_root(prompt.back(), model_.vocab(), root);

  std::vector<std::uint64_t> positions(prompt.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  Embeddings x = model_.embed(prompt, positions);
  for (auto& s : stages_) s.prefill(x, positions, prompt.back(), root);

  // Prefill passes through the stages one after another.
  prefill_trace_.clear();
  double t = 0.0;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const double c = cost_.step_cost(prompt.size()) * share_[i];
    prefill_trace_.push_back({0, i + 1, "compute", t, t + c, 1, false, false});
    t += c;
    if (i + 1 < stages_.size()) {
      const double x_ms = cost_.transmit_ms(prompt.size());
      if (x_ms > 0.0) prefill_trace_.push_back({0, i + 1, "transmit", t, t + x_ms, 1, false, false});
      t += x_ms;
    }
  }
  prefill_ms_ = now_ms_ = t;
  if (cfg_.audit) audit();
}

std::optional<std::vector<LayerChild>> Pipeline::draft_level(DraftProvider& draft) {
  try {
    return expand_fixed_width(tree(), cfg_.beam, draft, sequence_, steps_ + 1);
  } catch (const SourceUnavailable& e) {
    if (e.exhausted()) throw;
    return std::nullopt;
  }
}

StepOutcome Pipeline::step(std::optional<std::vector<LayerChild>> new_layer) {
  const SpecTree& current = tree();
  const bool speculative = cfg_.mode == Mode::speculative;
  const std::size_t m = stages_.size();

  StepOutcome out;
  out.step = ++steps_;
  out.start_ms = now_ms_;
  out.work.resize(m);

  // 1. Node-wise computation.
  std::vector<std::size_t> computed(m, 0);
  executor_->run(m, [&](std::size_t i) { computed[i] = stages_[i].compute(); });

  SpecTree grown = current;
  std::optional<std::uint64_t> first_new_id;
  if (speculative && new_layer && !new_layer->empty()) {
    first_new_id = grown.next_id();
    grown = grown.layer_append(*new_layer);
    ++ledger_.injected;
  } else if (speculative) {
    out.stalled = true;
  }

  // 2. Verification and pruning propagation.
  std::optional<SpecTree> next;
  std::vector<PruneStats> prune(m);
  if (const auto* logits = stages_.back().logits_for(grown.id(0))) {
    const TokenId tau = argmax_token(*logits);
    out.verified = tau;
    std::size_t child = grown.size();
    if (grown.level_count() > 1) {
      for (std::size_t j = grown.level_begin(1); j < grown.level_end(1); ++j) {
        if (grown.token(j) == tau) {
          child = j;
          break;
        }
      }
    }
    if (child < grown.size()) {
      out.hit = true;
      next = grown.to_subtree_prune(child).tree;
      ledger_.dropped += grown.level_count() - 1 - next->level_count();
    } else {
      out.flush = grown.size() > 1;
      out.flush_depth = m;
      ledger_.dropped += grown.level_count() - 1;
      next = SpecTree::new_root(tau, model_.vocab(), NodeId{grown.next_id()});
      ++ledger_.injected;
    }
    ++ledger_.retired;
    sequence_.push_back(tau);
    out.emitted = true;

    for (std::size_t i = 0; i < m; ++i) {
      out.work[i].pruned = stages_[i].resident_nodes() > 0;
      prune[i] = stages_[i].apply(*next);
    }
    if (out.hit) {
      for (std::size_t i = 0; i + 1 < m; ++i) out.flush_depth += prune[i].outgoing_emptied ? 1 : 0;
    }
  } else {
    next = std::move(grown);
  }

  // 3. Inter-node transmission.
  for (std::size_t i = m - 1; i-- > 0;) {
    if (auto msg = stages_[i].take_outgoing()) {
      out.work[i].transmitted = msg->snapshot.size();
      stages_[i + 1].accept(std::move(*msg));
    }
  }
  if (out.verified && !out.hit) {
    stages_[0].accept({next->level_snapshot(0), {}});
  } else if (first_new_id) {
    const std::size_t last = next->size() - 1;
    if (to_underlying(next->id(last)) >= *first_new_id) {
      stages_[0].accept({next->level_snapshot(next->level_count() - 1), {}});
    }
  }

  tree_ = std::move(next);
  for (std::size_t i = 0; i < m; ++i) {
    out.work[i].computed = computed[i];
    out.work[i].resident = stages_[i].resident_nodes();
  }
  out.timing = time_step(cost_, share_, out.work, speculative);
  now_ms_ += out.timing.duration_ms;

  if (cfg_.audit) audit();
  return out;
}

void Pipeline::audit() const {
  const SpecTree& t = tree();
  t.validate();
  if (t.token(0) != sequence_.back()) throw InvariantViolation("tree root is not the last verified token");
  if (ledger_.injected != ledger_.retired + ledger_.dropped + t.level_count()) {
    throw InvariantViolation("level ledger does not balance: injected " + std::to_string(ledger_.injected) +
                             ", retired " + std::to_string(ledger_.retired) + ", dropped " +
                             std::to_string(ledger_.dropped) + ", resident " + std::to_string(t.level_count()));
  }
  auto in_tree = [&](NodeId id) { return t.find(id) < t.size(); };
  for (const auto& s : stages_) {
    const std::string where = "stage " + std::to_string(s.index() + 1);
    s.check_alignment();
    if (s.kv().verified_count() + 1 != sequence_.size()) {
      throw InvariantViolation(where + " verified prefix has " + std::to_string(s.kv().verified_count()) +
                               " rows, expected " + std::to_string(sequence_.size() - 1));
    }
    if (const auto& v = s.view()) {
      if (v->size() > t.size()) throw InvariantViolation(where + " view is larger than the tree");
      for (std::size_t j = 0; j < v->size(); ++j) {
        if (v->id(j) != t.id(j) || v->token(j) != t.token(j)) {
          throw InvariantViolation(where + " view is not a prefix of the current tree");
        }
      }
    }
    for (const auto* msg : {&s.inbox(), &s.outgoing()}) {
      if (!*msg) continue;
      for (auto id : (*msg)->snapshot.ids) {
        if (!in_tree(id)) throw InvariantViolation(where + " holds a level from a discarded tree");
      }
    }
  }
}

namespace {

class OracleBackedDraft final : public DraftProvider {
 public:
  OracleBackedDraft(const ToyModel& model, std::span<const TokenId> prompt, SyntheticDraftConfig cfg)
      : oracle_(model, prompt),
        draft_(cfg, model.vocab(), [this](std::span<const TokenId> context) { return oracle_.next_after(context); }) {}

  std::vector<Candidate> propose(const DraftRequest& request) override { return draft_.propose(request); }

 private:
  SequentialDecoder oracle_;
  SyntheticDraft draft_;
};

}  // namespace

std::unique_ptr<DraftProvider> make_synthetic_draft(const ToyModel& model, std::span<const TokenId> prompt,
                                                    SyntheticDraftConfig cfg) {
  return std::make_unique<OracleBackedDraft>(model, prompt, cfg);
}

RunResult run_pipeline(const ToyModel& model, const PipelineConfig& cfg, const CostModel& cost,
                       DraftProvider* draft, std::span<const TokenId> prompt, std::size_t max_tokens,
                       Executor* executor) {
  Pipeline pipe(model, cfg, cost, executor);
  pipe.prefill(prompt);

  RunResult res;
  res.trace = pipe.prefill_trace();
  RunCounters counters;
  std::vector<std::uint64_t> emit_steps;
  std::vector<double> emit_ms;
  const std::size_t m = pipe.stage_count();
  const std::uint64_t step_cap = max_tokens * (m + 2) + 4 * m + 16;

  while (res.tokens.size() < max_tokens) {
    std::optional<std::vector<LayerChild>> layer;
    if (cfg.mode == Mode::speculative && draft) {
      try {
        layer = pipe.draft_level(*draft);
      } catch (const SourceUnavailable&) {
        res.early_stop = true;
        break;
      }
    }
    StepOutcome out = pipe.step(std::move(layer));
    ++counters.steps;
    if (out.verified) {
      ++counters.verifications;
      counters.hits += out.hit ? 1 : 0;
      counters.flushes += out.flush ? 1 : 0;
    }
    counters.stalls += out.stalled ? 1 : 0;
    if (out.emitted) {
      res.tokens.push_back(*out.verified);
      emit_steps.push_back(out.step);
      emit_ms.push_back(out.start_ms + out.timing.duration_ms);
    }
    append_trace(res.trace, out.step, out.start_ms, out.timing, out.work, cost.overlap_prune_transmit, out.hit,
                 out.flush);
    res.outcomes.push_back(std::move(out));
    if (pipe.steps() > step_cap) throw InvariantViolation("pipeline stopped emitting tokens");
  }
  res.metrics = compute_metrics(emit_steps, emit_ms, counters, pipe.now_ms());
  return res;
}

}  // namespace treepipe

// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/batcher.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <istream>

#include <json.hpp>

namespace treepipe {

bool RaggedBatch::well_formed() const {
  const std::size_t n = offsets.size();
  if (request_ids.size() != n || lengths.size() != n || level_offsets.size() != n) return false;
  if (probs.size() != total() || ids.size() != total() || mask.size() != total()) return false;
  std::size_t expect = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (offsets[r] != expect || lengths[r] == 0) return false;
    if (r > 0 && offsets[r] <= offsets[r - 1]) return false;
    expect += lengths[r];
  }
  if (expect != total()) return false;
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = offsets[r]; i < offsets[r] + lengths[r]; ++i) {
      if (mask[i].size() != total()) return false;
      for (auto j : mask[i].indices()) {
        if (j < offsets[r] || j >= offsets[r] + lengths[r]) return false;
      }
    }
  }
  return true;
}

RaggedBatch pack(std::span<const std::size_t> request_ids, std::span<const SpecTree* const> trees,
                 std::size_t max_nodes) {
  if (trees.empty()) throw ContractViolation("cannot pack an empty batch");
  if (request_ids.size() != trees.size()) throw ShapeError("request ids and trees differ in length");
  std::size_t total = 0;
  for (const auto* t : trees) total += t->size();
  if (max_nodes > 0 && total > max_nodes) {
    throw CapacityError("batch of " + std::to_string(total) + " nodes exceeds the budget of " +
                        std::to_string(max_nodes));
  }

  RaggedBatch b;
  b.request_ids.assign(request_ids.begin(), request_ids.end());
  std::size_t offset = 0;
  for (const auto* t : trees) {
    b.offsets.push_back(offset);
    b.lengths.push_back(t->size());
    b.level_offsets.emplace_back(t->level_offsets().begin(), t->level_offsets().end());
    b.tokens.insert(b.tokens.end(), t->tokens().begin(), t->tokens().end());
    b.probs.insert(b.probs.end(), t->probs().begin(), t->probs().end());
    b.ids.insert(b.ids.end(), t->ids().begin(), t->ids().end());
    for (std::size_t i = 0; i < t->size(); ++i) {
      BitVector row(total);
      for (auto j : t->mask_row_bits(i).indices()) row.set(offset + j);
      b.mask.push_back(std::move(row));
    }
    offset += t->size();
  }
  return b;
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

}  // namespace

std::vector<SpecTree> unpack(const RaggedBatch& batch, std::uint32_t vocab) {
  if (!batch.well_formed()) throw StructuralError("ragged batch is malformed");
  std::vector<SpecTree> out;
  for (std::size_t r = 0; r < batch.segments(); ++r) {
    const std::size_t off = batch.offsets[r];
    const std::size_t n = batch.lengths[r];
    std::vector<std::uint8_t> bytes;
    put<std::uint32_t>(bytes, static_cast<std::uint32_t>(n));
    put<std::uint32_t>(bytes, static_cast<std::uint32_t>(batch.level_offsets[r].size()));
    for (std::size_t i = 0; i < n; ++i) put<std::uint32_t>(bytes, batch.tokens[off + i].value);
    for (std::size_t i = 0; i < n; ++i) put<double>(bytes, batch.probs[off + i]);
    for (auto lo : batch.level_offsets[r]) put<std::uint32_t>(bytes, static_cast<std::uint32_t>(lo));
    const std::size_t row_bytes = (n + 7) / 8;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::uint8_t> row(row_bytes, 0);
      for (std::size_t j = 0; j < n; ++j) {
        if (batch.mask[off + i].test(off + j)) row[j / 8] |= static_cast<std::uint8_t>(1U << (j % 8));
      }
      bytes.insert(bytes.end(), row.begin(), row.end());
    }
    out.push_back(SpecTree::decode(bytes, vocab));
  }
  return out;
}

std::vector<std::size_t> split_width(std::size_t w_total, std::size_t active) {
  std::vector<std::size_t> out;
  if (active == 0) return out;
  const std::size_t base = w_total / active;
  const std::size_t extra = w_total % active;
  for (std::size_t i = 0; i < active; ++i) out.push_back(std::max<std::size_t>(1, base + (i < extra ? 1 : 0)));
  return out;
}

std::vector<WorkloadRequest> parse_workload(std::istream& in, std::uint32_t vocab) {
  std::vector<WorkloadRequest> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      WorkloadRequest r;
      r.arrival_step = j.at("arrival_step").get<std::uint64_t>();
      r.max_new_tokens = j.at("max_new_tokens").get<std::size_t>();
      for (const auto& t : j.at("prompt_tokens")) {
        const auto v = t.get<std::uint32_t>();
        if (v >= vocab) throw ParseError("prompt token " + std::to_string(v) + " outside vocabulary", line_no);
        r.prompt.emplace_back(v);
      }
      if (r.prompt.empty()) throw ParseError("empty prompt", line_no);
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed workload: ") + e.what(), line_no);
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const WorkloadRequest& a, const WorkloadRequest& b) { return a.arrival_step < b.arrival_step; });
  return out;
}

std::vector<WorkloadRequest> load_workload(const std::string& path, std::uint32_t vocab) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open workload " + path);
  return parse_workload(in, vocab);
}

DraftFactory synthetic_draft_factory(const ToyModel& model, SyntheticDraftConfig cfg) {
  return [&model, cfg](const RequestSlot& slot) {
    SyntheticDraftConfig c = cfg;
    c.seed = cfg.seed + slot.id;
    return make_synthetic_draft(model, slot.request.prompt, c);
  };
}

BatchedStep batched_step(std::span<Pipeline* const> pipes, std::span<DraftProvider* const> drafts,
                         std::span<const std::size_t> widths, const CostModel& cost) {
  if (pipes.empty()) throw ContractViolation("batched_step needs at least one request");
  if (drafts.size() != pipes.size() || widths.size() != pipes.size()) {
    throw ShapeError("batched_step inputs differ in length");
  }
  std::vector<std::size_t> ids(pipes.size());
  std::vector<const SpecTree*> trees;
  for (std::size_t r = 0; r < pipes.size(); ++r) {
    ids[r] = r;
    trees.push_back(&pipes[r]->tree());
  }
  if (!pack(ids, trees).well_formed()) throw InvariantViolation("packed batch mask is not block-diagonal");

  BatchedStep out;
  const std::size_t m = pipes[0]->stage_count();
  out.work.resize(m);
  bool drafted = false;
  for (std::size_t r = 0; r < pipes.size(); ++r) {
    Pipeline& p = *pipes[r];
    if (p.stage_count() != m) throw ShapeError("batched pipelines differ in stage count");
    p.set_width(widths[r]);
    std::optional<std::vector<LayerChild>> layer;
    if (p.config().mode == Mode::speculative) {
      drafted = true;
      if (drafts[r]) {
        try {
          layer = p.draft_level(*drafts[r]);
        } catch (const SourceUnavailable&) {
          layer.reset();
        }
      }
    }
    StepOutcome o = p.step(std::move(layer));
    for (std::size_t i = 0; i < m; ++i) {
      out.work[i].computed += o.work[i].computed;
      out.work[i].resident += o.work[i].resident;
      out.work[i].pruned = out.work[i].pruned || o.work[i].pruned;
      out.work[i].transmitted += o.work[i].transmitted;
    }
    out.outcomes.push_back(std::move(o));
  }
  out.timing = time_step(cost, pipes[0]->layer_share(), out.work, drafted, pipes.size());
  return out;
}

Batcher::Batcher(const ToyModel& model, PipelineConfig pipeline, CostModel cost, BatchConfig batch,
                 DraftFactory drafts, Executor* executor)
    : model_(model),
      pipeline_(std::move(pipeline)),
      cost_(cost),
      batch_(batch),
      drafts_(std::move(drafts)),
      executor_(executor) {
  if (batch_.max_batch < 1) throw ConfigError("batch size B must be >= 1");
  if (batch_.w_total < 1) throw ConfigError("w_total must be >= 1");
  pipeline_.validate(model_.layer_count());
  cost_.validate();
}

void Batcher::submit(WorkloadRequest request) {
  auto slot = std::make_unique<RequestSlot>();
  slot->id = slots_.size();
  slot->request = std::move(request);
  auto it = std::upper_bound(pending_.begin(), pending_.end(), slot->request.arrival_step,
                             [](std::uint64_t a, const RequestSlot* s) { return a < s->request.arrival_step; });
  pending_.insert(it, slot.get());
  slots_.push_back(std::move(slot));
}

void Batcher::admit() {
  while (running_.size() < batch_.max_batch && !queue_.empty()) {
    if (batch_.max_batch_nodes > 0) {
      std::size_t nodes = 1;
      for (const auto* s : running_) nodes += s->pipeline->tree().size();
      if (nodes > batch_.max_batch_nodes && !running_.empty()) break;
    }
    RequestSlot* slot = queue_.front();
    queue_.pop_front();
    slot->state = RequestState::prefilling;
    slot->pipeline = std::make_unique<Pipeline>(model_, pipeline_, cost_, executor_);
    slot->pipeline->prefill(slot->request.prompt);
    slot->draft = drafts_ ? drafts_(*slot) : nullptr;
    slot->state = RequestState::decoding;
    running_.push_back(slot);
  }
}

bool Batcher::tick() {
  while (!pending_.empty() && pending_.front()->request.arrival_step <= tick_) {
    queue_.push_back(pending_.front());
    pending_.pop_front();
    ++arrived_;
  }
  if (running_.empty() && queue_.empty() && pending_.empty()) return false;

  const double start = now_ms_;
  const std::size_t before = running_.size();
  admit();
  double prefill = 0.0;
  for (std::size_t r = before; r < running_.size(); ++r) {
    running_[r]->admitted_ms = start;
    prefill += running_[r]->pipeline->prefill_ms();
  }

  auto finish = [&](RequestSlot* s, double at) {
    s->state = RequestState::done;
    s->finished_ms = at;
    s->pipeline.reset();
    s->draft.reset();
    ++completed_;
  };

  double end = start + prefill;
  std::vector<Pipeline*> pipes;
  std::vector<DraftProvider*> drafts;
  std::vector<RequestSlot*> stepping;
  for (auto* s : running_) {
    if (s->emitted.size() >= s->request.max_new_tokens) {
      finish(s, end);
      continue;
    }
    pipes.push_back(s->pipeline.get());
    drafts.push_back(s->draft.get());
    stepping.push_back(s);
  }

  if (!pipes.empty()) {
    const auto widths = split_width(batch_.w_total, pipes.size());
    const BatchedStep bs = batched_step(pipes, drafts, widths, cost_);
    end += bs.timing.duration_ms;
    for (std::size_t r = 0; r < stepping.size(); ++r) {
      RequestSlot* s = stepping[r];
      const StepOutcome& o = bs.outcomes[r];
      ++s->counters.steps;
      if (o.verified) {
        ++s->counters.verifications;
        s->counters.hits += o.hit ? 1 : 0;
        s->counters.flushes += o.flush ? 1 : 0;
      }
      s->counters.stalls += o.stalled ? 1 : 0;
      if (o.emitted) {
        s->emitted.push_back(*o.verified);
        s->emit_steps.push_back(o.step);
        s->emit_ms.push_back(end);
      }
      if (s->emitted.size() >= s->request.max_new_tokens) finish(s, end);
    }
  }
  std::erase_if(running_, [](const RequestSlot* s) { return s->state == RequestState::done; });

  now_ms_ = end;
  ++tick_;
  check_conservation();
  return true;
}

void Batcher::run() {
  while (tick()) {
  }
}

void Batcher::check_conservation() const {
  if (arrived_ != completed_ + running_.size() + queue_.size()) {
    throw InvariantViolation("scheduler lost track of a request");
  }
  if (running_.size() > batch_.max_batch) throw InvariantViolation("scheduler exceeded its batch size");
}

std::string ServeReport::to_json() const {
  nlohmann::ordered_json j;
  j["batch"] = batch;
  j["metrics"] = nlohmann::ordered_json::parse(metrics.to_json());
  j["throughput_tps"] = metrics.throughput_tps;
  j["p99_tbt"] = metrics.tbt_p99;
  j["per_request_tbt"] = per_request_tbt;
  j["requests"] = nlohmann::ordered_json::array();
  for (const auto& r : requests) {
    nlohmann::ordered_json rj;
    rj["id"] = r.id;
    std::vector<std::uint32_t> toks;
    for (auto t : r.tokens) toks.push_back(t.value);
    rj["tokens"] = toks;
    rj["metrics"] = nlohmann::ordered_json::parse(r.metrics.to_json());
    j["requests"].push_back(std::move(rj));
  }
  return j.dump();
}

ServeReport serve_workload(const ToyModel& model, const PipelineConfig& pipeline, const CostModel& cost,
                           BatchConfig batch, const DraftFactory& drafts, std::span<const WorkloadRequest> workload,
                           Executor* executor) {
  Batcher b(model, pipeline, cost, batch, drafts, executor);
  for (const auto& w : workload) b.submit(w);
  b.run();

  ServeReport rep;
  rep.batch = batch.max_batch;
  std::vector<double> gaps;
  RunCounters pooled;
  std::size_t tokens = 0;
  double weighted_spt = 0.0;
  for (const auto& s : b.slots()) {
    RequestReport rr;
    rr.id = s->id;
    rr.tokens = s->emitted;
    rr.metrics = compute_metrics(s->emit_steps, s->emit_ms, s->counters, s->finished_ms - s->admitted_ms);
    const auto g = tbt_samples(s->emit_ms);
    gaps.insert(gaps.end(), g.begin(), g.end());
    pooled.verifications += s->counters.verifications;
    pooled.hits += s->counters.hits;
    pooled.flushes += s->counters.flushes;
    pooled.stalls += s->counters.stalls;
    tokens += rr.tokens.size();
    weighted_spt += rr.metrics.steps_per_token * static_cast<double>(rr.tokens.size());
    rep.per_request_tbt.push_back(rr.metrics.tbt_mean_ms);
    rep.requests.push_back(std::move(rr));
  }

  RunMetrics& m = rep.metrics;
  m.tokens = tokens;
  m.steps = b.ticks();
  m.stalls = pooled.stalls;
  m.flush_count = pooled.flushes;
  m.total_ms = b.now_ms();
  m.hit_rate = pooled.verifications == 0
                   ? 0.0
                   : static_cast<double>(pooled.hits) / static_cast<double>(pooled.verifications);
  m.throughput_tps = m.total_ms > 0.0 ? static_cast<double>(tokens) / (m.total_ms / 1000.0) : 0.0;
  m.steps_per_token = tokens == 0 ? 0.0 : weighted_spt / static_cast<double>(tokens);
  if (!gaps.empty()) {
    double sum = 0.0;
    for (double g : gaps) sum += g;
    m.tbt_mean_ms = sum / static_cast<double>(gaps.size());
    m.tbt_p50 = percentile(gaps, 50.0);
    m.tbt_p99 = percentile(gaps, 99.0);
  }
  return rep;
}

}  // namespace treepipe

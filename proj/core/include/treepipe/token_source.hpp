// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "treepipe/spec_tree.hpp"
#include "treepipe/types.hpp"

namespace treepipe {

struct Candidate {
  TokenId token;
  double prob = 0.0;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

/// The token source could not deliver candidates. `exhausted()` means it
/// never will again (a replayed trace ran out); otherwise the pipeline
/// treats the step as a stall.
class SourceUnavailable : public Error {
 public:
  SourceUnavailable(const std::string& what, bool exhausted) : Error(what), exhausted_(exhausted) {}
  bool exhausted() const noexcept { return exhausted_; }

 private:
  bool exhausted_;
};

struct DraftRequest {
  std::uint64_t step = 0;
  std::size_t frontier_node = 0;
  /// Verified tokens followed by the root path of the frontier node; its last
  /// element is the frontier token.
  std::span<const TokenId> context;
  std::size_t k = 0;

  TokenId frontier_token() const { return context.back(); }
};

/// Pluggable speculative-token generator. Returns up to k candidates with
/// strictly descending probs in (0, 1] summing to at most 1 and distinct
/// token ids. Called from a single thread.
class DraftProvider {
 public:
  virtual ~DraftProvider() = default;
  virtual std::vector<Candidate> propose(const DraftRequest& request) = 0;
};

struct SyntheticDraftConfig {
  double top1_hit = 0.62;
  double rank_decay = 0.87;
  double miss_prob = 0.005;
  std::uint64_t seed = 0;

  /// Rank-decay that puts the cumulative hit rate at `target` for top-`k`.
  static double decay_for_hit(double top1_hit, double miss_prob, std::size_t k, double target);
  /// top1 = 0.62, miss = 0.005 and hit@32 = 0.99.
  static SyntheticDraftConfig calibrated(std::uint64_t seed);

  /// Closed-form probability that the true token is among the top k.
  double hit_at(std::size_t k) const;

  void validate() const;
};

/// Draws k candidates for one frontier node. When `oracle_next` is present it
/// is placed at a rank drawn from the configured distribution (or omitted);
/// the remaining slots hold distinct pseudo-random non-oracle ids.
/// Deterministic in (cfg.seed, call_index).
std::vector<Candidate> synthetic_draft(const SyntheticDraftConfig& cfg, std::uint32_t vocab,
                                       std::optional<TokenId> oracle_next, std::size_t k,
                                       std::uint64_t call_index);

/// Returns the true next token for a context, if known.
using NextTokenOracle = std::function<std::optional<TokenId>(std::span<const TokenId> context)>;

class SyntheticDraft final : public DraftProvider {
 public:
  SyntheticDraft(SyntheticDraftConfig cfg, std::uint32_t vocab, NextTokenOracle oracle);

  std::vector<Candidate> propose(const DraftRequest& request) override;

  std::uint64_t calls() const noexcept { return calls_; }

 private:
  SyntheticDraftConfig cfg_;
  std::uint32_t vocab_;
  NextTokenOracle oracle_;
  std::uint64_t calls_ = 0;
};

/// One line of a draft trace file (JSON Lines).
struct DraftRecord {
  std::uint64_t step = 0;
  std::size_t frontier_node = 0;
  std::vector<Candidate> candidates;
};

std::vector<DraftRecord> parse_draft_trace(std::istream& in);
std::vector<DraftRecord> load_draft_trace(const std::string& path);
std::string format_draft_record(const DraftRecord& record);

/// Replays recorded candidate lists in order.
class ReplayDraft final : public DraftProvider {
 public:
  explicit ReplayDraft(std::vector<DraftRecord> records);

  std::vector<Candidate> propose(const DraftRequest& request) override;

  std::size_t remaining() const noexcept { return records_.size() - next_; }

 private:
  std::vector<DraftRecord> records_;
  std::size_t next_ = 0;
};

std::unique_ptr<DraftProvider> replay_draft(const std::string& path);

/// Forwards to another provider and appends every answer to a JSONL stream.
class RecordingDraft final : public DraftProvider {
 public:
  RecordingDraft(DraftProvider& inner, std::ostream& out);

  std::vector<Candidate> propose(const DraftRequest& request) override;

 private:
  DraftProvider& inner_;
  std::ostream& out_;
};

struct BeamConfig {
  std::size_t w = 64;
  std::size_t k = 16;

  void validate() const;
};

/// Fixed-width expansion of the tree's bottom level: k candidates per
/// frontier node, ranked by cumulative probability, best min(w, total) kept.
/// Ties rank by lower parent index, then lower token id. The result is in
/// layer_append order.
std::vector<LayerChild> expand_fixed_width(const SpecTree& tree, const BeamConfig& beam, DraftProvider& draft,
                                           std::span<const TokenId> verified, std::uint64_t step);

}  // namespace treepipe

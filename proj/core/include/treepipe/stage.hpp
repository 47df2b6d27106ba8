// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "treepipe/kv_cache.hpp"
#include "treepipe/spec_tree.hpp"
#include "treepipe/toy_model.hpp"

namespace treepipe {

/// One tree level travelling to the next stage. Embeddings are empty for
/// levels entering stage 1, which embeds the tokens itself.
struct LevelMessage {
  LevelSnapshot snapshot;
  Embeddings embeddings;
};

struct PruneStats {
  bool had_outgoing = false;
  bool outgoing_emptied = false;
};

/// State of one pipeline device.
///
/// The local view is a BFS prefix of the current global tree: every level this
/// stage has computed. Speculative KV row j belongs to view node j, so a view
/// mask row selects attention keys directly.
class Stage {
 public:
  Stage(const ToyModel& model, std::size_t index, LayerRange layers, bool last);

  std::size_t index() const noexcept { return index_; }
  LayerRange layers() const noexcept { return layers_; }
  bool is_last() const noexcept { return last_; }

  const std::optional<SpecTree>& view() const noexcept { return view_; }
  const KvCache& kv() const noexcept { return kv_; }
  const std::optional<LevelMessage>& inbox() const noexcept { return inbox_; }
  const std::optional<LevelMessage>& outgoing() const noexcept { return outgoing_; }
  std::size_t resident_nodes() const noexcept { return view_ ? view_->size() : 0; }

  /// Causal pass over the prompt. `x` holds this stage's input on entry and
  /// its output on return. The last prompt row is then re-tagged as the
  /// speculative root `root_id`.
  void prefill(Embeddings& x, std::span<const std::uint64_t> positions, TokenId root_token, NodeId root_id);

  /// Runs the resident layers over the inbox level, if any. Returns the
  /// number of rows computed.
  std::size_t compute();

  /// Applies a verification outcome: the old root becomes verified and
  /// everything outside `next` is discarded from the view, KV cache, outgoing
  /// level and (last stage) stored logits.
  PruneStats apply(const SpecTree& next);

  std::optional<LevelMessage> take_outgoing();
  void accept(LevelMessage message);

  /// Final-layer logits for a node; last stage only.
  const std::vector<double>* logits_for(NodeId id) const;

  /// Throws InvariantViolation if view and KV cache disagree.
  void check_alignment() const;

 private:
  const ToyModel& model_;
  std::size_t index_;
  LayerRange layers_;
  bool last_;

  std::optional<SpecTree> view_;
  KvCache kv_;
  std::optional<LevelMessage> inbox_;
  std::optional<LevelMessage> outgoing_;
  std::map<NodeId, std::vector<double>> logits_;
};

}  // namespace treepipe

// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/stage.hpp"

#include <string>

namespace treepipe {

Stage::Stage(const ToyModel& model, std::size_t index, LayerRange layers, bool last)
    : model_(model), index_(index), layers_(layers), last_(last), kv_(layers.begin, layers.size(), model.dim()) {}

void Stage::prefill(Embeddings& x, std::span<const std::uint64_t> positions, TokenId root_token, NodeId root_id) {
  kv_ = KvCache(layers_.begin, layers_.size(), model_.dim());
  view_.reset();
  inbox_.reset();
  outgoing_.reset();
  logits_.clear();

  x = forward_causal(model_, layers_, x, positions, kv_);
  kv_.demote_last(root_id);
  view_ = SpecTree::new_root(root_token, model_.vocab(), root_id);
  if (last_) logits_[root_id] = model_.logits(x.row(x.rows() - 1));
}

std::size_t Stage::compute() {
  if (!inbox_) return 0;
  LevelMessage msg = std::move(*inbox_);
  inbox_.reset();
  const LevelSnapshot& s = msg.snapshot;

  try {
    view_ = view_ ? view_->append_snapshot(s) : SpecTree::from_root_snapshot(s, model_.vocab());
  } catch (const Error& e) {
    throw InvariantViolation("stage " + std::to_string(index_ + 1) + " cannot accept level: " + e.what());
  }
  if (kv_.speculative_count() != s.first) {
    throw InvariantViolation("stage " + std::to_string(index_ + 1) + " kv cache is out of step with its view");
  }

  std::vector<std::uint64_t> positions(s.size(), kv_.verified_count() + s.level);
  const Embeddings in = index_ == 0 ? model_.embed(s.tokens, positions) : std::move(msg.embeddings);
  Embeddings out = forward_layers(model_, layers_, in, s.ids, positions, s.rows, kv_);

  if (last_) {
    for (std::size_t r = 0; r < s.size(); ++r) logits_[s.ids[r]] = model_.logits(out.row(r));
  } else {
    outgoing_ = LevelMessage{s, std::move(out)};
  }
  return s.size();
}

PruneStats Stage::apply(const SpecTree& next) {
  PruneStats stats;
  stats.had_outgoing = outgoing_.has_value();

  if (view_) {
    const SpecTree& view = *view_;
    const auto slots = kv_.slots();
    if (kv_.speculative_count() == 0 || slots[kv_.verified_count()].node != view.id(0)) {
      throw InvariantViolation("stage " + std::to_string(index_ + 1) + " lost its root row");
    }
    kv_.promote(1);

    BitVector keep_view(view.size());
    for (std::size_t j = 1; j < view.size(); ++j) {
      if (next.find(view.id(j)) < next.size()) keep_view.set(j);
    }
    BitVector keep_kv(kv_.size());
    for (std::size_t r = 0; r < kv_.verified_count(); ++r) keep_kv.set(r);
    for (std::size_t j = 1; j < view.size(); ++j) {
      if (keep_view.test(j)) keep_kv.set(kv_.verified_count() + j - 1);
    }
    kv_ = kv_prune(kv_, keep_kv);
    if (keep_view.any()) {
      view_ = view.restrict_to(keep_view);
    } else {
      view_.reset();
    }
  }

  for (auto it = logits_.begin(); it != logits_.end();) {
    it = next.find(it->first) < next.size() ? std::next(it) : logits_.erase(it);
  }

  if (outgoing_) {
    const LevelSnapshot& s = outgoing_->snapshot;
    BitVector keep(s.size());
    for (std::size_t r = 0; r < s.size(); ++r) {
      if (next.find(s.ids[r]) < next.size()) keep.set(r);
    }
    if (!keep.any()) {
      outgoing_.reset();
      stats.outgoing_emptied = true;
    } else {
      if (!view_) throw InvariantViolation("outgoing level survived without its view");
      Embeddings kept = outgoing_->embeddings.select(keep);
      LevelSnapshot snap = view_->level_snapshot(view_->level_count() - 1);
      for (std::size_t r = 0, a = 0; r < s.size(); ++r) {
        if (keep.test(r) && snap.ids.at(a++) != s.ids[r]) {
          throw InvariantViolation("outgoing level does not match the pruned view");
        }
      }
      outgoing_ = LevelMessage{std::move(snap), std::move(kept)};
    }
  }
  check_alignment();
  return stats;
}

std::optional<LevelMessage> Stage::take_outgoing() {
  auto out = std::move(outgoing_);
  outgoing_.reset();
  return out;
}

void Stage::accept(LevelMessage message) {
  if (inbox_) throw InvariantViolation("stage " + std::to_string(index_ + 1) + " received two levels in one step");
  inbox_ = std::move(message);
}

const std::vector<double>* Stage::logits_for(NodeId id) const {
  const auto it = logits_.find(id);
  return it == logits_.end() ? nullptr : &it->second;
}

void Stage::check_alignment() const {
  const auto slots = kv_.slots();
  const std::size_t resident = resident_nodes();
  if (kv_.speculative_count() != resident) {
    throw InvariantViolation("stage " + std::to_string(index_ + 1) + " has " +
                             std::to_string(kv_.speculative_count()) + " speculative kv rows for " +
                             std::to_string(resident) + " resident nodes");
  }
  for (std::size_t j = 0; j < resident; ++j) {
    if (slots[kv_.verified_count() + j].node != view_->id(j)) {
      throw InvariantViolation("stage " + std::to_string(index_ + 1) + " kv row " + std::to_string(j) +
                               " does not belong to view node " + std::to_string(j));
    }
  }
}

}  // namespace treepipe

// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/kv_cache.hpp"

#include <string>

namespace treepipe {

KvCache::KvCache(std::size_t first_layer, std::size_t layer_count, std::size_t dim)
    : first_layer_(first_layer), dim_(dim), keys_(layer_count), values_(layer_count) {}

std::size_t KvCache::layer_index(std::size_t layer) const {
  if (layer < first_layer_ || layer >= first_layer_ + keys_.size()) {
    throw ShapeError("layer " + std::to_string(layer) + " not held by this cache");
  }
  return layer - first_layer_;
}

std::span<const double> KvCache::key(std::size_t layer, std::size_t row) const {
  return {keys_[layer_index(layer)].data() + row * dim_, dim_};
}

std::span<const double> KvCache::value(std::size_t layer, std::size_t row) const {
  return {values_[layer_index(layer)].data() + row * dim_, dim_};
}

void KvCache::push_slot(KvSlot slot, bool verified) {
  if (verified && verified_ != slots_.size()) {
    throw ContractViolation("verified rows must precede speculative rows");
  }
  slots_.push_back(slot);
  if (verified) ++verified_;
}

void KvCache::append_row(std::size_t layer, std::span<const double> k, std::span<const double> v) {
  if (k.size() != dim_ || v.size() != dim_) throw ShapeError("kv row has wrong width");
  const auto l = layer_index(layer);
  keys_[l].insert(keys_[l].end(), k.begin(), k.end());
  values_[l].insert(values_[l].end(), v.begin(), v.end());
}

KvCache KvCache::pruned(const BitVector& keep) const {
  if (keep.size() != slots_.size()) throw ShapeError("keep mask does not cover every cache row");
  for (std::size_t i = 0; i < verified_; ++i) {
    if (!keep.test(i)) throw ContractViolation("kv prune would drop verified row " + std::to_string(i));
  }
  KvCache out(first_layer_, keys_.size(), dim_);
  out.verified_ = verified_;
  const auto rows = keep.indices();
  for (auto r : rows) out.slots_.push_back(slots_[r]);
  for (std::size_t l = 0; l < keys_.size(); ++l) {
    out.keys_[l].reserve(rows.size() * dim_);
    out.values_[l].reserve(rows.size() * dim_);
    for (auto r : rows) {
      const auto* k = keys_[l].data() + r * dim_;
      const auto* v = values_[l].data() + r * dim_;
      out.keys_[l].insert(out.keys_[l].end(), k, k + dim_);
      out.values_[l].insert(out.values_[l].end(), v, v + dim_);
    }
  }
  return out;
}

void KvCache::promote(std::size_t n) {
  if (n > speculative_count()) throw ContractViolation("cannot promote more rows than are speculative");
  verified_ += n;
}

void KvCache::demote_last(NodeId node) {
  if (verified_ == 0 || verified_ != slots_.size()) {
    throw ContractViolation("demote_last needs a cache with only verified rows");
  }
  --verified_;
  slots_.back().node = node;
}

std::optional<std::size_t> KvCache::find(NodeId node) const noexcept {
  for (std::size_t i = slots_.size(); i-- > 0;) {
    if (slots_[i].node == node) return i;
  }
  return std::nullopt;
}

KvCache kv_prune(const KvCache& kv, const BitVector& keep) { return kv.pruned(keep); }

}  // namespace treepipe

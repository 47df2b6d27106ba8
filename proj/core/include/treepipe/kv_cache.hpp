// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "treepipe/bit_vector.hpp"
#include "treepipe/types.hpp"

namespace treepipe {

/// Alignment entry for one cache row.
struct KvSlot {
  std::uint64_t position = 0;
  std::optional<NodeId> node;  // empty for rows that entered as verified

  friend bool operator==(const KvSlot&, const KvSlot&) = default;
};

/// Per-layer keys and values for a contiguous layer range.
///
/// Rows [0, verified_count()) form the verified prefix. Rows after it belong
/// to speculative tree nodes in the owning stage's BFS order, so speculative
/// row j lines up with column j of the stage's local tree mask.
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t first_layer, std::size_t layer_count, std::size_t dim);

  std::size_t first_layer() const noexcept { return first_layer_; }
  std::size_t layer_count() const noexcept { return keys_.size(); }
  std::size_t dim() const noexcept { return dim_; }

  std::size_t size() const noexcept { return slots_.size(); }
  std::size_t verified_count() const noexcept { return verified_; }
  std::size_t speculative_count() const noexcept { return slots_.size() - verified_; }
  std::span<const KvSlot> slots() const noexcept { return slots_; }

  std::span<const double> key(std::size_t layer, std::size_t row) const;
  std::span<const double> value(std::size_t layer, std::size_t row) const;

  /// Layer index is absolute; rows appended to every layer must match slots.
  void push_slot(KvSlot slot, bool verified);
  void append_row(std::size_t layer, std::span<const double> k, std::span<const double> v);

  /// Removes rows whose bit in `keep` (length size()) is clear. Throws
  /// ContractViolation if a verified row would be dropped.
  KvCache pruned(const BitVector& keep) const;

  /// Turns the first `n` speculative rows into verified rows.
  void promote(std::size_t n);

  /// Turns the last verified row back into a speculative row owned by `node`.
  void demote_last(NodeId node);

  /// Row index for a node, if cached.
  std::optional<std::size_t> find(NodeId node) const noexcept;

  friend bool operator==(const KvCache&, const KvCache&) = default;

 private:
  std::size_t layer_index(std::size_t layer) const;

  std::size_t first_layer_ = 0;
  std::size_t dim_ = 0;
  std::size_t verified_ = 0;
  std::vector<KvSlot> slots_;
  std::vector<std::vector<double>> keys_;
  std::vector<std::vector<double>> values_;
};

/// Free-function form used by the pipeline: `keep` covers every row.
KvCache kv_prune(const KvCache& kv, const BitVector& keep);

}  // namespace treepipe

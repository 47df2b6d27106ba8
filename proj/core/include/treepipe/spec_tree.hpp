// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "treepipe/bit_vector.hpp"
#include "treepipe/types.hpp"

namespace treepipe {

/// Bit set over the nodes of one tree version (descendant-or-self after a
/// column extraction, ancestor-or-self after a row extraction).
using SurvivorMask = BitVector;

/// One entry of a new level handed to SpecTree::layer_append.
struct LayerChild {
  std::size_t parent_index = 0;
  TokenId token;
  double prob = 0.0;

  friend bool operator==(const LayerChild&, const LayerChild&) = default;
};

/// Everything a downstream stage needs to extend its local copy of the tree
/// mask by one level: the level's nodes and their mask rows restricted to
/// columns [0, first + tokens.size()).
struct LevelSnapshot {
  std::size_t level = 0;
  std::size_t first = 0;
  std::vector<TokenId> tokens;
  std::vector<double> probs;
  std::vector<NodeId> ids;
  std::vector<BitVector> rows;

  std::size_t size() const noexcept { return tokens.size(); }
};

struct PruneResult;

/// Dynamic speculative token tree.
///
/// Nodes are stored in BFS order; index 0 is the root (the last verified
/// token). The mask is lower-triangular with a unit diagonal and bit (i, j)
/// set exactly when j is on the root path of i. Values are immutable: every
/// update returns a new version, so snapshots taken by in-flight stages are
/// never observed changing.
///
/// Each node also carries a NodeId that is preserved across versions.
class SpecTree {
 public:
  /// Degenerate single-node tree. Throws InvalidToken if token >= vocab.
  static SpecTree new_root(TokenId token, std::uint32_t vocab, NodeId id = NodeId{0});

  /// Builds a tree holding exactly one level-0 snapshot.
  static SpecTree from_root_snapshot(const LevelSnapshot& snapshot, std::uint32_t vocab);

  std::size_t size() const noexcept { return tokens_.size(); }
  std::uint32_t vocab() const noexcept { return vocab_; }
  std::size_t level_count() const noexcept { return level_offsets_.size(); }

  std::span<const TokenId> tokens() const noexcept { return tokens_; }
  std::span<const double> probs() const noexcept { return probs_; }
  std::span<const NodeId> ids() const noexcept { return ids_; }
  std::span<const std::size_t> level_offsets() const noexcept { return level_offsets_; }

  TokenId token(std::size_t i) const { return tokens_.at(i); }
  double prob(std::size_t i) const { return probs_.at(i); }
  NodeId id(std::size_t i) const { return ids_.at(i); }

  bool mask(std::size_t i, std::size_t j) const;
  const BitVector& mask_row_bits(std::size_t i) const { return rows_.at(i); }

  /// Parent index of node i (i > 0), derived from the mask.
  std::size_t parent(std::size_t i) const;
  std::size_t depth(std::size_t i) const;

  std::size_t level_begin(std::size_t level) const;
  std::size_t level_end(std::size_t level) const;

  /// Returns the index holding `id`, or size() if absent.
  std::size_t find(NodeId id) const noexcept;

  /// Appends one level. Children must all hang off the current bottom level
  /// and be sorted by (parent asc, prob desc, token asc). New nodes receive
  /// consecutive NodeIds starting at next_id().
  SpecTree layer_append(std::span<const LayerChild> children) const;

  /// Reroots at `new_root`, keeping exactly its descendant-or-self set.
  PruneResult to_subtree_prune(std::size_t new_root) const;

  /// Keeps the nodes flagged in `keep` (must be closed under "parent of a
  /// kept non-root node is kept" and include node 0's replacement as the
  /// first kept node). Used by to_subtree_prune and by stage-local views.
  SpecTree restrict_to(const SurvivorMask& keep) const;

  /// Descendant-or-self set of node i.
  SurvivorMask mask_column(std::size_t i) const;
  /// Ancestor-or-self set of node i.
  SurvivorMask mask_row(std::size_t i) const;

  std::vector<std::size_t> bottom_level() const;

  LevelSnapshot level_snapshot(std::size_t level) const;

  /// Extends this tree by a snapshot whose rows index into this tree's nodes.
  SpecTree append_snapshot(const LevelSnapshot& snapshot) const;

  /// Product of probs over the root path of i, inclusive.
  double cumulative_prob(std::size_t i) const;

  std::uint64_t next_id() const noexcept { return next_id_; }

  /// Throws StructuralError on any broken invariant.
  void validate() const;

  /// Little-endian wire format:
  ///   u32 n, u32 levels, u32 tokens[n], f64 probs[n], u32 level_offsets[levels],
  ///   then n mask rows of ceil(n/8) bytes; bit j of row i is byte j/8, bit j%8.
  std::vector<std::uint8_t> encode() const;
  /// Decoded nodes get NodeIds 0..n-1.
  static SpecTree decode(std::span<const std::uint8_t> bytes, std::uint32_t vocab);

  /// Structural equality (tokens, probs, mask, levels); NodeIds are ignored.
  bool structurally_equal(const SpecTree& other) const;

 private:
  SpecTree() = default;
  void rebuild_derived();

  std::uint32_t vocab_ = 0;
  std::vector<TokenId> tokens_;
  std::vector<double> probs_;
  std::vector<NodeId> ids_;
  std::vector<BitVector> rows_;
  std::vector<std::size_t> level_offsets_;
  std::uint64_t next_id_ = 0;

  // Derived from rows_ / level_offsets_.
  std::vector<std::size_t> parents_;
  std::vector<std::size_t> depths_;
};

struct PruneResult {
  SpecTree tree;
  SurvivorMask survivors;
};

}  // namespace treepipe

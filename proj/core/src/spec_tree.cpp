// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/spec_tree.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <string>
#include <unordered_set>

namespace treepipe {

namespace {

void check_token(TokenId token, std::uint32_t vocab) {
  if (token.value >= vocab) {
    throw InvalidToken("token " + std::to_string(token.value) + " outside vocabulary of size " +
                       std::to_string(vocab));
  }
}

void check_prob(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw StructuralError("probability outside [0, 1]: " + std::to_string(p));
}

// Highest set bit strictly below `limit`, or limit if none.
std::size_t last_set_below(const BitVector& row, std::size_t limit) {
  for (std::size_t j = limit; j-- > 0;) {
    if (row.test(j)) return j;
  }
  return limit;
}

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");
  const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw ParseError("truncated tree encoding");
  T value;
  std::memcpy(&value, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

SpecTree SpecTree::new_root(TokenId token, std::uint32_t vocab, NodeId id) {
  check_token(token, vocab);
  SpecTree t;
  t.vocab_ = vocab;
  t.tokens_ = {token};
  t.probs_ = {1.0};
  t.ids_ = {id};
  t.rows_.emplace_back(1, true);
  t.level_offsets_ = {0};
  t.next_id_ = to_underlying(id) + 1;
  t.rebuild_derived();
  return t;
}

SpecTree SpecTree::from_root_snapshot(const LevelSnapshot& s, std::uint32_t vocab) {
  if (s.level != 0 || s.first != 0 || s.size() != 1 || s.rows.size() != 1 || s.rows[0].size() != 1 ||
      !s.rows[0].test(0)) {
    throw StructuralError("root snapshot must hold exactly one self-masked node");
  }
  SpecTree t = new_root(s.tokens[0], vocab, s.ids[0]);
  return t;
}

void SpecTree::rebuild_derived() {
  const std::size_t n = size();
  parents_.assign(n, 0);
  depths_.assign(n, 0);
  std::size_t level = 0;
  for (std::size_t i = 0; i < n; ++i) {
    while (level + 1 < level_offsets_.size() && level_offsets_[level + 1] <= i) ++level;
    depths_[i] = level;
    parents_[i] = i == 0 ? 0 : last_set_below(rows_[i], i);
  }
}

bool SpecTree::mask(std::size_t i, std::size_t j) const {
  if (i >= size() || j >= size()) throw StructuralError("mask index out of range");
  return rows_[i].test(j);
}

std::size_t SpecTree::parent(std::size_t i) const {
  if (i == 0 || i >= size()) throw StructuralError("node " + std::to_string(i) + " has no parent");
  return parents_[i];
}

std::size_t SpecTree::depth(std::size_t i) const {
  if (i >= size()) throw StructuralError("node index out of range");
  return depths_[i];
}

std::size_t SpecTree::level_begin(std::size_t level) const {
  if (level >= level_count()) throw StructuralError("missing level " + std::to_string(level));
  return level_offsets_[level];
}

std::size_t SpecTree::level_end(std::size_t level) const {
  if (level >= level_count()) throw StructuralError("missing level " + std::to_string(level));
  return level + 1 < level_count() ? level_offsets_[level + 1] : size();
}

std::size_t SpecTree::find(NodeId id) const noexcept {
  const auto it = std::find(ids_.begin(), ids_.end(), id);
  return static_cast<std::size_t>(it - ids_.begin());
}

SpecTree SpecTree::layer_append(std::span<const LayerChild> children) const {
  if (children.empty()) throw StructuralError("layer_append needs at least one child");
  const std::size_t n = size();
  const std::size_t bottom = level_offsets_.back();
  for (std::size_t c = 0; c < children.size(); ++c) {
    const auto& ch = children[c];
    if (ch.parent_index < bottom || ch.parent_index >= n) {
      throw StructuralError("parent " + std::to_string(ch.parent_index) + " is not in the bottom level");
    }
    check_token(ch.token, vocab_);
    check_prob(ch.prob);
    if (c > 0) {
      const auto& prev = children[c - 1];
      const bool ordered = prev.parent_index < ch.parent_index ||
                           (prev.parent_index == ch.parent_index &&
                            (prev.prob > ch.prob || (prev.prob == ch.prob && prev.token < ch.token)));
      if (!ordered) throw OrderingError("children not sorted by (parent asc, prob desc, token asc)");
    }
  }

  SpecTree t = *this;
  const std::size_t total = n + children.size();
  for (auto& row : t.rows_) row.resize(total);
  for (std::size_t c = 0; c < children.size(); ++c) {
    BitVector row = rows_[children[c].parent_index];
    row.resize(total);
    row.set(n + c);
    t.rows_.push_back(std::move(row));
    t.tokens_.push_back(children[c].token);
    t.probs_.push_back(children[c].prob);
    t.ids_.push_back(NodeId{t.next_id_++});
  }
  t.level_offsets_.push_back(n);
  t.rebuild_derived();
  return t;
}

SpecTree SpecTree::restrict_to(const SurvivorMask& keep) const {
  if (keep.size() != size()) throw StructuralError("survivor mask length mismatch");
  const auto kept = keep.indices();
  if (kept.empty()) throw StructuralError("survivor mask is empty");

  SpecTree t;
  t.vocab_ = vocab_;
  t.next_id_ = next_id_;
  const std::size_t m = kept.size();
  const std::size_t base_depth = depths_[kept.front()];
  std::size_t current_depth = base_depth;
  t.level_offsets_.push_back(0);
  for (std::size_t a = 0; a < m; ++a) {
    const std::size_t i = kept[a];
    if (a > 0 && !rows_[i].test(kept.front())) {
      throw StructuralError("survivor set is not a subtree of its first node");
    }
    t.tokens_.push_back(tokens_[i]);
    t.probs_.push_back(a == 0 ? 1.0 : probs_[i]);
    t.ids_.push_back(ids_[i]);
    BitVector row(m);
    for (std::size_t b = 0; b <= a; ++b) {
      if (rows_[i].test(kept[b])) row.set(b);
    }
    if (row.count() != depths_[i] - base_depth + 1) throw StructuralError("survivor set skips an ancestor");
    t.rows_.push_back(std::move(row));
    if (depths_[i] != current_depth) {
      current_depth = depths_[i];
      t.level_offsets_.push_back(a);
    }
  }
  t.rebuild_derived();
  return t;
}

PruneResult SpecTree::to_subtree_prune(std::size_t new_root) const {
  if (new_root >= size()) throw StructuralError("prune index " + std::to_string(new_root) + " out of range");
  SurvivorMask survivors = mask_column(new_root);
  SpecTree t = restrict_to(survivors);
  return PruneResult{std::move(t), std::move(survivors)};
}

SurvivorMask SpecTree::mask_column(std::size_t i) const {
  if (i >= size()) throw StructuralError("column index out of range");
  SurvivorMask col(size());
  for (std::size_t j = i; j < size(); ++j) {
    if (rows_[j].test(i)) col.set(j);
  }
  return col;
}

SurvivorMask SpecTree::mask_row(std::size_t i) const {
  if (i >= size()) throw StructuralError("row index out of range");
  return rows_[i];
}

std::vector<std::size_t> SpecTree::bottom_level() const {
  std::vector<std::size_t> out;
  for (std::size_t i = level_offsets_.back(); i < size(); ++i) out.push_back(i);
  return out;
}

LevelSnapshot SpecTree::level_snapshot(std::size_t level) const {
  const std::size_t first = level_begin(level);
  const std::size_t end = level_end(level);
  LevelSnapshot s;
  s.level = level;
  s.first = first;
  for (std::size_t i = first; i < end; ++i) {
    s.tokens.push_back(tokens_[i]);
    s.probs.push_back(probs_[i]);
    s.ids.push_back(ids_[i]);
    BitVector row = rows_[i];
    row.resize(end);
    s.rows.push_back(std::move(row));
  }
  return s;
}

SpecTree SpecTree::append_snapshot(const LevelSnapshot& s) const {
  const std::size_t n = size();
  if (s.level != level_count() || s.first != n) {
    throw StructuralError("snapshot of level " + std::to_string(s.level) + " at " + std::to_string(s.first) +
                          " does not extend a tree with " + std::to_string(level_count()) + " levels / " +
                          std::to_string(n) + " nodes");
  }
  if (s.size() == 0 || s.rows.size() != s.size() || s.probs.size() != s.size() || s.ids.size() != s.size()) {
    throw StructuralError("malformed level snapshot");
  }
  const std::size_t total = n + s.size();
  const std::size_t bottom = level_offsets_.back();
  SpecTree t = *this;
  for (auto& row : t.rows_) row.resize(total);
  std::size_t prev_parent = bottom;
  for (std::size_t c = 0; c < s.size(); ++c) {
    const BitVector& in = s.rows[c];
    if (in.size() != total) throw StructuralError("snapshot row has wrong width");
    const std::size_t p = last_set_below(in, n);
    if (p < bottom || p >= n) throw StructuralError("snapshot node does not hang off the bottom level");
    if (p < prev_parent) throw OrderingError("snapshot nodes not in parent order");
    prev_parent = p;
    BitVector expect = rows_[p];
    expect.resize(total);
    expect.set(n + c);
    if (!(expect == in)) throw StructuralError("snapshot row is not ancestor-closed");
    check_token(s.tokens[c], vocab_);
    check_prob(s.probs[c]);
    t.rows_.push_back(in);
    t.tokens_.push_back(s.tokens[c]);
    t.probs_.push_back(s.probs[c]);
    t.ids_.push_back(s.ids[c]);
    t.next_id_ = std::max(t.next_id_, to_underlying(s.ids[c]) + 1);
  }
  t.level_offsets_.push_back(n);
  t.rebuild_derived();
  return t;
}

double SpecTree::cumulative_prob(std::size_t i) const {
  if (i >= size()) throw StructuralError("node index out of range");
  double p = probs_[i];
  while (i != 0) {
    i = parents_[i];
    p *= probs_[i];
  }
  return p;
}

void SpecTree::validate() const {
  const std::size_t n = size();
  if (n == 0) throw StructuralError("tree is empty");
  if (probs_.size() != n || ids_.size() != n || rows_.size() != n) {
    throw StructuralError("array lengths disagree");
  }
  if (level_offsets_.empty() || level_offsets_.front() != 0) throw StructuralError("level offsets must start at 0");
  for (std::size_t l = 1; l < level_offsets_.size(); ++l) {
    if (level_offsets_[l] <= level_offsets_[l - 1]) throw StructuralError("level offsets not strictly increasing");
  }
  if (level_offsets_.back() >= n) throw StructuralError("last level is empty");
  if (level_offsets_.size() > 1 && level_offsets_[1] != 1) throw StructuralError("level 0 must hold only the root");
  if (probs_[0] != 1.0) throw StructuralError("root probability must be 1");

  std::unordered_set<std::uint64_t> seen;
  for (std::size_t i = 0; i < n; ++i) {
    check_token(tokens_[i], vocab_);
    check_prob(probs_[i]);
    if (!seen.insert(to_underlying(ids_[i])).second) throw StructuralError("duplicate node id");
    const BitVector& row = rows_[i];
    if (row.size() != n) throw StructuralError("mask row has wrong width");
    if (!row.test(i)) throw StructuralError("mask diagonal must be 1");
    for (std::size_t j = i + 1; j < n; ++j) {
      if (row.test(j)) throw StructuralError("mask must be lower-triangular");
    }
    if (i == 0) {
      if (row.count() != 1) throw StructuralError("root row must hold only the root");
      continue;
    }
    const std::size_t p = last_set_below(row, i);
    if (p == i) throw StructuralError("non-root node without parent");
    if (depths_[p] + 1 != depths_[i]) throw StructuralError("parent is not in the previous level");
    BitVector expect = rows_[p];
    expect.set(i);
    if (!(expect == row)) throw StructuralError("mask row is not ancestor-closed");
    if (i > level_offsets_[depths_[i]] && parents_[i - 1] > p) {
      throw OrderingError("level not sorted by parent");
    }
  }
}

std::vector<std::uint8_t> SpecTree::encode() const {
  const std::size_t n = size();
  const std::size_t row_bytes = (n + 7) / 8;
  std::vector<std::uint8_t> out;
  out.reserve(8 + n * 12 + level_offsets_.size() * 4 + n * row_bytes);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(n));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(level_offsets_.size()));
  for (auto t : tokens_) put<std::uint32_t>(out, t.value);
  for (auto p : probs_) put<double>(out, p);
  for (auto o : level_offsets_) put<std::uint32_t>(out, static_cast<std::uint32_t>(o));
  for (const auto& row : rows_) {
    std::vector<std::uint8_t> bytes(row_bytes, 0);
    for (std::size_t j = 0; j < n; ++j) {
      if (row.test(j)) bytes[j / 8] |= static_cast<std::uint8_t>(1U << (j % 8));
    }
    out.insert(out.end(), bytes.begin(), bytes.end());
  }
  return out;
}

SpecTree SpecTree::decode(std::span<const std::uint8_t> bytes, std::uint32_t vocab) {
  std::size_t pos = 0;
  const auto n = get<std::uint32_t>(bytes, pos);
  const auto levels = get<std::uint32_t>(bytes, pos);
  if (n == 0 || levels == 0 || levels > n) throw ParseError("bad tree header");
  const std::size_t row_bytes = (n + 7) / 8;
  const std::size_t expected = 8 + std::size_t{n} * 12 + std::size_t{levels} * 4 + std::size_t{n} * row_bytes;
  if (bytes.size() != expected) throw ParseError("tree encoding has wrong length");

  SpecTree t;
  t.vocab_ = vocab;
  for (std::uint32_t i = 0; i < n; ++i) t.tokens_.emplace_back(get<std::uint32_t>(bytes, pos));
  for (std::uint32_t i = 0; i < n; ++i) t.probs_.push_back(get<double>(bytes, pos));
  for (std::uint32_t l = 0; l < levels; ++l) t.level_offsets_.push_back(get<std::uint32_t>(bytes, pos));
  for (std::uint32_t i = 0; i < n; ++i) {
    BitVector row(n);
    for (std::size_t j = 0; j < n; ++j) {
      if ((bytes[pos + j / 8] >> (j % 8)) & 1U) row.set(j);
    }
    pos += row_bytes;
    t.rows_.push_back(std::move(row));
    t.ids_.push_back(NodeId{i});
  }
  t.next_id_ = n;
  for (std::size_t l = 1; l < t.level_offsets_.size(); ++l) {
    if (t.level_offsets_[l] <= t.level_offsets_[l - 1]) throw ParseError("level offsets not increasing");
  }
  if (t.level_offsets_.front() != 0 || t.level_offsets_.back() >= n) throw ParseError("bad level offsets");
  t.rebuild_derived();
  t.validate();
  return t;
}

bool SpecTree::structurally_equal(const SpecTree& o) const {
  return tokens_ == o.tokens_ && probs_ == o.probs_ && level_offsets_ == o.level_offsets_ && rows_ == o.rows_;
}

}  // namespace treepipe

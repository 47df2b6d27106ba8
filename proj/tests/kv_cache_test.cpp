// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include "treepipe/kv_cache.hpp"

using namespace treepipe;

namespace {

// Two layers of width 2; row r holds key (r, r) and value (-r, -r).
KvCache filled(std::size_t verified, std::size_t speculative) {
  KvCache kv(3, 2, 2);
  for (std::size_t r = 0; r < verified + speculative; ++r) {
    const bool v = r < verified;
    kv.push_slot({r, v ? std::nullopt : std::optional<NodeId>(NodeId{100 + r})}, v);
    const double x = static_cast<double>(r);
    for (std::size_t l = 3; l < 5; ++l) kv.append_row(l, std::vector<double>{x, x}, std::vector<double>{-x, -x});
  }
  return kv;
}

}  // namespace

TEST_CASE("shape and slot bookkeeping") {
  KvCache kv = filled(2, 3);
  CHECK(kv.size() == 5);
  CHECK(kv.verified_count() == 2);
  CHECK(kv.speculative_count() == 3);
  CHECK(kv.key(4, 3)[0] == 3.0);
  CHECK(kv.value(3, 1)[1] == -1.0);
  CHECK(kv.find(NodeId{103}) == 3);
  CHECK_FALSE(kv.find(NodeId{1}).has_value());
  CHECK_THROWS_AS(kv.key(5, 0), ShapeError);
  CHECK_THROWS_AS(kv.append_row(3, std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), ShapeError);
  CHECK_THROWS_AS(kv.push_slot({9, std::nullopt}, true), ContractViolation);  // verified after speculative
}

TEST_CASE("pruning keeps order and never drops verified rows") {
  const KvCache kv = filled(2, 4);
  BitVector keep(6, true);
  keep.set(3, false);
  keep.set(4, false);
  const KvCache p = kv_prune(kv, keep);
  CHECK(p.size() == 4);
  CHECK(p.verified_count() == 2);
  CHECK(p.slots()[2].node == NodeId{102});
  CHECK(p.slots()[3].node == NodeId{105});
  CHECK(p.key(3, 3)[0] == 5.0);

  BitVector drop_verified(6, true);
  drop_verified.set(1, false);
  CHECK_THROWS_AS(kv_prune(kv, drop_verified), ContractViolation);
  CHECK_THROWS_AS(kv_prune(kv, BitVector(5, true)), ShapeError);
}

TEST_CASE("promote and demote") {
  KvCache kv = filled(2, 2);
  kv.promote(1);
  CHECK(kv.verified_count() == 3);
  CHECK_THROWS_AS(kv.promote(2), ContractViolation);
  CHECK_THROWS_AS(kv.demote_last(NodeId{7}), ContractViolation);  // speculative rows remain

  KvCache causal = filled(3, 0);
  causal.demote_last(NodeId{7});
  CHECK(causal.verified_count() == 2);
  CHECK(causal.slots()[2].node == NodeId{7});
  CHECK(causal.slots()[2].position == 2);
}

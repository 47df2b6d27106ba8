// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>


#include "treepipe/spec_tree.hpp"

namespace {

using namespace treepipe;

// Full levels of `width` nodes, each node's children spread over the
// previous level.
SpecTree build(std::size_t width, std::size_t levels) {
  SpecTree t = SpecTree::new_root(TokenId{0}, 1024);
  for (std::size_t l = 0; l < levels; ++l) {
    const auto bottom = t.bottom_level();
    std::vector<LayerChild> layer;
    for (std::size_t i = 0; i < width; ++i) {
      layer.push_back({bottom[i % bottom.size()], TokenId{static_cast<std::uint32_t>(i)}, 0.5});
    }
    t = t.layer_append(layer);
  }
  return t;
}

void BM_LayerAppend(benchmark::State& state) {
  const auto width = static_cast<std::size_t>(state.range(0));
  const SpecTree base = build(width, 3);
  const auto bottom = base.bottom_level();
  std::vector<LayerChild> layer;
  for (std::size_t i = 0; i < width; ++i) layer.push_back({bottom[i], TokenId{static_cast<std::uint32_t>(i)}, 0.5});
  for (auto _ : state) benchmark::DoNotOptimize(base.layer_append(layer));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(width));
}
BENCHMARK(BM_LayerAppend)->RangeMultiplier(2)->Range(8, 128);

void BM_SubtreePrune(benchmark::State& state) {
  const SpecTree t = build(static_cast<std::size_t>(state.range(0)), 4);
  for (auto _ : state) benchmark::DoNotOptimize(t.to_subtree_prune(1));
}
BENCHMARK(BM_SubtreePrune)->RangeMultiplier(2)->Range(8, 128);

void BM_Encode(benchmark::State& state) {
  const SpecTree t = build(static_cast<std::size_t>(state.range(0)), 4);
  for (auto _ : state) benchmark::DoNotOptimize(t.encode());
}
BENCHMARK(BM_Encode)->RangeMultiplier(2)->Range(8, 128);

void BM_Decode(benchmark::State& state) {
  const auto bytes = build(static_cast<std::size_t>(state.range(0)), 4).encode();
  for (auto _ : state) benchmark::DoNotOptimize(SpecTree::decode(bytes, 1024));
  state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(bytes.size()));
}
BENCHMARK(BM_Decode)->RangeMultiplier(2)->Range(8, 128);

}  // namespace

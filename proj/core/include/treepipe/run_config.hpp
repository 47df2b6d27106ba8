// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "treepipe/batcher.hpp"
#include "treepipe/perf_model.hpp"
#include "treepipe/pipeline.hpp"
#include "treepipe/token_source.hpp"
#include "treepipe/toy_model.hpp"

namespace treepipe {

enum class DraftKind { synthetic, replay, none };

struct DraftSettings {
  DraftKind kind = DraftKind::synthetic;
  SyntheticDraftConfig synthetic;
  std::optional<std::string> trace;
};

struct SweepSettings {
  std::vector<std::size_t> widths{1, 2, 4, 8, 16, 32, 48, 64, 80, 112, 128};
  std::vector<std::size_t> ks{2, 4, 8, 16, 32};
  std::size_t tokens = 128;
};

struct ServeSettings {
  std::vector<std::size_t> batch_sizes{1, 2, 4, 8};
  std::size_t w_total = 64;
  std::size_t max_batch_nodes = 0;
  std::optional<std::string> workload;
};

struct OutputPaths {
  std::optional<std::string> tokens;
  std::optional<std::string> metrics;
  std::optional<std::string> trace;
};

/// Everything one CLI invocation needs. Loaded from a single JSON document;
/// `seed` is mandatory and every other seed defaults to it.
struct RunConfig {
  std::uint64_t seed = 0;
  ToyModelConfig model;
  std::optional<std::string> checkpoint;
  PipelineConfig pipeline;
  bool workers = false;
  DraftSettings draft;
  CostModel cost;
  std::vector<TokenId> prompt;
  std::size_t max_tokens = 128;
  SweepSettings sweep;
  ServeSettings serve;
  OutputPaths outputs;

  /// Throws ConfigError, including for referenced files that do not exist.
  void validate() const;

  /// Fully resolved JSON (defaults filled in).
  std::string to_json() const;
};

/// Throws ConfigError on malformed JSON, unknown keys or invalid values.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::string& path);

/// Prompt drawn from splitmix64(seed); deterministic across platforms.
std::vector<TokenId> random_prompt(std::uint64_t seed, std::size_t length, std::uint32_t vocab);

/// Builds the model named by the config (checkpoint if given).
ToyModel build_model(const RunConfig& cfg);

}  // namespace treepipe

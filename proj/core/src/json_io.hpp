// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "treepipe/perf_model.hpp"
#include "treepipe/types.hpp"

namespace treepipe::detail {

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Rejects keys outside `allowed` so that typos in config files surface.
inline void check_keys(const nlohmann::json& j, std::string_view what, std::initializer_list<std::string_view> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + std::string(what));
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline nlohmann::json cost_to_json(const CostModel& c) {
  return {{"base_ms", c.base_ms},
          {"slope_ms_per_quantum", c.slope_ms_per_quantum},
          {"quantum", c.quantum},
          {"prune_ms", c.prune_ms},
          {"transmit_base_ms", c.transmit_base_ms},
          {"transmit_per_node_ms", c.transmit_per_node_ms},
          {"draft_ms", c.draft_ms},
          {"overlap_prune_transmit", c.overlap_prune_transmit},
          {"batch_overhead_ms", c.batch_overhead_ms}};
}

inline CostModel cost_from_json(const nlohmann::json& j) {
  check_keys(j, "cost model",
             {"base_ms", "slope_ms_per_quantum", "quantum", "prune_ms", "transmit_base_ms", "transmit_per_node_ms",
              "draft_ms", "overlap_prune_transmit", "batch_overhead_ms"});
  CostModel c;
  read_opt(j, "base_ms", c.base_ms);
  read_opt(j, "slope_ms_per_quantum", c.slope_ms_per_quantum);
  read_opt(j, "quantum", c.quantum);
  read_opt(j, "prune_ms", c.prune_ms);
  read_opt(j, "transmit_base_ms", c.transmit_base_ms);
  read_opt(j, "transmit_per_node_ms", c.transmit_per_node_ms);
  read_opt(j, "draft_ms", c.draft_ms);
  read_opt(j, "overlap_prune_transmit", c.overlap_prune_transmit);
  read_opt(j, "batch_overhead_ms", c.batch_overhead_ms);
  c.validate();
  return c;
}

}  // namespace treepipe::detail

// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/run_config.hpp"

#include <filesystem>

#include <json.hpp>

#include "json_io.hpp"

namespace treepipe {

namespace {

using nlohmann::json;
using detail::check_keys;
using detail::read_opt;

std::string draft_kind_name(DraftKind k) {
  switch (k) {
    case DraftKind::synthetic:
      return "synthetic";
    case DraftKind::replay:
      return "replay";
    case DraftKind::none:
      return "none";
  }
  return "none";
}

DraftKind parse_draft_kind(const std::string& s) {
  if (s == "synthetic") return DraftKind::synthetic;
  if (s == "replay") return DraftKind::replay;
  if (s == "none") return DraftKind::none;
  throw ConfigError("unknown draft kind '" + s + "' (expected synthetic, replay or none)");
}

void require_file(const std::optional<std::string>& path, const std::string& what) {
  if (path && !std::filesystem::exists(*path)) throw ConfigError(what + " '" + *path + "' does not exist");
}

RunConfig from_json(const json& j) {
  check_keys(j, "config",
             {"seed", "model", "pipeline", "beam", "draft", "cost", "prompt", "prompt_len", "max_tokens", "sweep",
              "serve", "outputs"});
  if (!j.contains("seed")) throw ConfigError("config must set 'seed'");
  RunConfig c;
  c.seed = j.at("seed").get<std::uint64_t>();

  c.model.seed = c.seed;
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model", {"vocab", "dim", "layers", "seed", "checkpoint"});
    read_opt(m, "vocab", c.model.vocab);
    read_opt(m, "dim", c.model.dim);
    read_opt(m, "layers", c.model.layers);
    read_opt(m, "seed", c.model.seed);
    if (m.contains("checkpoint")) c.checkpoint = m.at("checkpoint").get<std::string>();
  }
  // The checkpoint header decides the vocabulary the prompt is drawn from.
  require_file(c.checkpoint, "checkpoint");
  if (c.checkpoint) c.model = ToyModel::load(*c.checkpoint).config();

  if (j.contains("pipeline")) {
    const auto& p = j.at("pipeline");
    check_keys(p, "pipeline", {"stages", "layers", "mode", "audit", "workers"});
    read_opt(p, "stages", c.pipeline.stages);
    if (p.contains("layers")) {
      for (const auto& r : p.at("layers")) {
        if (!r.is_array() || r.size() != 2) throw ConfigError("pipeline.layers entries must be [begin, end]");
        c.pipeline.layers.push_back({r[0].get<std::size_t>(), r[1].get<std::size_t>()});
      }
    }
    if (p.contains("mode")) c.pipeline.mode = parse_mode(p.at("mode").get<std::string>());
    read_opt(p, "audit", c.pipeline.audit);
    read_opt(p, "workers", c.workers);
  }

  if (j.contains("beam")) {
    const auto& b = j.at("beam");
    check_keys(b, "beam", {"w", "k"});
    read_opt(b, "w", c.pipeline.beam.w);
    read_opt(b, "k", c.pipeline.beam.k);
  }

  c.draft.synthetic = SyntheticDraftConfig::calibrated(c.seed);
  if (j.contains("draft")) {
    const auto& d = j.at("draft");
    check_keys(d, "draft", {"kind", "top1_hit", "rank_decay", "miss_prob", "seed", "trace"});
    if (d.contains("kind")) c.draft.kind = parse_draft_kind(d.at("kind").get<std::string>());
    read_opt(d, "top1_hit", c.draft.synthetic.top1_hit);
    read_opt(d, "rank_decay", c.draft.synthetic.rank_decay);
    read_opt(d, "miss_prob", c.draft.synthetic.miss_prob);
    read_opt(d, "seed", c.draft.synthetic.seed);
    if (d.contains("trace")) c.draft.trace = d.at("trace").get<std::string>();
  }

  if (j.contains("cost")) c.cost = detail::cost_from_json(j.at("cost"));

  if (j.contains("prompt") && j.contains("prompt_len")) throw ConfigError("set either 'prompt' or 'prompt_len'");
  if (j.contains("prompt")) {
    for (const auto& t : j.at("prompt")) c.prompt.emplace_back(t.get<std::uint32_t>());
  } else {
    std::size_t len = 8;
    read_opt(j, "prompt_len", len);
    c.prompt = random_prompt(c.seed, len, c.model.vocab);
  }
  read_opt(j, "max_tokens", c.max_tokens);

  if (j.contains("sweep")) {
    const auto& s = j.at("sweep");
    check_keys(s, "sweep", {"widths", "ks", "tokens"});
    read_opt(s, "widths", c.sweep.widths);
    read_opt(s, "ks", c.sweep.ks);
    read_opt(s, "tokens", c.sweep.tokens);
  }

  if (j.contains("serve")) {
    const auto& s = j.at("serve");
    check_keys(s, "serve", {"batch_sizes", "w_total", "max_batch_nodes", "workload"});
    read_opt(s, "batch_sizes", c.serve.batch_sizes);
    read_opt(s, "w_total", c.serve.w_total);
    read_opt(s, "max_batch_nodes", c.serve.max_batch_nodes);
    if (s.contains("workload")) c.serve.workload = s.at("workload").get<std::string>();
  }

  if (j.contains("outputs")) {
    const auto& o = j.at("outputs");
    check_keys(o, "outputs", {"tokens", "metrics", "trace"});
    if (o.contains("tokens")) c.outputs.tokens = o.at("tokens").get<std::string>();
    if (o.contains("metrics")) c.outputs.metrics = o.at("metrics").get<std::string>();
    if (o.contains("trace")) c.outputs.trace = o.at("trace").get<std::string>();
  }
  return c;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  pipeline.validate(model.layers);
  draft.synthetic.validate();
  cost.validate();
  if (prompt.empty()) throw ConfigError("prompt must not be empty");
  for (auto t : prompt) {
    if (t.value >= model.vocab) throw ConfigError("prompt token " + std::to_string(t.value) + " outside vocabulary");
  }
  if (draft.kind == DraftKind::replay && !draft.trace) throw ConfigError("replay draft needs draft.trace");
  if (sweep.widths.empty() || sweep.ks.empty()) throw ConfigError("sweep grids must not be empty");
  for (auto w : sweep.widths) {
    if (w < 1) throw ConfigError("sweep widths must be >= 1");
  }
  for (auto k : sweep.ks) {
    if (k < 2) throw ConfigError("sweep ks must be >= 2");
  }
  if (serve.batch_sizes.empty()) throw ConfigError("serve.batch_sizes must not be empty");
  for (auto b : serve.batch_sizes) {
    if (b < 1) throw ConfigError("batch sizes must be >= 1");
  }
  if (serve.w_total < 1) throw ConfigError("serve.w_total must be >= 1");
  require_file(checkpoint, "checkpoint");
  require_file(draft.trace, "draft trace");
  require_file(serve.workload, "workload");
}

std::string RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["model"] = {{"vocab", model.vocab}, {"dim", model.dim}, {"layers", model.layers}, {"seed", model.seed}};
  if (checkpoint) j["model"]["checkpoint"] = *checkpoint;
  auto layers = nlohmann::ordered_json::array();
  for (const auto& r : pipeline.layer_ranges(model.layers)) layers.push_back({r.begin, r.end});
  j["pipeline"] = {{"stages", pipeline.stages},
                   {"layers", layers},
                   {"mode", std::string(to_string(pipeline.mode))},
                   {"audit", pipeline.audit},
                   {"workers", workers}};
  j["beam"] = {{"w", pipeline.beam.w}, {"k", pipeline.beam.k}};
  j["draft"] = {{"kind", draft_kind_name(draft.kind)},
                {"top1_hit", draft.synthetic.top1_hit},
                {"rank_decay", draft.synthetic.rank_decay},
                {"miss_prob", draft.synthetic.miss_prob},
                {"seed", draft.synthetic.seed}};
  if (draft.trace) j["draft"]["trace"] = *draft.trace;
  j["cost"] = nlohmann::ordered_json::parse(detail::cost_to_json(cost).dump());
  std::vector<std::uint32_t> p;
  for (auto t : prompt) p.push_back(t.value);
  j["prompt"] = p;
  j["max_tokens"] = max_tokens;
  j["sweep"] = {{"widths", sweep.widths}, {"ks", sweep.ks}, {"tokens", sweep.tokens}};
  j["serve"] = {{"batch_sizes", serve.batch_sizes},
                {"w_total", serve.w_total},
                {"max_batch_nodes", serve.max_batch_nodes}};
  if (serve.workload) j["serve"]["workload"] = *serve.workload;
  j["outputs"] = nlohmann::ordered_json::object();
  if (outputs.tokens) j["outputs"]["tokens"] = *outputs.tokens;
  if (outputs.metrics) j["outputs"]["metrics"] = *outputs.metrics;
  if (outputs.trace) j["outputs"]["trace"] = *outputs.trace;
  return j.dump();
}

RunConfig parse_run_config(const std::string& text) {
  try {
    RunConfig c = from_json(json::parse(text));
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
}

RunConfig load_run_config(const std::string& path) { return parse_run_config(detail::read_file(path)); }

std::vector<TokenId> random_prompt(std::uint64_t seed, std::size_t length, std::uint32_t vocab) {
  std::uint64_t state = seed ^ 0x5851f42d4c957f2dULL;
  std::vector<TokenId> out;
  out.reserve(length);
  for (std::size_t i = 0; i < length; ++i) out.emplace_back(static_cast<std::uint32_t>(splitmix64(state) % vocab));
  return out;
}

ToyModel build_model(const RunConfig& cfg) {
  if (cfg.checkpoint) return ToyModel::load(*cfg.checkpoint);
  return ToyModel(cfg.model);
}

}  // namespace treepipe

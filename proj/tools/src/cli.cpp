// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <unordered_set>

#include <CLI11.hpp>
#include <json.hpp>

#include "treepipe/batcher.hpp"
#include "treepipe/executor.hpp"
#include "treepipe/perf_model.hpp"
#include "treepipe/pipeline.hpp"
#include "treepipe/run_config.hpp"
#include "treepipe/spec_tree.hpp"
#include "treepipe/token_source.hpp"
#include "treepipe/toy_model.hpp"

namespace treepipe::cli {

namespace {

using nlohmann::ordered_json;

/// Lossless check failed; maps to exit code 1.
class OracleMismatch : public Error {
 public:
  using Error::Error;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  bool check_oracle = false;
  bool workers = false;
  std::optional<std::string> trace_out;
  std::optional<std::string> metrics_out;
  std::optional<std::string> tokens_out;
  std::optional<std::string> cost_model;
  std::optional<std::string> draft_trace;
  std::optional<std::string> record_draft;
  std::optional<std::string> accuracy_curve;
  std::optional<std::string> report_out;
  std::optional<std::string> workload;
  std::optional<std::string> tree;
  std::vector<std::size_t> widths;
  std::vector<std::size_t> ks;
  std::vector<std::size_t> batch_sizes;
};

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Resolved config as echoed into outputs. Output paths are left out so that
/// reruns into different directories stay byte-identical.
std::string echo_config(const RunConfig& cfg) {
  auto j = ordered_json::parse(cfg.to_json());
  j.erase("outputs");
  return j.dump();
}

/// Applies command-line overrides to the raw document so that defaults derived
/// from them (seeds, prompt) resolve exactly as if they had been in the file.
RunConfig resolve_config(const Options& o) {
  ordered_json j;
  try {
    j = ordered_json::parse(read_text(o.config));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  if (o.seed) j["seed"] = *o.seed;
  if (o.mode) j["pipeline"]["mode"] = *o.mode;
  if (o.workers) j["pipeline"]["workers"] = true;
  if (o.draft_trace) {
    j["draft"]["kind"] = "replay";
    j["draft"]["trace"] = *o.draft_trace;
  }
  if (o.cost_model) {
    try {
      j["cost"] = ordered_json::parse(read_text(*o.cost_model));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad cost model: ") + e.what());
    }
  }
  if (o.workload) j["serve"]["workload"] = *o.workload;
  if (!o.widths.empty()) j["sweep"]["widths"] = o.widths;
  if (!o.ks.empty()) j["sweep"]["ks"] = o.ks;
  if (!o.batch_sizes.empty()) j["serve"]["batch_sizes"] = o.batch_sizes;
  RunConfig cfg = parse_run_config(j.dump());
  if (o.trace_out) cfg.outputs.trace = *o.trace_out;
  if (o.metrics_out) cfg.outputs.metrics = *o.metrics_out;
  if (o.tokens_out) cfg.outputs.tokens = *o.tokens_out;
  return cfg;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

std::vector<std::uint32_t> raw(std::span<const TokenId> tokens) {
  std::vector<std::uint32_t> out;
  for (auto t : tokens) out.push_back(t.value);
  return out;
}

/// Rejects malformed candidate lists from an external trace as input errors.
class CheckedDraft final : public DraftProvider {
 public:
  CheckedDraft(DraftProvider& inner, std::uint32_t vocab) : inner_(inner), vocab_(vocab) {}

  std::vector<Candidate> propose(const DraftRequest& request) override {
    auto cands = inner_.propose(request);
    std::unordered_set<std::uint32_t> seen;
    for (std::size_t i = 0; i < cands.size(); ++i) {
      const auto& c = cands[i];
      const std::string at = " at step " + std::to_string(request.step);
      if (c.token.value >= vocab_) throw ParseError("draft trace token outside vocabulary" + at);
      if (!(c.prob > 0.0 && c.prob <= 1.0)) throw ParseError("draft trace prob outside (0, 1]" + at);
      if (!seen.insert(c.token.value).second) throw ParseError("draft trace repeats a token" + at);
      if (i > 0 && !(c.prob < cands[i - 1].prob)) throw ParseError("draft trace probs not strictly descending" + at);
    }
    return cands;
  }

 private:
  DraftProvider& inner_;
  std::uint32_t vocab_;
};

std::unique_ptr<DraftProvider> make_draft(const RunConfig& cfg, const ToyModel& model) {
  switch (cfg.draft.kind) {
    case DraftKind::synthetic:
      return make_synthetic_draft(model, cfg.prompt, cfg.draft.synthetic);
    case DraftKind::replay:
      return replay_draft(*cfg.draft.trace);
    case DraftKind::none:
      return nullptr;
  }
  return nullptr;
}

void check_lossless(const ToyModel& model, std::span<const TokenId> prompt, std::span<const TokenId> tokens,
                    const std::string& what) {
  const auto ref = sequential_decode(model, prompt, tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] != ref[i]) {
      throw OracleMismatch(what + ": token " + std::to_string(i) + " is " + std::to_string(tokens[i].value) +
                           ", sequential decoding gives " + std::to_string(ref[i].value));
    }
  }
}

int cmd_decode(const Options& o, bool replay, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  if (replay && cfg.draft.kind != DraftKind::replay) {
    throw ConfigError("replay needs --draft-trace or draft.kind = replay in the config");
  }
  const ToyModel model = build_model(cfg);
  const std::string config_json = echo_config(cfg);

  std::unique_ptr<DraftProvider> base = make_draft(cfg, model);
  std::unique_ptr<DraftProvider> checked;
  DraftProvider* draft = base.get();
  if (draft && cfg.draft.kind == DraftKind::replay) {
    checked = std::make_unique<CheckedDraft>(*draft, model.vocab());
    draft = checked.get();
  }
  std::ofstream record_stream;
  std::unique_ptr<RecordingDraft> recorder;
  if (o.record_draft) {
    if (!draft) throw ConfigError("--record-draft needs a draft source");
    record_stream.open(*o.record_draft, std::ios::binary);
    if (!record_stream) throw ConfigError("cannot write " + *o.record_draft);
    recorder = std::make_unique<RecordingDraft>(*draft, record_stream);
    draft = recorder.get();
  }

  auto executor = make_executor(cfg.workers, cfg.pipeline.stages);
  const RunResult res =
      run_pipeline(model, cfg.pipeline, cfg.cost, draft, cfg.prompt, cfg.max_tokens, executor.get());

  // Every decode is checked; --check-oracle only makes the verdict explicit.
  check_lossless(model, cfg.prompt, res.tokens, "decode");

  ordered_json metrics;
  metrics["config"] = ordered_json::parse(config_json);
  metrics["metrics"] = ordered_json::parse(res.metrics.to_json());
  metrics["lossless"] = true;
  metrics["early_stop"] = res.early_stop;
  if (cfg.outputs.metrics) write_text(*cfg.outputs.metrics, metrics.dump(2) + "\n");

  if (cfg.outputs.tokens) {
    ordered_json t;
    t["config"] = ordered_json::parse(config_json);
    t["prompt"] = raw(cfg.prompt);
    t["tokens"] = raw(res.tokens);
    write_text(*cfg.outputs.tokens, t.dump() + "\n");
  }
  if (cfg.outputs.trace) {
    std::ofstream tf(*cfg.outputs.trace, std::ios::binary);
    if (!tf) throw ConfigError("cannot write " + *cfg.outputs.trace);
    write_trace_csv(tf, res.trace, "config " + config_json);
  }

  out << res.metrics.to_json() << '\n';
  if (res.early_stop) out << "draft trace exhausted after " << res.tokens.size() << " tokens\n";
  if (o.check_oracle) out << "oracle: " << res.tokens.size() << " tokens match sequential decoding\n";
  return kExitOk;
}

int cmd_sweep(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  if (cfg.draft.kind != DraftKind::synthetic) throw ConfigError("sweep needs the synthetic draft source");
  const ToyModel model = build_model(cfg);
  const std::string config_json = echo_config(cfg);
  auto executor = make_executor(cfg.workers, cfg.pipeline.stages);
  const std::size_t m = cfg.pipeline.stages;

  struct Row {
    std::size_t k, w;
    RunMetrics metrics;
    HitSample sample;
  };
  std::vector<Row> rows;
  std::map<std::size_t, AccuracyCurve> curves;
  auto widths = cfg.sweep.widths;
  std::sort(widths.begin(), widths.end());
  widths.erase(std::unique(widths.begin(), widths.end()), widths.end());

  for (std::size_t k : cfg.sweep.ks) {
    std::vector<HitSample> samples;
    for (std::size_t w : widths) {
      PipelineConfig pc = cfg.pipeline;
      pc.beam = {w, k};
      auto draft = make_synthetic_draft(model, cfg.prompt, cfg.draft.synthetic);
      const RunResult res = run_pipeline(model, pc, cfg.cost, draft.get(), cfg.prompt, cfg.sweep.tokens, executor.get());
      if (o.check_oracle) check_lossless(model, cfg.prompt, res.tokens, "sweep w=" + std::to_string(w));
      HitSample s{w, 0, 0};
      for (const auto& step : res.outcomes) {
        if (!step.verified) continue;
        ++s.verifications;
        s.hits += step.hit ? 1 : 0;
      }
      samples.push_back(s);
      rows.push_back({k, w, res.metrics, s});
    }
    curves.emplace(k, fit_accuracy_curve(samples));
  }

  std::optional<AccuracyCurve> given;
  if (o.accuracy_curve) given = load_accuracy_curve(*o.accuracy_curve);

  // Expected TBT uses per-stage times t_i = step_cost(w) * share_i.
  const auto ranges = cfg.pipeline.layer_ranges(model.layer_count());
  auto expected = [&](std::size_t w, double p) {
    std::vector<double> t;
    for (const auto& r : ranges) {
      t.push_back(cfg.cost.step_cost(w) * static_cast<double>(r.size()) / static_cast<double>(model.layer_count()));
    }
    return expected_tbt_general(t, p);
  };

  std::ostringstream csv;
  csv << "# config " << config_json << '\n';
  csv << "k,w,verifications,hits,hit_rate,fitted_hit_rate,steps_per_token,tbt_mean_ms,expected_tbt_ms\n";
  for (const auto& r : rows) {
    const double fitted = curves.at(r.k).at(r.w);
    csv << r.k << ',' << r.w << ',' << r.sample.verifications << ',' << r.sample.hits << ','
        << r.metrics.hit_rate << ',' << fitted << ',' << r.metrics.steps_per_token << ',' << r.metrics.tbt_mean_ms
        << ',' << expected(r.w, fitted) << '\n';
  }

  std::size_t best_w = 0, best_k = 0;
  double best = std::numeric_limits<double>::infinity();
  if (given) {
    best_w = select_width(cfg.cost, *given, m, widths);
  } else {
    for (const auto& [k, curve] : curves) {
      const std::size_t w = select_width(cfg.cost, curve, m, widths);
      const double tbt = expected_tbt_uniform(cfg.cost.step_cost(w), curve.at(w), m);
      if (tbt < best) {
        best = tbt;
        best_w = w;
        best_k = k;
      }
    }
  }

  ordered_json report;
  report["config"] = ordered_json::parse(config_json);
  report["curves"] = ordered_json::object();
  for (const auto& [k, curve] : curves) {
    report["curves"][std::to_string(k)] = ordered_json::parse(accuracy_curve_to_json(curve))["points"];
  }
  report["recommendation"] = {{"w", best_w}};
  if (!given) report["recommendation"]["k"] = best_k;

  if (o.report_out) {
    write_text(*o.report_out, csv.str());
  } else {
    out << csv.str();
  }
  if (cfg.outputs.metrics) write_text(*cfg.outputs.metrics, report.dump(2) + "\n");
  out << "recommended w=" << best_w;
  if (!given) out << " k=" << best_k;
  out << '\n';
  return kExitOk;
}

int cmd_serve(const Options& o, std::ostream& out) {
  RunConfig cfg = resolve_config(o);
  if (!cfg.serve.workload) throw ConfigError("serve needs --workload or serve.workload in the config");
  const ToyModel model = build_model(cfg);
  const std::string config_json = echo_config(cfg);
  const auto workload = load_workload(*cfg.serve.workload, model.vocab());

  DraftFactory factory;
  switch (cfg.draft.kind) {
    case DraftKind::synthetic:
      factory = synthetic_draft_factory(model, cfg.draft.synthetic);
      break;
    case DraftKind::replay:
      throw ConfigError("serve does not support replayed drafts");
    case DraftKind::none:
      break;
  }
  auto executor = make_executor(cfg.workers, cfg.pipeline.stages);

  ordered_json doc;
  doc["config"] = ordered_json::parse(config_json);
  doc["reports"] = ordered_json::array();
  for (std::size_t b : cfg.serve.batch_sizes) {
    BatchConfig bc{b, cfg.serve.w_total, cfg.serve.max_batch_nodes};
    const ServeReport rep = serve_workload(model, cfg.pipeline, cfg.cost, bc, factory, workload, executor.get());
    if (rep.metrics.tbt_p99 < rep.metrics.tbt_p50) throw InvariantViolation("p99 below p50 in serve report");
    if (o.check_oracle) {
      for (const auto& r : rep.requests) {
        check_lossless(model, workload[r.id].prompt, r.tokens, "request " + std::to_string(r.id));
      }
    }
    doc["reports"].push_back(ordered_json::parse(rep.to_json()));
    out << "B=" << b << " throughput_tps=" << rep.metrics.throughput_tps << " tbt_mean_ms=" << rep.metrics.tbt_mean_ms
        << " tbt_p50=" << rep.metrics.tbt_p50 << " tbt_p99=" << rep.metrics.tbt_p99 << '\n';
  }
  if (cfg.outputs.metrics) write_text(*cfg.outputs.metrics, doc.dump(2) + "\n");
  if (o.check_oracle) out << "oracle: every request matches sequential decoding\n";
  return kExitOk;
}

int cmd_validate(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const ToyModel model = build_model(cfg);
  if (cfg.draft.trace) out << "draft trace: " << load_draft_trace(*cfg.draft.trace).size() << " records\n";
  if (cfg.serve.workload) {
    out << "workload: " << load_workload(*cfg.serve.workload, model.vocab()).size() << " requests\n";
  }
  if (o.tree) {
    const std::string bytes = read_text(*o.tree);
    const SpecTree t = SpecTree::decode(
        std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()), model.vocab());
    out << "tree: " << t.size() << " nodes, " << t.level_count() << " levels\n";
  }
  out << cfg.to_json() << '\n';
  return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Speculative token-tree pipeline simulator", "treepipe"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Override the config seed");
    sub->add_option("--mode", o.mode, "speculative or vanilla-pp");
    sub->add_flag("--check-oracle", o.check_oracle, "Compare output with sequential decoding");
    sub->add_flag("--workers", o.workers, "Run each stage on its own thread");
    sub->add_option("--metrics-out", o.metrics_out, "Write metrics JSON here");
    sub->add_option("--cost-model", o.cost_model, "Cost model JSON")->check(CLI::ExistingFile);
  };

  auto* decode = app.add_subcommand("decode", "Run the pipeline on the configured prompt");
  auto* replay = app.add_subcommand("replay", "Decode with a recorded draft trace");
  for (auto* sub : {decode, replay}) {
    common(sub);
    sub->add_option("--trace-out", o.trace_out, "Write the per-stage timeline CSV here");
    sub->add_option("--tokens-out", o.tokens_out, "Write emitted tokens JSON here");
    sub->add_option("--record-draft", o.record_draft, "Record every draft answer as JSON Lines");
  }
  decode->add_option("--draft-trace", o.draft_trace, "Replay this draft trace")->check(CLI::ExistingFile);
  replay->add_option("--draft-trace", o.draft_trace, "Draft trace (JSON Lines)")->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep", "Measure accuracy and TBT over a (w, k) grid");
  common(sweep);
  sweep->add_option("--widths", o.widths, "Tree widths")->delimiter(',');
  sweep->add_option("--ks", o.ks, "Candidates per node")->delimiter(',');
  sweep->add_option("--accuracy-curve", o.accuracy_curve, "Recommend from this curve instead of the fitted ones")
      ->check(CLI::ExistingFile);
  sweep->add_option("--report-out", o.report_out, "Write the CSV table here instead of stdout");

  auto* serve = app.add_subcommand("serve", "Run a multi-request workload at several batch sizes");
  common(serve);
  serve->add_option("--workload", o.workload, "Workload (JSON Lines)")->check(CLI::ExistingFile);
  serve->add_option("--batch-sizes", o.batch_sizes, "Batch sizes")->delimiter(',');

  auto* validate = app.add_subcommand("validate", "Check a config and the files it references");
  common(validate);
  validate->add_option("--draft-trace", o.draft_trace, "Also parse this draft trace")->check(CLI::ExistingFile);
  validate->add_option("--workload", o.workload, "Also parse this workload")->check(CLI::ExistingFile);
  validate->add_option("--tree", o.tree, "Also decode this encoded tree")->check(CLI::ExistingFile);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (decode->parsed()) return cmd_decode(o, false, out);
    if (replay->parsed()) return cmd_decode(o, true, out);
    if (sweep->parsed()) return cmd_sweep(o, out);
    if (serve->parsed()) return cmd_serve(o, out);
    if (validate->parsed()) return cmd_validate(o, out);
  } catch (const OracleMismatch& e) {
    err << "lossless check failed: " << e.what() << '\n';
    return kExitInvariant;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    err << "parse error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const InvalidToken& e) {
    err << "invalid token: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "invariant violation: " << e.what() << '\n';
    return kExitInvariant;
  }
  return kExitUsage;
}

}  // namespace treepipe::cli

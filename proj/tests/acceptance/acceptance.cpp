// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

// Acceptance suite. Prints one PASS/FAIL line per criterion (plus indented
// detail lines) and exits non-zero if any criterion fails. Pass criterion
// numbers as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "../support/generators.hpp"
#include "../support/oracles.hpp"
#include "treepipe/batcher.hpp"
#include "treepipe/cli.hpp"
#include "treepipe/executor.hpp"
#include "treepipe/kv_cache.hpp"
#include "treepipe/perf_model.hpp"
#include "treepipe/pipeline.hpp"
#include "treepipe/run_config.hpp"
#include "treepipe/spec_tree.hpp"
#include "treepipe/toy_model.hpp"

namespace fs = std::filesystem;
using namespace treepipe;
using namespace treepipe::testing;

namespace {

struct Verdict {
  bool pass = true;
  std::string summary;
  std::vector<std::string> details;

  void fail(const std::string& why) {
    if (pass) summary = why;
    pass = false;
    details.push_back(why);
  }
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::vector<TokenId> random_tokens(Gen& g, std::size_t n, std::uint32_t vocab) {
  std::vector<TokenId> out;
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(static_cast<std::uint32_t>(g.range(0, vocab - 1)));
  return out;
}

/// Steps between consecutive emissions. The first gap is the pipeline fill
/// (prefill already produced the first token) and is skipped.
struct Cadence {
  std::size_t gaps = 0;
  std::size_t steps = 0;
  void add(const RunResult& r) {
    std::vector<std::uint64_t> at;
    for (const auto& o : r.outcomes) {
      if (o.emitted) at.push_back(o.step);
    }
    for (std::size_t i = 2; i < at.size(); ++i) {
      ++gaps;
      steps += at[i] - at[i - 1];
    }
  }
  double mean() const { return gaps == 0 ? 0.0 : static_cast<double>(steps) / static_cast<double>(gaps); }
};

// ---------------------------------------------------------------------------

Verdict lossless() {
  Verdict v;
  const double miss_levels[] = {0.0, 0.05, 0.5, 1.0};
  const std::size_t stage_counts[] = {2, 3, 4, 8};
  WorkerExecutor workers(8);
  std::size_t runs = 0, tokens = 0;
  for (std::uint64_t seed = 1; seed <= 240; ++seed) {
    Gen g(seed * 7919);
    ToyModelConfig mc{static_cast<std::uint32_t>(g.pick(std::vector<std::size_t>{64, 128, 256})), 32, 8, seed};
    const ToyModel model(mc);
    const auto prompt = random_tokens(g, g.range(1, 24), mc.vocab);

    SyntheticDraftConfig dc;
    dc.miss_prob = miss_levels[seed % 4];
    dc.top1_hit = std::min(g.unit(), 1.0 - dc.miss_prob);
    dc.rank_decay = g.unit();
    dc.seed = seed * 31;

    PipelineConfig pc;
    pc.stages = stage_counts[(seed / 4) % 4];
    pc.beam = {g.range(1, 8), g.range(2, 4)};
    pc.mode = seed % 17 == 0 ? Mode::vanilla_pp : Mode::speculative;

    auto draft = make_synthetic_draft(model, prompt, dc);
    Executor* exec = seed % 5 == 0 ? static_cast<Executor*>(&workers) : nullptr;
    const RunResult res = run_pipeline(model, pc, CostModel{}, draft.get(), prompt, 128, exec);
    const auto ref = sequential_decode(model, prompt, 128);
    ++runs;
    tokens += res.tokens.size();
    if (res.tokens != ref) {
      std::size_t at = 0;
      while (at < res.tokens.size() && at < ref.size() && res.tokens[at] == ref[at]) ++at;
      v.fail(fmt("seed %llu: first divergence at token %zu", static_cast<unsigned long long>(seed), at));
    }
  }
  if (v.pass) v.summary = fmt("%zu runs (%zu tokens) identical to sequential decoding", runs, tokens);
  return v;
}

// ---------------------------------------------------------------------------

/// Runs every level of `tree` through all layers on top of `kv`; returns the
/// hidden state of every node.
Embeddings forward_tree(const ToyModel& model, const SpecTree& tree, KvCache& kv, std::size_t from_level = 0) {
  Embeddings all(0, model.dim());
  const std::size_t base = kv.verified_count();
  for (std::size_t l = from_level; l < tree.level_count(); ++l) {
    const LevelSnapshot s = tree.level_snapshot(l);
    std::vector<std::uint64_t> pos(s.size(), base + l);
    const Embeddings out =
        forward_layers(model, {0, model.layer_count()}, model.embed(s.tokens, pos), s.ids, pos, s.rows, kv);
    for (std::size_t r = 0; r < out.rows(); ++r) all.append(out.row(r));
  }
  return all;
}

KvCache causal_prefix(const ToyModel& model, std::span<const TokenId> prefix) {
  KvCache kv(0, model.layer_count(), model.dim());
  std::vector<std::uint64_t> pos(prefix.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  forward_causal(model, {0, model.layer_count()}, model.embed(prefix, pos), pos, kv);
  return kv;
}

Verdict tree_mask() {
  Verdict v;
  const ToyModel model({32, 8, 2, 99});
  std::size_t trees = 0, mask_checks = 0, leaves = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 1000; ++seed) {
    Gen g(seed);
    // Random append/prune history, tracked independently by parent pointers.
    SpecTree t = SpecTree::new_root(TokenId{static_cast<std::uint32_t>(g.range(0, 31))}, 32, NodeId{0});
    RefTree ref = RefTree::of_root(NodeId{0}, t.token(0));
    const std::size_t ops = g.range(1, 16);
    for (std::size_t op = 0; op < ops; ++op) {
      const bool prune = t.level_count() > 1 && g.coin(0.3);
      if (prune) {
        const std::size_t c = g.range(t.level_begin(1), t.level_end(1) - 1);
        ref.prune_to(t.id(c));
        t = t.to_subtree_prune(c).tree;
      } else if (t.size() < 200) {
        auto layer = random_layer(g, t, std::min<std::size_t>(200 - t.size(), g.range(1, 40)), g.range(1, 5));
        const std::uint64_t first = t.next_id();
        t = t.layer_append(layer);
        ref.append(layer, first);
      }
      // Mask after every operation.
      const auto expect = ref.dfs_mask();
      ++mask_checks;
      bool same = std::vector<NodeId>(t.ids().begin(), t.ids().end()) == ref.ids;
      for (std::size_t i = 0; same && i < t.size(); ++i) {
        for (std::size_t j = 0; j < t.size(); ++j) {
          if (t.mask(i, j) != expect[i][j]) {
            same = false;
            break;
          }
        }
      }
      if (!same) v.fail(fmt("seed %llu op %zu: mask differs from parent-pointer DFS", (unsigned long long)seed, op));
    }
    ++trees;

    // Per-leaf tree forward against a causal pass over prefix + root path.
    const auto prefix = random_tokens(g, g.range(1, 6), 32);
    KvCache kv = causal_prefix(model, prefix);
    const Embeddings h = forward_tree(model, t, kv);
    std::set<std::size_t> parents;
    for (std::size_t i = 1; i < t.size(); ++i) parents.insert(t.parent(i));
    for (std::size_t i = 0; i < t.size(); ++i) {
      if (parents.contains(i)) continue;
      std::vector<TokenId> seq = prefix;
      for (auto tok : ref.root_path_tokens(i)) seq.push_back(tok);
      const double d = max_abs_diff(h.row(i), causal_last_hidden(model, seq));
      worst = std::max(worst, d);
      ++leaves;
      if (d > 1e-9) v.fail(fmt("seed %llu leaf %zu: |diff| = %.3g", (unsigned long long)seed, i, d));
    }
  }
  if (v.pass) {
    v.summary = fmt("%zu trees, %zu mask reconstructions exact, %zu leaves within %.2g", trees, mask_checks, leaves,
                    worst);
  }
  return v;
}

// ---------------------------------------------------------------------------

Verdict kv_pruning() {
  Verdict v;
  const ToyModel model({32, 8, 3, 5});
  std::size_t prunes = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 300; ++seed) {
    Gen g(seed + 100000);
    std::vector<TokenId> verified = random_tokens(g, g.range(1, 6), 32);
    SpecTree t = SpecTree::new_root(TokenId{static_cast<std::uint32_t>(g.range(0, 31))}, 32);
    for (std::size_t l = 0, n = g.range(1, 5); l < n; ++l) t = t.layer_append(random_layer(g, t, 30, 4));
    KvCache kv = causal_prefix(model, verified);
    forward_tree(model, t, kv);

    for (std::size_t round = 0, rounds = g.range(1, 6); round < rounds && t.level_count() > 1; ++round) {
      const std::size_t c = g.range(t.level_begin(1), t.level_end(1) - 1);
      const auto pr = t.to_subtree_prune(c);
      // The old root becomes verified; speculative rows follow the survivors.
      verified.push_back(t.token(0));
      kv.promote(1);
      BitVector keep(kv.size());
      for (std::size_t r = 0; r < kv.verified_count(); ++r) keep.set(r);
      for (std::size_t j = 1; j < t.size(); ++j) {
        if (pr.survivors.test(j)) keep.set(kv.verified_count() + j - 1);
      }
      const std::size_t verified_before = kv.verified_count();
      kv = kv_prune(kv, keep);
      if (kv.verified_count() != verified_before) v.fail(fmt("seed %llu: verified prefix shrank", (unsigned long long)seed));
      t = pr.tree;
      ++prunes;

      // A verified row can never be pruned away.
      BitVector bad(kv.size(), true);
      bad.set(g.range(0, kv.verified_count() - 1), false);
      bool threw = false;
      try {
        (void)kv_prune(kv, bad);
      } catch (const ContractViolation&) {
        threw = true;
      }
      if (!threw) v.fail(fmt("seed %llu: dropping a verified row was accepted", (unsigned long long)seed));

      // Extend and compare against recompute from scratch.
      const std::size_t old_levels = t.level_count();
      t = t.layer_append(random_layer(g, t, 30, 4));
      const Embeddings fresh_rows = forward_tree(model, t, kv, old_levels);

      KvCache scratch = causal_prefix(model, verified);
      const Embeddings all = forward_tree(model, t, scratch);
      if (scratch.size() != kv.size()) {
        v.fail(fmt("seed %llu: cache sizes %zu vs %zu", (unsigned long long)seed, kv.size(), scratch.size()));
        break;
      }
      for (std::size_t l = 0; l < model.layer_count(); ++l) {
        for (std::size_t r = 0; r < kv.size(); ++r) {
          worst = std::max({worst, max_abs_diff(kv.key(l, r), scratch.key(l, r)),
                            max_abs_diff(kv.value(l, r), scratch.value(l, r))});
        }
      }
      const std::size_t first_new = t.level_begin(old_levels);
      for (std::size_t r = 0; r < fresh_rows.rows(); ++r) {
        worst = std::max(worst, max_abs_diff(fresh_rows.row(r), all.row(first_new + r)));
      }
      if (worst > 1e-9) {
        v.fail(fmt("seed %llu: pruned cache differs from recompute by %.3g", (unsigned long long)seed, worst));
        break;
      }
    }
  }
  if (v.pass) v.summary = fmt("%zu prunes, max |diff| vs recompute %.2g, verified rows never dropped", prunes, worst);
  return v;
}

// ---------------------------------------------------------------------------

Verdict cadence_formula() {
  Verdict v;
  const ToyModel model({64, 8, 16, 4242});
  const double ps[] = {0.8, 0.9, 0.95, 0.99};
  const std::size_t ms[] = {4, 8, 16};
  const std::size_t runs = 40, per_run = 256;
  std::size_t outside = 0;
  for (double p : ps) {
    for (std::size_t m : ms) {
      Cadence c;
      for (std::size_t r = 0; r < runs; ++r) {
        Gen g(static_cast<std::uint64_t>(p * 1000) * 100003 + m * 101 + r);
        const auto prompt = random_tokens(g, 4, 64);
        SyntheticDraftConfig dc{p, 0.5, 1.0 - p, 1000 + r};
        PipelineConfig pc;
        pc.stages = m;
        pc.beam = {1, 2};
        pc.audit = false;
        auto draft = make_synthetic_draft(model, prompt, dc);
        c.add(run_pipeline(model, pc, CostModel::unit(), draft.get(), prompt, per_run));
      }
      const double want = 1.0 + (1.0 - p) * static_cast<double>(m);
      const double alt = p + (1.0 - p) * static_cast<double>(m);
      const double err = std::abs(c.mean() - want) / want;
      const std::string line = fmt("p=%.2f m=%2zu: %.4f steps/token over %zu tokens, target %.4f (%+.1f%%), "
                                   "p + (1-p)m = %.4f",
                                   p, m, c.mean(), c.gaps, want, 100.0 * (c.mean() - want) / want, alt);
      if (err > 0.05) {
        ++outside;
        v.fail(line);
      } else {
        v.details.push_back(line);
      }
    }
  }
  if (v.pass) {
    v.summary = "all 12 cells within 5% of 1 + (1-p)m";
  } else {
    v.summary = fmt("%zu of 12 cells outside 5%% of 1 + (1-p)m", outside);
  }
  return v;
}

// ---------------------------------------------------------------------------

Verdict ideal_cadence() {
  Verdict v;
  const ToyModel model({64, 16, 8, 77});
  for (std::size_t m : {2, 4, 8}) {
    Gen g(m);
    const auto prompt = random_tokens(g, 6, 64);
    PipelineConfig pc;
    pc.stages = m;
    pc.beam = {4, 2};
    auto perfect = make_synthetic_draft(model, prompt, {1.0, 0.5, 0.0, 3});
    const RunResult hit = run_pipeline(model, pc, CostModel{}, perfect.get(), prompt, 96);
    auto never = make_synthetic_draft(model, prompt, {0.0, 0.5, 1.0, 3});
    const RunResult miss = run_pipeline(model, pc, CostModel{}, never.get(), prompt, 96);
    pc.mode = Mode::vanilla_pp;
    const RunResult vanilla = run_pipeline(model, pc, CostModel{}, nullptr, prompt, 96);
    const std::string line = fmt("m=%zu: perfect %.6f, always-miss %.6f, vanilla %.6f steps/token", m,
                                 hit.metrics.steps_per_token, miss.metrics.steps_per_token,
                                 vanilla.metrics.steps_per_token);
    const double md = static_cast<double>(m);
    if (hit.metrics.steps_per_token != 1.0 || miss.metrics.steps_per_token != md ||
        vanilla.metrics.steps_per_token != md) {
      v.fail(line);
    } else {
      v.details.push_back(line);
    }
    // Prefill already yields the first token; the second one waits for its
    // node to cross all m stages.
    std::vector<std::uint64_t> at;
    for (const auto& o : hit.outcomes) {
      if (o.emitted) at.push_back(o.step);
    }
    if (at.size() < 2 || at[1] - at[0] != m) v.fail(fmt("m=%zu: pipeline fill is not m steps", m));
  }
  if (v.pass) v.summary = "perfect draft 1.0 steps/token, always-miss and vanilla exactly m (m = 2, 4, 8)";
  return v;
}

// ---------------------------------------------------------------------------

Verdict fixed_width() {
  Verdict v;
  std::size_t instances = 0, ties = 0;
  for (std::uint64_t seed = 1; seed <= 1200; ++seed) {
    Gen g(seed * 13 + 5);
    const std::uint32_t vocab = static_cast<std::uint32_t>(g.range(8, 64));
    SpecTree t = random_tree(g, vocab, g.range(1, 120));
    const bool dyadic = seed % 2 == 0;
    const std::size_t k = g.range(1, 12);
    const std::size_t w = g.range(1, 80);
    std::map<std::size_t, std::vector<Candidate>> cands;
    for (std::size_t node : t.bottom_level()) cands[node] = random_candidates(g, vocab, k, dyadic);
    ScriptedDraft draft(cands);
    const auto got = expand_fixed_width(t, {w, k}, draft, {}, 0);
    const auto want = brute_force_select(t, cands, k, w);
    ++instances;
    if (dyadic) ++ties;
    if (got != want) v.fail(fmt("seed %llu: selection differs (w=%zu k=%zu)", (unsigned long long)seed, w, k));
  }
  if (v.pass) {
    v.summary = fmt("%zu instances equal to exhaustive sort (%zu with tie-heavy dyadic probs)", instances, ties);
  }
  return v;
}

// ---------------------------------------------------------------------------

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("treepipe-acceptance-" + std::to_string(std::chrono::steady_clock::now().time_since_epoch().count()));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

void write(const std::string& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(const std::vector<std::string>& args, std::string* stdout_text = nullptr) {
  std::ostringstream out, err;
  const int rc = cli::run(args, out, err);
  if (stdout_text) *stdout_text = out.str();
  if (rc != 0) std::cerr << err.str();
  return rc;
}

Verdict width_selection() {
  Verdict v;
  // Accuracy rises until w = 64 and then flattens; widths above 64 cost one
  // extra quantum.
  const AccuracyCurve curve({{1, 0.30},
                             {2, 0.40},
                             {4, 0.50},
                             {8, 0.60},
                             {16, 0.70},
                             {32, 0.80},
                             {48, 0.86},
                             {64, 0.90},
                             {80, 0.905},
                             {112, 0.91},
                             {128, 0.912}});
  const std::vector<std::size_t> grid{1, 2, 4, 8, 16, 32, 48, 64, 80, 112, 128};
  for (std::size_t m : {2, 4, 8}) {
    const std::size_t w = select_width(CostModel{}, curve, m, grid);
    if (w != 64) v.fail(fmt("m=%zu: select_width returned %zu", m, w));
  }

  // Sweep over the full grid on synthetic defaults.
  TempDir dir;
  write(dir.file("c.json"),
        R"({"seed": 11, "model": {"vocab": 256, "dim": 16, "layers": 8}, "pipeline": {"stages": 4},
            "sweep": {"ks": [4, 8, 16, 32], "tokens": 48}})");
  std::string text;
  if (cli({"sweep", "--config", dir.file("c.json"), "--report-out", dir.file("sweep.csv"), "--metrics-out",
           dir.file("sweep.json")},
          &text) != 0) {
    v.fail("sweep command failed");
    return v;
  }
  std::ifstream csv(dir.file("sweep.csv"));
  std::string line;
  std::map<std::size_t, std::vector<std::pair<std::size_t, double>>> fitted;
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("k,", 0) == 0) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    fitted[std::stoul(cells[0])].push_back({std::stoul(cells[1]), std::stod(cells[5])});
    ++rows;
  }
  for (auto& [k, pts] : fitted) {
    std::sort(pts.begin(), pts.end());
    for (std::size_t i = 1; i < pts.size(); ++i) {
      if (pts[i].second < pts[i - 1].second) v.fail(fmt("k=%zu: fitted accuracy drops at w=%zu", k, pts[i].first));
    }
  }
  // The printed recommendation must be select_width on the fitted curves.
  const auto report = nlohmann::json::parse(slurp(dir.file("sweep.json")));
  std::size_t best_w = 0, best_k = 0;
  double best = 1e300;
  for (const auto& [k, pts] : fitted) {
    std::map<std::size_t, double> m;
    for (auto [w, p] : pts) m[w] = p;
    const AccuracyCurve c(m);
    const std::size_t w = select_width(CostModel{}, c, 4, grid);
    const double tbt = expected_tbt_uniform(CostModel{}.step_cost(w), c.at(w), 4);
    if (tbt < best) {
      best = tbt;
      best_w = w;
      best_k = k;
    }
  }
  if (report["recommendation"]["w"] != best_w || report["recommendation"]["k"] != best_k) {
    v.fail("sweep recommendation disagrees with select_width on the fitted curves");
  }
  v.details.push_back(fmt("sweep: %zu rows, recommended w=%zu k=%zu", rows, best_w, best_k));
  if (v.pass) v.summary = "select_width picks 64 on a plateau curve; fitted sweep accuracy monotone in w for k >= 4";
  return v;
}

// ---------------------------------------------------------------------------

Verdict batching_isolation() {
  Verdict v;
  const ToyModel model({128, 16, 8, 8});
  Gen g(2026);
  std::vector<WorkloadRequest> workload;
  for (std::size_t i = 0; i < 16; ++i) {
    workload.push_back({g.range(0, 12), random_tokens(g, g.range(1, 20), 128), g.range(4, 40)});
  }
  std::stable_sort(workload.begin(), workload.end(),
                   [](const auto& a, const auto& b) { return a.arrival_step < b.arrival_step; });
  PipelineConfig pc;
  pc.stages = 4;
  const auto factory = synthetic_draft_factory(model, SyntheticDraftConfig::calibrated(9));
  WorkerExecutor workers(4);
  double prev_tps = 0.0;
  for (std::size_t b : {1, 2, 4, 8}) {
    for (bool threaded : {false, true}) {
      const ServeReport rep =
          serve_workload(model, pc, CostModel{}, {b, 64, 0}, factory, workload, threaded ? &workers : nullptr);
      for (const auto& r : rep.requests) {
        const auto& req = workload[r.id];
        if (r.tokens != sequential_decode(model, req.prompt, req.max_new_tokens)) {
          v.fail(fmt("B=%zu request %zu differs from its solo oracle run", b, r.id));
        }
        if (r.metrics.tbt_p99 < r.metrics.tbt_p50) v.fail(fmt("B=%zu request %zu: p99 < p50", b, r.id));
      }
      if (rep.metrics.tbt_p99 < rep.metrics.tbt_p50) v.fail(fmt("B=%zu: pooled p99 < p50", b));
      if (!threaded) {
        v.details.push_back(fmt("B=%zu: %.3f tok/s, TBT mean %.1f p50 %.1f p99 %.1f ms", b, rep.metrics.throughput_tps,
                                rep.metrics.tbt_mean_ms, rep.metrics.tbt_p50, rep.metrics.tbt_p99));
        if (rep.metrics.throughput_tps + 1e-9 < prev_tps) v.fail(fmt("B=%zu: throughput fell", b));
        prev_tps = rep.metrics.throughput_tps;
      }
    }
  }
  if (v.pass) v.summary = "16 mixed requests match solo decoding at B = 1, 2, 4, 8; p99 >= p50; throughput rises with B";
  return v;
}

// ---------------------------------------------------------------------------

Verdict determinism() {
  Verdict v;
  TempDir dir;
  write(dir.file("c.json"),
        R"({"seed": 3, "model": {"vocab": 64, "dim": 16, "layers": 8}, "pipeline": {"stages": 4},
            "beam": {"w": 16, "k": 4}, "max_tokens": 96, "serve": {"batch_sizes": [1, 4]}})");
  Gen g(5);
  std::ostringstream wl;
  for (int i = 0; i < 6; ++i) {
    wl << R"({"arrival_step": )" << g.range(0, 6) << R"(, "prompt_tokens": [)";
    for (int t = 0; t < 5; ++t) wl << (t ? "," : "") << g.range(0, 63);
    wl << R"(], "max_new_tokens": )" << g.range(5, 20) << "}\n";
  }
  write(dir.file("w.jsonl"), wl.str());

  auto run_all = [&](const std::string& tag, bool workers) {
    std::vector<std::string> extra;
    if (workers) extra.push_back("--workers");
    auto with = [&](std::vector<std::string> a) {
      a.insert(a.end(), extra.begin(), extra.end());
      return a;
    };
    const auto p = [&](const std::string& n) { return dir.file(tag + "-" + n); };
    int rc = cli(with({"decode", "--config", dir.file("c.json"), "--tokens-out", p("tokens.json"), "--metrics-out",
                       p("metrics.json"), "--trace-out", p("trace.csv")}));
    rc |= cli(with({"serve", "--config", dir.file("c.json"), "--workload", dir.file("w.jsonl"), "--metrics-out",
                    p("serve.json")}));
    rc |= cli(with({"sweep", "--config", dir.file("c.json"), "--widths", "1,8,64", "--ks", "2,4", "--report-out",
                    p("sweep.csv"), "--metrics-out", p("sweep.json")}));
    return rc;
  };
  const std::vector<std::string> outputs{"tokens.json", "metrics.json", "trace.csv", "serve.json", "sweep.csv",
                                         "sweep.json"};
  if (run_all("s1", false) | run_all("s2", false) | run_all("w1", true) | run_all("w2", true)) {
    v.fail("a command exited non-zero");
    return v;
  }
  for (const auto& name : outputs) {
    const std::string s1 = slurp(dir.file("s1-" + name)), s2 = slurp(dir.file("s2-" + name));
    const std::string w1 = slurp(dir.file("w1-" + name)), w2 = slurp(dir.file("w2-" + name));
    if (s1.empty()) v.fail(name + " is empty");
    if (s1 != s2) v.fail(name + " differs between two single-threaded runs");
    if (w1 != w2) v.fail(name + " differs between two worker runs");
    // Across modes only the echoed "workers" flag may differ.
    std::string w1n = w1;
    for (const std::string from : {"\"workers\":true", "\"workers\": true"}) {
      for (std::size_t at; (at = w1n.find(from)) != std::string::npos;) {
        w1n.replace(at, from.size(), from.substr(0, from.size() - 4) + "false");
      }
    }
    if (w1n != s1) v.fail(name + " differs between single-threaded and worker execution");
  }
  if (v.pass) {
    v.summary = "decode, serve and sweep outputs byte-identical across reruns, single-threaded and with workers";
  }
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"lossless decoding", lossless},
      {"tree mask and tree attention", tree_mask},
      {"KV cache pruning", kv_pruning},
      {"steps per token vs 1 + (1-p)m", cadence_formula},
      {"ideal and worst-case cadence", ideal_cadence},
      {"fixed-width selection", fixed_width},
      {"width selection and sweep", width_selection},
      {"batching isolation", batching_isolation},
      {"determinism", determinism},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));

  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.contains(i + 1)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.fail(std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %zu %s: %s: %s (%.1fs)\n", i + 1, v.pass ? "PASS" : "FAIL", criteria[i].first,
                v.summary.c_str(), secs);
    for (const auto& d : v.details) std::printf("    %s\n", d.c_str());
    std::fflush(stdout);
    failed += v.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}

// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/token_source.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <unordered_set>

#include <json.hpp>

namespace treepipe {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double unit(std::uint64_t& state) { return static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53; }

}  // namespace

double SyntheticDraftConfig::decay_for_hit(double top1_hit, double miss_prob, std::size_t k, double target) {
  const double rest = 1.0 - top1_hit - miss_prob;
  if (k < 2 || rest <= 0.0) return 0.0;
  // target = top1 + rest * (1 - decay^(k-1))
  const double tail = 1.0 - (target - top1_hit) / rest;
  if (tail <= 0.0) return 0.0;
  if (tail >= 1.0) return 1.0;
  return std::pow(tail, 1.0 / static_cast<double>(k - 1));
}

SyntheticDraftConfig SyntheticDraftConfig::calibrated(std::uint64_t seed) {
  SyntheticDraftConfig cfg;
  cfg.top1_hit = 0.62;
  cfg.miss_prob = 0.005;
  cfg.rank_decay = decay_for_hit(cfg.top1_hit, cfg.miss_prob, 32, 0.99);
  cfg.seed = seed;
  return cfg;
}

double SyntheticDraftConfig::hit_at(std::size_t k) const {
  if (k == 0) return 0.0;
  const double rest = std::max(0.0, 1.0 - top1_hit - miss_prob);
  return top1_hit + rest * (1.0 - std::pow(rank_decay, static_cast<double>(k - 1)));
}

void SyntheticDraftConfig::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!in_unit(top1_hit) || !in_unit(rank_decay) || !in_unit(miss_prob)) {
    throw ConfigError("synthetic draft probabilities must lie in [0, 1]");
  }
  if (top1_hit + miss_prob > 1.0 + 1e-12) throw ConfigError("top1_hit + miss_prob must not exceed 1");
}

std::vector<Candidate> synthetic_draft(const SyntheticDraftConfig& cfg, std::uint32_t vocab,
                                       std::optional<TokenId> oracle_next, std::size_t k,
                                       std::uint64_t call_index) {
  if (k == 0) return {};
  std::uint64_t state = cfg.seed ^ (call_index * 0xd1b54a32d192ed03ULL);
  splitmix64(state);

  // Rank of the oracle token, 1-based; 0 = absent.
  std::size_t rank = 0;
  const double u = unit(state);
  if (oracle_next) {
    if (u < cfg.top1_hit) {
      rank = 1;
    } else if (u < 1.0 - cfg.miss_prob) {
      std::size_t extra = 0;
      if (cfg.rank_decay > 0.0) {
        const double g = unit(state);
        if (cfg.rank_decay >= 1.0) {
          extra = k;  // never lands inside the window
        } else {
          const double r = std::floor(std::log1p(-g) / std::log(cfg.rank_decay));
          extra = r > static_cast<double>(k) ? k : static_cast<std::size_t>(r);
        }
      }
      rank = 2 + extra;
    }
  }

  const std::size_t available = oracle_next ? vocab - 1 : vocab;
  const bool oracle_in = rank != 0 && rank <= k && rank <= vocab;
  const std::size_t fillers = std::min<std::size_t>(oracle_in ? k - 1 : k, available);
  const std::size_t count = fillers + (oracle_in ? 1 : 0);

  std::vector<TokenId> filler;
  std::unordered_set<std::uint32_t> used;
  if (oracle_next) used.insert(oracle_next->value);
  while (filler.size() < fillers) {
    const auto t = static_cast<std::uint32_t>(splitmix64(state) % vocab);
    if (used.insert(t).second) filler.emplace_back(t);
  }

  const double ratio = std::clamp(cfg.rank_decay, 0.05, 0.95);
  const double norm = (1.0 - ratio) / (1.0 - std::pow(ratio, static_cast<double>(count)));
  std::vector<Candidate> out;
  out.reserve(count);
  std::size_t next_filler = 0;
  double weight = norm;
  for (std::size_t r = 1; r <= count; ++r) {
    const TokenId tok = (oracle_in && r == rank) ? *oracle_next : filler[next_filler++];
    out.push_back({tok, weight});
    weight *= ratio;
  }
  return out;
}

SyntheticDraft::SyntheticDraft(SyntheticDraftConfig cfg, std::uint32_t vocab, NextTokenOracle oracle)
    : cfg_(cfg), vocab_(vocab), oracle_(std::move(oracle)) {
  cfg_.validate();
}

std::vector<Candidate> SyntheticDraft::propose(const DraftRequest& request) {
  const auto truth = oracle_ ? oracle_(request.context) : std::nullopt;
  return synthetic_draft(cfg_, vocab_, truth, request.k, calls_++);
}

// ---------------------------------------------------------------------------
// Trace files

std::vector<DraftRecord> parse_draft_trace(std::istream& in) {
  std::vector<DraftRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      DraftRecord rec;
      rec.step = j.at("step").get<std::uint64_t>();
      rec.frontier_node = j.at("frontier_node").get<std::size_t>();
      for (const auto& c : j.at("candidates")) {
        const auto prob = c.at("prob").get<double>();
        if (!(prob > 0.0 && prob <= 1.0)) throw ParseError("candidate prob outside (0, 1]", line_no);
        rec.candidates.push_back({TokenId{c.at("token").get<std::uint32_t>()}, prob});
      }
      records.push_back(std::move(rec));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("malformed draft trace: ") + e.what(), line_no);
    }
  }
  return records;
}

std::vector<DraftRecord> load_draft_trace(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open draft trace " + path);
  return parse_draft_trace(in);
}

std::string format_draft_record(const DraftRecord& record) {
  nlohmann::json j;
  j["step"] = record.step;
  j["frontier_node"] = record.frontier_node;
  j["candidates"] = nlohmann::json::array();
  for (const auto& c : record.candidates) j["candidates"].push_back({{"token", c.token.value}, {"prob", c.prob}});
  return j.dump();
}

ReplayDraft::ReplayDraft(std::vector<DraftRecord> records) : records_(std::move(records)) {}

std::vector<Candidate> ReplayDraft::propose(const DraftRequest& request) {
  if (next_ >= records_.size()) throw SourceUnavailable("draft trace exhausted", true);
  const auto& rec = records_[next_];
  if (rec.step != request.step || rec.frontier_node != request.frontier_node) {
    throw ParseError("draft trace out of sync: expected step " + std::to_string(request.step) + " node " +
                         std::to_string(request.frontier_node),
                     next_ + 1);
  }
  if (rec.candidates.size() < request.k) {
    throw ParseError("insufficient candidates: trace has " + std::to_string(rec.candidates.size()) +
                         ", requested " + std::to_string(request.k),
                     next_ + 1);
  }
  ++next_;
  return {rec.candidates.begin(), rec.candidates.begin() + static_cast<std::ptrdiff_t>(request.k)};
}

std::unique_ptr<DraftProvider> replay_draft(const std::string& path) {
  return std::make_unique<ReplayDraft>(load_draft_trace(path));
}

RecordingDraft::RecordingDraft(DraftProvider& inner, std::ostream& out) : inner_(inner), out_(out) {}

std::vector<Candidate> RecordingDraft::propose(const DraftRequest& request) {
  auto cands = inner_.propose(request);
  out_ << format_draft_record({request.step, request.frontier_node, cands}) << '\n';
  return cands;
}

// ---------------------------------------------------------------------------
// Fixed-width expansion

void BeamConfig::validate() const {
  if (w < 1) throw ConfigError("tree width w must be >= 1");
  if (k < 2) throw ConfigError("candidates per node k must be >= 2");
}

std::vector<LayerChild> expand_fixed_width(const SpecTree& tree, const BeamConfig& beam, DraftProvider& draft,
                                           std::span<const TokenId> verified, std::uint64_t step) {
  struct Scored {
    LayerChild child;
    double cumulative;
  };
  std::vector<Scored> pool;
  std::vector<TokenId> context(verified.begin(), verified.end());
  if (context.empty()) context.push_back(tree.token(0));
  const std::size_t base = context.size();

  for (std::size_t node : tree.bottom_level()) {
    // Root path of `node`, excluding the root (already the last verified token).
    context.resize(base);
    std::vector<TokenId> path;
    for (std::size_t i = node; i != 0; i = tree.parent(i)) path.push_back(tree.token(i));
    context.insert(context.end(), path.rbegin(), path.rend());

    DraftRequest req{step, node, context, beam.k};
    const auto cands = draft.propose(req);
    const double parent_cum = tree.cumulative_prob(node);
    std::unordered_set<std::uint32_t> seen;
    for (const auto& c : cands) {
      if (c.token.value >= tree.vocab()) throw InvalidToken("draft proposed token outside vocabulary");
      if (!(c.prob > 0.0 && c.prob <= 1.0)) throw StructuralError("draft proposed prob outside (0, 1]");
      if (!seen.insert(c.token.value).second) throw StructuralError("draft proposed a duplicate token");
      pool.push_back({{node, c.token, c.prob}, c.prob * parent_cum});
    }
  }

  auto by_rank = [](const Scored& a, const Scored& b) {
    if (a.cumulative != b.cumulative) return a.cumulative > b.cumulative;
    if (a.child.parent_index != b.child.parent_index) return a.child.parent_index < b.child.parent_index;
    return a.child.token < b.child.token;
  };
  const std::size_t keep = std::min(beam.w, pool.size());
  std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep), pool.end(), by_rank);
  pool.resize(keep);

  std::vector<LayerChild> out;
  out.reserve(keep);
  for (const auto& s : pool) out.push_back(s.child);
  std::sort(out.begin(), out.end(), [](const LayerChild& a, const LayerChild& b) {
    if (a.parent_index != b.parent_index) return a.parent_index < b.parent_index;
    if (a.prob != b.prob) return a.prob > b.prob;
    return a.token < b.token;
  });
  return out;
}

}  // namespace treepipe

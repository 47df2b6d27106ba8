// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

// Reference implementations used as test oracles. None of them share code
// paths with the library beyond the toy model's causal forward.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "treepipe/kv_cache.hpp"
#include "treepipe/spec_tree.hpp"
#include "treepipe/token_source.hpp"
#include "treepipe/toy_model.hpp"

namespace treepipe::testing {

/// Parent-pointer model of a speculative tree, kept in node order.
struct RefTree {
  std::vector<NodeId> ids;
  std::vector<TokenId> tokens;
  std::map<NodeId, NodeId> parent;  // absent for the root

  static RefTree of_root(NodeId id, TokenId token) { return {{id}, {token}, {}}; }

  void append(std::span<const LayerChild> children, std::uint64_t first_id) {
    const std::vector<NodeId> before = ids;
    for (std::size_t c = 0; c < children.size(); ++c) {
      const NodeId id{first_id + c};
      ids.push_back(id);
      tokens.push_back(children[c].token);
      parent[id] = before.at(children[c].parent_index);
    }
  }

  bool descends_from(NodeId id, NodeId anc) const {
    for (;;) {
      if (id == anc) return true;
      auto it = parent.find(id);
      if (it == parent.end()) return false;
      id = it->second;
    }
  }

  void prune_to(NodeId root) {
    RefTree out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!descends_from(ids[i], root)) continue;
      out.ids.push_back(ids[i]);
      out.tokens.push_back(tokens[i]);
      if (ids[i] != root) out.parent[ids[i]] = parent.at(ids[i]);
    }
    *this = std::move(out);
  }

  /// mask[i][j] = node j is node i or one of its ancestors, found by a DFS
  /// from the root that carries the current root path.
  std::vector<std::vector<bool>> dfs_mask() const {
    const std::size_t n = ids.size();
    std::map<NodeId, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) index[ids[i]] = i;
    std::vector<std::vector<std::size_t>> children(n);
    for (const auto& [child, par] : parent) children[index.at(par)].push_back(index.at(child));
    std::vector<std::vector<bool>> mask(n, std::vector<bool>(n, false));
    std::vector<std::size_t> path;
    std::function<void(std::size_t)> visit = [&](std::size_t v) {
      path.push_back(v);
      for (std::size_t a : path) mask[v][a] = true;
      for (std::size_t c : children[v]) visit(c);
      path.pop_back();
    };
    visit(0);
    return mask;
  }

  std::vector<TokenId> root_path_tokens(std::size_t i) const {
    std::vector<TokenId> out;
    NodeId id = ids[i];
    for (;;) {
      out.push_back(tokens[static_cast<std::size_t>(std::find(ids.begin(), ids.end(), id) - ids.begin())]);
      auto it = parent.find(id);
      if (it == parent.end()) break;
      id = it->second;
    }
    std::reverse(out.begin(), out.end());
    return out;
  }
};

/// Final hidden state of the last token of `sequence`, computed by a fresh
/// causal pass over every layer.
inline std::vector<double> causal_last_hidden(const ToyModel& model, std::span<const TokenId> sequence) {
  std::vector<std::uint64_t> pos(sequence.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  KvCache kv(0, model.layer_count(), model.dim());
  const Embeddings out = forward_causal(model, {0, model.layer_count()}, model.embed(sequence, pos), pos, kv);
  const auto row = out.row(out.rows() - 1);
  return {row.begin(), row.end()};
}

/// Full ordering of every (frontier node, candidate) pair by cumulative
/// probability, then parent, then token; top `w` returned in append order.
inline std::vector<LayerChild> brute_force_select(const SpecTree& tree,
                                                  const std::map<std::size_t, std::vector<Candidate>>& cands,
                                                  std::size_t k, std::size_t w) {
  struct Entry {
    LayerChild child;
    double cum;
  };
  std::vector<Entry> all;
  for (std::size_t node : tree.bottom_level()) {
    double path = 1.0;
    for (std::size_t i = node;; i = tree.parent(i)) {
      path *= tree.prob(i);
      if (i == 0) break;
    }
    const auto& list = cands.at(node);
    for (std::size_t c = 0; c < list.size() && c < k; ++c) {
      all.push_back({{node, list[c].token, list[c].prob}, path * list[c].prob});
    }
  }
  std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) {
    if (a.cum != b.cum) return a.cum > b.cum;
    if (a.child.parent_index != b.child.parent_index) return a.child.parent_index < b.child.parent_index;
    return a.child.token < b.child.token;
  });
  if (all.size() > w) all.resize(w);
  std::vector<LayerChild> out;
  for (const auto& e : all) out.push_back(e.child);
  std::sort(out.begin(), out.end(), [](const LayerChild& a, const LayerChild& b) {
    if (a.parent_index != b.parent_index) return a.parent_index < b.parent_index;
    if (a.prob != b.prob) return a.prob > b.prob;
    return a.token < b.token;
  });
  return out;
}

/// Plain causal transformer written against the public weights: every row is
/// recomputed from scratch with no cache. Returns the final hidden rows.
inline std::vector<std::vector<double>> naive_causal_forward(const ToyModel& model, std::span<const TokenId> seq) {
  const std::size_t d = model.dim(), h = 4 * d, n = seq.size();
  std::vector<std::uint64_t> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = i;
  const Embeddings e = model.embed(seq, pos);
  std::vector<std::vector<double>> x(n);
  for (std::size_t r = 0; r < n; ++r) x[r].assign(e.row(r).begin(), e.row(r).end());

  auto mul = [](const std::vector<double>& v, const std::vector<double>& w, std::size_t out) {
    std::vector<double> y(out, 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
      for (std::size_t o = 0; o < out; ++o) y[o] += v[i] * w[i * out + o];
    }
    return y;
  };
  auto norm = [](std::vector<double>& v) {
    double mean = 0.0, var = 0.0;
    for (double a : v) mean += a;
    mean /= static_cast<double>(v.size());
    for (double a : v) var += (a - mean) * (a - mean);
    var /= static_cast<double>(v.size());
    for (double& a : v) a = (a - mean) / std::sqrt(var + 1e-5);
  };

  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const LayerWeights& w = model.layer(l);
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t r = 0; r < n; ++r) {
      q[r] = mul(x[r], w.wq, d);
      k[r] = mul(x[r], w.wk, d);
      v[r] = mul(x[r], w.wv, d);
    }
    for (std::size_t r = 0; r < n; ++r) {
      std::vector<double> s(r + 1);
      double mx = -1e300;
      for (std::size_t j = 0; j <= r; ++j) {
        double dot = 0.0;
        for (std::size_t i = 0; i < d; ++i) dot += q[r][i] * k[j][i];
        s[j] = dot / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& a : s) z += (a = std::exp(a - mx));
      std::vector<double> att(d, 0.0);
      for (std::size_t j = 0; j <= r; ++j) {
        for (std::size_t i = 0; i < d; ++i) att[i] += s[j] / z * v[j][i];
      }
      const auto proj = mul(att, w.wo, d);
      for (std::size_t i = 0; i < d; ++i) x[r][i] += proj[i];
      norm(x[r]);
      auto hid = mul(x[r], w.w1, h);
      for (std::size_t i = 0; i < h; ++i) hid[i] = std::max(0.0, hid[i] + w.b1[i]);
      const auto f = mul(hid, w.w2, d);
      for (std::size_t i = 0; i < d; ++i) x[r][i] += f[i] + w.b2[i];
      norm(x[r]);
    }
  }
  return x;
}

/// Greedy decoding by full recompute of the whole sequence per token.
inline std::vector<TokenId> naive_greedy(const ToyModel& model, std::vector<TokenId> seq, std::size_t steps) {
  std::vector<TokenId> out;
  for (std::size_t s = 0; s < steps; ++s) {
    const auto hidden = naive_causal_forward(model, seq).back();
    std::size_t best = 0;
    double best_logit = -1e300;
    const auto table = model.embedding_table();
    for (std::size_t t = 0; t < model.vocab(); ++t) {
      double dot = 0.0;
      for (std::size_t i = 0; i < model.dim(); ++i) dot += hidden[i] * table[t * model.dim() + i];
      if (dot > best_logit) {
        best_logit = dot;
        best = t;
      }
    }
    out.emplace_back(static_cast<std::uint32_t>(best));
    seq.push_back(out.back());
  }
  return out;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) return 1e300;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace treepipe::testing

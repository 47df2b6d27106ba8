// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#include "treepipe/toy_model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace treepipe {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kPositionScale = 0.1;

class Lcg {
 public:
  explicit Lcg(std::uint64_t seed) : state_(seed) {}

  double uniform() {
    state_ = state_ * 6364136223846793005ULL + 1442695040888963407ULL;
    return -0.1 + 0.2 * (static_cast<double>(state_ >> 11) * 0x1.0p-53);
  }

  std::vector<double> fill(std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform();
    return v;
  }

 private:
  std::uint64_t state_;
};

// y = x W with W stored [in][out].
void matvec(std::span<const double> x, const std::vector<double>& w, std::size_t out_dim, std::span<double> y) {
  std::fill(y.begin(), y.end(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double* row = w.data() + i * out_dim;
    for (std::size_t o = 0; o < out_dim; ++o) y[o] += xi * row[o];
  }
}

void layer_norm(std::span<double> x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
  for (double& v : x) v = (v - mean) * inv;
}

// Softmax attention over the listed cache rows, in list order.
void attend(std::span<const double> q, const KvCache& kv, std::size_t layer, std::span<const std::size_t> rows,
            std::span<double> out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.size()));
  std::vector<double> scores(rows.size());
  double max_score = -INFINITY;
  for (std::size_t a = 0; a < rows.size(); ++a) {
    const auto k = kv.key(layer, rows[a]);
    double s = 0.0;
    for (std::size_t i = 0; i < q.size(); ++i) s += q[i] * k[i];
    scores[a] = s * scale;
    max_score = std::max(max_score, scores[a]);
  }
  double total = 0.0;
  for (auto& s : scores) {
    s = std::exp(s - max_score);
    total += s;
  }
  std::fill(out.begin(), out.end(), 0.0);
  for (std::size_t a = 0; a < rows.size(); ++a) {
    const auto v = kv.value(layer, rows[a]);
    const double wgt = scores[a];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += wgt * v[i];
  }
  for (auto& o : out) o /= total;
}

// One transformer layer over new rows whose K/V rows start at `first_row`.
// visible(r) yields the cache rows row r attends to.
template <typename Visible>
void run_layer(const ToyModel& model, std::size_t l, Embeddings& x, std::size_t first_row, KvCache& kv,
               Visible&& visible) {
  const std::size_t d = model.dim();
  const std::size_t h = model.config().ffn_dim();
  const LayerWeights& w = model.layer(l);
  const std::size_t n = x.rows();

  std::vector<double> q(n * d), k(d), v(d);
  for (std::size_t r = 0; r < n; ++r) {
    matvec(x.row(r), w.wq, d, {q.data() + r * d, d});
    matvec(x.row(r), w.wk, d, k);
    matvec(x.row(r), w.wv, d, v);
    kv.append_row(l, k, v);
  }

  std::vector<double> att(d), proj(d), hidden(h), ffn(d);
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < n; ++r) {
    rows.clear();
    visible(r, first_row + r, rows);
    attend({q.data() + r * d, d}, kv, l, rows, att);
    matvec(att, w.wo, d, proj);
    auto xr = x.row(r);
    for (std::size_t i = 0; i < d; ++i) xr[i] += proj[i];
    layer_norm(xr);
    matvec(xr, w.w1, h, hidden);
    for (std::size_t i = 0; i < h; ++i) hidden[i] = std::max(0.0, hidden[i] + w.b1[i]);
    matvec(hidden, w.w2, d, ffn);
    for (std::size_t i = 0; i < d; ++i) xr[i] += ffn[i] + w.b2[i];
    layer_norm(xr);
  }
}

void check_range(const ToyModel& model, LayerRange range, const KvCache& kv) {
  if (range.begin >= range.end || range.end > model.layer_count()) throw ShapeError("bad layer range");
  if (kv.first_layer() != range.begin || kv.layer_count() != range.size() || kv.dim() != model.dim()) {
    throw ShapeError("kv cache does not match the layer range");
  }
}

template <typename T>
void write_raw(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_raw(std::ifstream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw ParseError("truncated model checkpoint");
  return value;
}

}  // namespace

void ToyModelConfig::validate() const {
  if (vocab < 16) throw ConfigError("model vocab must be >= 16");
  if (dim < 2 || dim % 2 != 0) throw ConfigError("model dim must be even and >= 2");
  if (layers < 2) throw ConfigError("model needs at least 2 layers");
}

Embeddings Embeddings::select(const BitVector& keep) const {
  if (keep.size() != rows()) throw ShapeError("selection mask does not match embedding rows");
  Embeddings out;
  out.dim = dim;
  for (auto r : keep.indices()) out.append(row(r));
  return out;
}

void Embeddings::append(std::span<const double> r) {
  if (r.size() != dim) throw ShapeError("embedding row has wrong width");
  data.insert(data.end(), r.begin(), r.end());
}

ToyModel::ToyModel(const ToyModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.dim;
  const std::size_t h = cfg_.ffn_dim();
  Lcg rng(cfg_.seed);
  embedding_ = rng.fill(std::size_t{cfg_.vocab} * d);
  layers_.reserve(cfg_.layers);
  for (std::uint32_t l = 0; l < cfg_.layers; ++l) {
    LayerWeights w;
    w.wq = rng.fill(d * d);
    w.wk = rng.fill(d * d);
    w.wv = rng.fill(d * d);
    w.wo = rng.fill(d * d);
    w.w1 = rng.fill(d * h);
    w.b1 = rng.fill(h);
    w.w2 = rng.fill(h * d);
    w.b2 = rng.fill(d);
    layers_.push_back(std::move(w));
  }
}

std::size_t ToyModel::parameter_count(const ToyModelConfig& cfg) {
  const std::size_t d = cfg.dim;
  return std::size_t{cfg.vocab} * d + std::size_t{cfg.layers} * (12 * d * d + 5 * d);
}

std::vector<double> ToyModel::flat_weights() const {
  std::vector<double> out(embedding_);
  for (const auto& w : layers_) {
    for (const auto* t : {&w.wq, &w.wk, &w.wv, &w.wo, &w.w1, &w.b1, &w.w2, &w.b2}) {
      out.insert(out.end(), t->begin(), t->end());
    }
  }
  return out;
}

std::uint64_t ToyModel::layer_checksum(std::size_t l) const {
  const auto& w = layers_.at(l);
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  for (const auto* t : {&w.wq, &w.wk, &w.wv, &w.wo, &w.w1, &w.b1, &w.w2, &w.b2}) {
    for (double x : *t) {
      const auto bits = std::bit_cast<std::uint64_t>(x);
      for (int b = 0; b < 8; ++b) {
        hash ^= (bits >> (8 * b)) & 0xff;
        hash *= 0x100000001b3ULL;
      }
    }
  }
  return hash;
}

Embeddings ToyModel::embed(std::span<const TokenId> tokens, std::span<const std::uint64_t> positions) const {
  if (tokens.size() != positions.size()) throw ShapeError("tokens and positions differ in length");
  const std::size_t d = dim();
  Embeddings out(tokens.size(), d);
  for (std::size_t r = 0; r < tokens.size(); ++r) {
    if (tokens[r].value >= cfg_.vocab) throw InvalidToken("token outside vocabulary");
    auto row = out.row(r);
    const double* e = embedding_.data() + std::size_t{tokens[r].value} * d;
    const double pos = static_cast<double>(positions[r]);
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = pos / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      row[i] = e[i] + kPositionScale * std::sin(angle);
      row[i + 1] = e[i + 1] + kPositionScale * std::cos(angle);
    }
  }
  return out;
}

std::vector<double> ToyModel::logits(std::span<const double> hidden) const {
  const std::size_t d = dim();
  if (hidden.size() != d) throw ShapeError("hidden state has wrong width");
  std::vector<double> out(cfg_.vocab);
  for (std::size_t t = 0; t < cfg_.vocab; ++t) {
    const double* e = embedding_.data() + t * d;
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) s += hidden[i] * e[i];
    out[t] = s;
  }
  return out;
}

void ToyModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path);
  write_raw<std::uint32_t>(out, cfg_.vocab);
  write_raw<std::uint32_t>(out, cfg_.dim);
  write_raw<std::uint32_t>(out, cfg_.layers);
  write_raw<std::uint64_t>(out, cfg_.seed);
  for (double x : flat_weights()) write_raw<double>(out, x);
}

ToyModel ToyModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path);
  ToyModel m;
  m.cfg_.vocab = read_raw<std::uint32_t>(in);
  m.cfg_.dim = read_raw<std::uint32_t>(in);
  m.cfg_.layers = read_raw<std::uint32_t>(in);
  m.cfg_.seed = read_raw<std::uint64_t>(in);
  m.cfg_.validate();
  const std::size_t d = m.cfg_.dim;
  const std::size_t h = m.cfg_.ffn_dim();
  auto read_n = [&](std::size_t n) {
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw ParseError("truncated model checkpoint");
    return v;
  };
  m.embedding_ = read_n(std::size_t{m.cfg_.vocab} * d);
  for (std::uint32_t l = 0; l < m.cfg_.layers; ++l) {
    LayerWeights w;
    w.wq = read_n(d * d);
    w.wk = read_n(d * d);
    w.wv = read_n(d * d);
    w.wo = read_n(d * d);
    w.w1 = read_n(d * h);
    w.b1 = read_n(h);
    w.w2 = read_n(h * d);
    w.b2 = read_n(d);
    m.layers_.push_back(std::move(w));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ParseError("trailing bytes in model checkpoint");
  return m;
}

Embeddings forward_layers(const ToyModel& model, LayerRange range, const Embeddings& in,
                          std::span<const NodeId> ids, std::span<const std::uint64_t> positions,
                          std::span<const BitVector> mask_rows, KvCache& kv) {
  check_range(model, range, kv);
  const std::size_t n = in.rows();
  if (in.dim != model.dim() || ids.size() != n || positions.size() != n || mask_rows.size() != n) {
    throw ShapeError("forward_layers inputs disagree in shape");
  }
  const std::size_t spec_before = kv.speculative_count();
  const std::size_t spec_after = spec_before + n;
  for (std::size_t r = 0; r < n; ++r) {
    if (mask_rows[r].size() != spec_after) throw ShapeError("mask row does not span the speculative cache");
    if (!mask_rows[r].test(spec_before + r)) throw ShapeError("mask row must include the node itself");
  }

  const std::size_t verified = kv.verified_count();
  const std::size_t first_row = kv.size();
  for (std::size_t r = 0; r < n; ++r) kv.push_slot({positions[r], ids[r]}, false);

  // Row lists are identical for every layer.
  std::vector<std::vector<std::size_t>> visible(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto& rows = visible[r];
    rows.reserve(verified + mask_rows[r].count());
    for (std::size_t j = 0; j < verified; ++j) rows.push_back(j);
    for (auto j : mask_rows[r].indices()) rows.push_back(verified + j);
  }

  Embeddings x = in;
  for (std::size_t l = range.begin; l < range.end; ++l) {
    run_layer(model, l, x, first_row, kv, [&](std::size_t r, std::size_t, std::vector<std::size_t>& rows) {
      rows = visible[r];
    });
  }
  return x;
}

Embeddings forward_causal(const ToyModel& model, LayerRange range, const Embeddings& in,
                          std::span<const std::uint64_t> positions, KvCache& kv) {
  check_range(model, range, kv);
  const std::size_t n = in.rows();
  if (in.dim != model.dim() || positions.size() != n) throw ShapeError("forward_causal inputs disagree in shape");
  if (kv.speculative_count() != 0) throw ContractViolation("causal forward needs a verified-only cache");

  const std::size_t first_row = kv.size();
  for (std::size_t r = 0; r < n; ++r) kv.push_slot({positions[r], std::nullopt}, true);

  Embeddings x = in;
  for (std::size_t l = range.begin; l < range.end; ++l) {
    run_layer(model, l, x, first_row, kv, [](std::size_t, std::size_t self, std::vector<std::size_t>& rows) {
      for (std::size_t j = 0; j <= self; ++j) rows.push_back(j);
    });
  }
  return x;
}

TokenId argmax_token(std::span<const double> logits) {
  std::size_t best = 0;
  for (std::size_t t = 1; t < logits.size(); ++t) {
    if (logits[t] > logits[best]) best = t;
  }
  return TokenId{static_cast<std::uint32_t>(best)};
}

TokenId verify_next(const ToyModel& model, std::span<const double> hidden) {
  return argmax_token(model.logits(hidden));
}

SequentialDecoder::SequentialDecoder(const ToyModel& model, std::span<const TokenId> prompt)
    : model_(model),
      tokens_(prompt.begin(), prompt.end()),
      prompt_len_(prompt.size()),
      kv_(0, model.layer_count(), model.dim()) {
  if (prompt.empty()) throw ContractViolation("prompt must not be empty");
  std::vector<std::uint64_t> pos(prompt.size());
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
  const auto out = forward_causal(model_, {0, model_.layer_count()}, model_.embed(prompt, pos), pos, kv_);
  pending_ = verify_next(model_, out.row(out.rows() - 1));
}

TokenId SequentialDecoder::advance() {
  const TokenId t = pending_;
  tokens_.push_back(t);
  const std::uint64_t pos = tokens_.size() - 1;
  const auto out = forward_causal(model_, {0, model_.layer_count()}, model_.embed({&t, 1}, {&pos, 1}),
                                  {&pos, 1}, kv_);
  pending_ = verify_next(model_, out.row(0));
  return t;
}

void SequentialDecoder::extend_to(std::size_t count) {
  while (tokens_.size() - prompt_len_ < count) advance();
}

std::optional<TokenId> SequentialDecoder::next_after(std::span<const TokenId> context) {
  const std::size_t len = context.size();
  if (len < prompt_len_) return std::nullopt;
  // Compare from the back: off-path contexts usually diverge near the end.
  for (std::size_t i = std::min(len, tokens_.size()); i-- > 0;) {
    if (context[i] != tokens_[i]) return std::nullopt;
  }
  while (tokens_.size() < len) {
    advance();
    if (context[tokens_.size() - 1] != tokens_.back()) return std::nullopt;
  }
  return tokens_.size() > len ? tokens_[len] : pending_;
}

std::vector<TokenId> sequential_decode(const ToyModel& model, std::span<const TokenId> prompt, std::size_t steps) {
  SequentialDecoder dec(model, prompt);
  dec.extend_to(steps);
  const auto gen = dec.generated();
  return {gen.begin(), gen.begin() + static_cast<std::ptrdiff_t>(steps)};
}

}  // namespace treepipe

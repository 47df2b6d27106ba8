// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "treepipe/bit_vector.hpp"
#include "treepipe/kv_cache.hpp"
#include "treepipe/types.hpp"

namespace treepipe {

struct ToyModelConfig {
  std::uint32_t vocab = 64;
  std::uint32_t dim = 32;
  std::uint32_t layers = 8;
  std::uint64_t seed = 0;

  std::size_t ffn_dim() const noexcept { return 4 * std::size_t{dim}; }
  void validate() const;
};

/// One d-vector per row, row-major.
struct Embeddings {
  std::size_t dim = 0;
  std::vector<double> data;

  Embeddings() = default;
  Embeddings(std::size_t rows, std::size_t d) : dim(d), data(rows * d, 0.0) {}

  std::size_t rows() const noexcept { return dim == 0 ? 0 : data.size() / dim; }
  std::span<double> row(std::size_t r) { return {data.data() + r * dim, dim}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * dim, dim}; }

  /// Keeps rows whose bit is set, preserving order.
  Embeddings select(const BitVector& keep) const;
  void append(std::span<const double> row);

  friend bool operator==(const Embeddings&, const Embeddings&) = default;
};

/// Weight matrices are stored [in][out] row-major so that y = x W.
struct LayerWeights {
  std::vector<double> wq, wk, wv, wo;  // d x d
  std::vector<double> w1, b1;          // d x 4d, 4d
  std::vector<double> w2, b2;          // 4d x d, d
};

/// Half-open range of transformer layers owned by one pipeline stage.
struct LayerRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end - begin; }
  friend bool operator==(const LayerRange&, const LayerRange&) = default;
};

/// Deterministic decoder-only toy transformer:
/// token embedding + sinusoidal position -> L x (single-head attention and
/// a ReLU feed-forward block, each residual + post-LayerNorm) -> tied head.
///
/// Weights come from a 64-bit LCG (MMIX constants) mapped to U(-0.1, 0.1), filled in
/// checkpoint order: embedding, then per layer wq wk wv wo w1 b1 w2 b2.
class ToyModel {
 public:
  explicit ToyModel(const ToyModelConfig& cfg);

  const ToyModelConfig& config() const noexcept { return cfg_; }
  std::size_t dim() const noexcept { return cfg_.dim; }
  std::uint32_t vocab() const noexcept { return cfg_.vocab; }
  std::size_t layer_count() const noexcept { return layers_.size(); }

  std::span<const double> embedding_table() const noexcept { return embedding_; }
  const LayerWeights& layer(std::size_t l) const { return layers_.at(l); }

  /// V*d + L*(12 d^2 + 5 d).
  static std::size_t parameter_count(const ToyModelConfig& cfg);
  std::size_t parameter_count() const { return parameter_count(cfg_); }

  /// FNV-1a over the raw bytes of one layer's weights.
  std::uint64_t layer_checksum(std::size_t l) const;

  /// Token embedding plus 0.1 * sinusoidal encoding of `position`.
  Embeddings embed(std::span<const TokenId> tokens, std::span<const std::uint64_t> positions) const;

  std::vector<double> logits(std::span<const double> hidden) const;

  /// Checkpoint: u32 V, u32 d, u32 L, u64 seed, then every weight as raw
  /// little-endian f64 in generation order.
  void save(const std::string& path) const;
  static ToyModel load(const std::string& path);

  friend bool operator==(const ToyModel& a, const ToyModel& b) {
    return a.embedding_ == b.embedding_ && a.flat_weights() == b.flat_weights();
  }

 private:
  ToyModel() = default;
  std::vector<double> flat_weights() const;

  ToyModelConfig cfg_;
  std::vector<double> embedding_;  // V x d
  std::vector<LayerWeights> layers_;
};

/// Runs the model's layers in `range` over new rows `in` and appends their
/// keys/values to `kv` as speculative slots with the given ids/positions.
///
/// `mask_rows[r]` spans the cache's speculative slots after the append
/// (kv.speculative_count() + in.rows()) and selects which of them row r may
/// attend to, self included. Verified slots are always visible.
Embeddings forward_layers(const ToyModel& model, LayerRange range, const Embeddings& in,
                          std::span<const NodeId> ids, std::span<const std::uint64_t> positions,
                          std::span<const BitVector> mask_rows, KvCache& kv);

/// Causal forward: rows become verified slots, each row attends to every
/// earlier verified slot and itself.
Embeddings forward_causal(const ToyModel& model, LayerRange range, const Embeddings& in,
                          std::span<const std::uint64_t> positions, KvCache& kv);

/// Greedy choice over the tied head; ties go to the lowest token id.
TokenId verify_next(const ToyModel& model, std::span<const double> hidden);

/// argmax with lowest-index tie-break.
TokenId argmax_token(std::span<const double> logits);

/// Greedy autoregressive continuation of `prompt` of length `steps`.
std::vector<TokenId> sequential_decode(const ToyModel& model, std::span<const TokenId> prompt, std::size_t steps);

/// Incremental greedy decoder used both as the losslessness oracle and as the
/// ground truth behind the synthetic draft provider.
class SequentialDecoder {
 public:
  SequentialDecoder(const ToyModel& model, std::span<const TokenId> prompt);

  /// Appends one token and returns it.
  TokenId advance();
  /// Decodes until `count` tokens have been generated.
  void extend_to(std::size_t count);

  std::span<const TokenId> prompt() const noexcept { return {tokens_.data(), prompt_len_}; }
  std::span<const TokenId> generated() const noexcept {
    return {tokens_.data() + prompt_len_, tokens_.size() - prompt_len_};
  }
  std::span<const TokenId> all() const noexcept { return tokens_; }

  /// True next token for a context that continues the prompt along the
  /// greedy path; nullopt for any other context.
  std::optional<TokenId> next_after(std::span<const TokenId> context);

 private:
  const ToyModel& model_;
  std::vector<TokenId> tokens_;
  std::size_t prompt_len_;
  KvCache kv_;
  TokenId pending_;
};

}  // namespace treepipe

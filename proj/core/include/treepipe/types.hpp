// Copyright 2026 The treepipe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <ostream>
#include <stdexcept>
#include <string>

namespace treepipe {

/// Index into a vocabulary of size V.
struct TokenId {
  std::uint32_t value = 0;

  constexpr TokenId() = default;
  constexpr explicit TokenId(std::uint32_t v) : value(v) {}

  friend constexpr auto operator<=>(TokenId, TokenId) = default;
};

inline std::ostream& operator<<(std::ostream& os, TokenId t) { return os << t.value; }

/// Identity of a speculative tree node that survives re-indexing across tree
/// versions. Used to align KV-cache rows and in-flight embeddings with nodes.
enum class NodeId : std::uint64_t {};

constexpr std::uint64_t to_underlying(NodeId id) { return static_cast<std::uint64_t>(id); }

// Error hierarchy. Every module throws a subclass of Error; the CLI maps
// ContractViolation / InvariantViolation to exit code 1 and the rest to 2.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidToken : public Error {
 public:
  using Error::Error;
};

class StructuralError : public Error {
 public:
  using Error::Error;
};

class OrderingError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}
  explicit ParseError(const std::string& what) : ParseError(what, 0) {}

  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition in a way that would corrupt
/// state (e.g. dropping verified KV rows).
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Internal consistency check failed. Indicates a bug, never bad input.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace treepipe

template <>
struct std::hash<treepipe::TokenId> {
  std::size_t operator()(treepipe::TokenId t) const noexcept { return std::hash<std::uint32_t>{}(t.value); }
};

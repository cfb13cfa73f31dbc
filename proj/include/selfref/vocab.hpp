// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Character-level vocabulary with a handful of multi-character special
// symbols. Task text (questions, candidates, answers) is restricted to a
// small charset of digits, lowercase letters, arithmetic operators and
// light punctuation. The fixed segments of the evaluator prompt and the
// \boxed{ answer marker are single symbols, the same way chat templates
// reserve special tokens for their scaffolding: a small context window can
// then hold an entire rendered prompt, and emitting a well-formed boxed
// group is a short token sequence instead of a long character gamble.

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace selfref {

using TokenId = std::int32_t;

class Vocabulary {
 public:
  // The one vocabulary used across training, checkpoints and the CLI.
  static const Vocabulary& standard();

  int size() const { return static_cast<int>(symbols_.size()); }
  TokenId end_token() const { return end_id_; }
  TokenId unk_token() const { return unk_id_; }
  TokenId boxed_open_token() const { return boxed_open_id_; }
  TokenId brace_close_token() const { return brace_close_id_; }

  const std::string& symbol(TokenId id) const;

  // Greedy longest-match tokenization. Unknown characters become the <unk>
  // symbol; uppercase letters outside special symbols fold to lowercase.
  std::vector<TokenId> encode(std::string_view text) const;

  // Strict variant used for dataset validation: returns the byte offset of
  // the first character that cannot be encoded, or nullopt when the whole
  // text lies inside the task charset.
  std::optional<std::size_t> first_invalid_byte(std::string_view text) const;

  // Concatenates symbol strings. <end> and <unk> decode to nothing.
  std::string decode(std::span<const TokenId> tokens) const;

  // Symbols a policy must reach for to produce scoreable output: the boxed
  // markers, digits, separators and the end symbol.
  const std::vector<TokenId>& structural_tokens() const { return structural_; }

  // FNV-1a over the symbol table; checkpoints embed it so a parameter dump
  // can never be applied to a different token numbering.
  std::uint64_t hash() const { return hash_; }

 private:
  Vocabulary();

  std::vector<std::string> symbols_;
  std::vector<std::string> multi_symbols_;   // longest-first
  std::vector<TokenId> multi_ids_;
  std::vector<TokenId> char_to_id_;          // 256 entries, -1 = unknown
  std::vector<TokenId> structural_;
  TokenId end_id_ = 0;
  TokenId unk_id_ = 0;
  TokenId boxed_open_id_ = 0;
  TokenId brace_close_id_ = 0;
  std::uint64_t hash_ = 0;
};

// FNV-1a 64-bit; used for the vocabulary hash and for file fingerprints.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);

std::string to_hex(std::uint64_t value);

}  // namespace selfref

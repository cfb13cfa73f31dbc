// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0

#include "selfref/vocab.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <stdexcept>

#include "selfref/prompt_kit.hpp"

namespace selfref {

namespace {

constexpr std::string_view kEndSymbol = "<end>";
constexpr std::string_view kUnkSymbol = "<unk>";

// Maximum number of per-index response markers that get dedicated symbols.
// Rendering handles any candidate count; beyond this many blocks the
// markers simply tokenize as unknown characters, which only matters for
// what the policy sees, never for the rendered text itself.
constexpr int kMaxMarkedResponses = 4;

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (const char c : bytes) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string to_hex(std::uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

Vocabulary::Vocabulary() {
  const auto add = [this](std::string_view s) {
    symbols_.emplace_back(s);
    return static_cast<TokenId>(symbols_.size() - 1);
  };

  end_id_ = add(kEndSymbol);
  unk_id_ = add(kUnkSymbol);

  // Task charset: single characters.
  const std::string_view chars = " ,.?+-*/=%0123456789abcdefghijklmnopqrstuvwxyz";
  char_to_id_.assign(256, TokenId{-1});
  for (const char c : chars) {
    const TokenId id = add(std::string_view(&c, 1));
    char_to_id_[static_cast<unsigned char>(c)] = id;
  }

  // Multi-character symbols: answer markers first, then the fixed segments
  // of the evaluator prompt (with the adjoining newlines baked in so the
  // rendered prompt tokenizes without a dedicated newline character).
  const auto add_multi = [this, &add](std::string s) {
    const TokenId id = add(s);
    multi_symbols_.push_back(std::move(s));
    multi_ids_.push_back(id);
    return id;
  };

  boxed_open_id_ = add_multi(std::string(kBoxedOpen));
  brace_close_id_ = add_multi("}");
  add_multi(std::string(kEvalHeader) + "\n");
  add_multi(std::string(kQuestionBegin));
  add_multi(std::string(kQuestionEnd) + "\n");
  for (int k = 1; k <= kMaxMarkedResponses; ++k) {
    add_multi(response_begin_marker(k));
    add_multi(response_end_marker(k) + "\n");
  }
  add_multi(std::string(kFormatHeader) + "\n" + std::string(kFormatInstruction));

  // Longest-first so greedy matching always prefers the most specific
  // symbol ("}" must not shadow the response markers' closing brackets).
  std::vector<std::size_t> order(multi_symbols_.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [this](std::size_t a, std::size_t b) {
    return multi_symbols_[a].size() > multi_symbols_[b].size();
  });
  std::vector<std::string> sorted_syms;
  std::vector<TokenId> sorted_ids;
  for (const std::size_t i : order) {
    sorted_syms.push_back(multi_symbols_[i]);
    sorted_ids.push_back(multi_ids_[i]);
  }
  multi_symbols_ = std::move(sorted_syms);
  multi_ids_ = std::move(sorted_ids);

  structural_.push_back(boxed_open_id_);
  structural_.push_back(brace_close_id_);
  structural_.push_back(end_id_);
  for (const char c : std::string_view("0123456789, .")) {
    structural_.push_back(char_to_id_[static_cast<unsigned char>(c)]);
  }

  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const std::string& s : symbols_) {
    h = fnv1a64(s, h);
    h = fnv1a64(std::string_view("\x1f", 1), h);
  }
  hash_ = h;
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary instance;
  return instance;
}

const std::string& Vocabulary::symbol(TokenId id) const {
  if (id < 0 || id >= size()) {
    throw std::invalid_argument("Vocabulary::symbol: id out of range");
  }
  return symbols_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode(std::string_view text) const {
  std::vector<TokenId> out;
  out.reserve(text.size() / 2 + 8);
  std::size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    for (std::size_t m = 0; m < multi_symbols_.size(); ++m) {
      const std::string& sym = multi_symbols_[m];
      if (text.compare(i, sym.size(), sym) == 0) {
        out.push_back(multi_ids_[m]);
        i += sym.size();
        matched = true;
        break;
      }
    }
    if (matched) continue;

    unsigned char c = static_cast<unsigned char>(text[i]);
    if (std::isupper(c)) c = static_cast<unsigned char>(std::tolower(c));
    const TokenId id = char_to_id_[c];
    out.push_back(id >= 0 ? id : unk_id_);
    ++i;
  }
  return out;
}

std::optional<std::size_t> Vocabulary::first_invalid_byte(std::string_view text) const {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const unsigned char c = static_cast<unsigned char>(text[i]);
    if (char_to_id_[c] < 0) {
      // The task charset is single characters only; special symbols are
      // reserved for machinery-rendered text, not for dataset fields...
      // except the boxed markers, which answers legitimately contain.
      if (text.compare(i, kBoxedOpen.size(), kBoxedOpen) == 0) {
        i += kBoxedOpen.size() - 1;
        continue;
      }
      if (c == '}') continue;
      return i;
    }
  }
  return std::nullopt;
}

std::string Vocabulary::decode(std::span<const TokenId> tokens) const {
  std::string out;
  out.reserve(tokens.size() * 2);
  for (const TokenId id : tokens) {
    if (id == end_id_ || id == unk_id_) continue;
    out += symbol(id);
  }
  return out;
}

}  // namespace selfref

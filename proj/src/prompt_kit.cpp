// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0

#include "selfref/prompt_kit.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <stdexcept>

namespace selfref {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

// Contents of the last complete \boxed{...} group, un-trimmed. Nested
// braces are matched by depth so one level of inner grouping survives.
std::optional<std::string> last_boxed_contents(const std::string& text) {
  std::optional<std::string> last;
  std::size_t pos = 0;
  while ((pos = text.find(kBoxedOpen, pos)) != std::string::npos) {
    const std::size_t body = pos + kBoxedOpen.size();
    int depth = 1;
    std::size_t i = body;
    for (; i < text.size(); ++i) {
      if (text[i] == '{') {
        ++depth;
      } else if (text[i] == '}') {
        if (--depth == 0) break;
      }
    }
    if (i < text.size()) {
      last = text.substr(body, i - body);  // complete group
      pos = i + 1;
    } else {
      break;  // unterminated group; nothing further can close
    }
  }
  return last;
}

std::optional<double> parse_finite_number(const std::string& entry) {
  if (entry.empty()) return std::nullopt;
  double value = 0.0;
  const char* first = entry.data();
  const char* last = entry.data() + entry.size();
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc{} || ptr != last) return std::nullopt;
  if (!std::isfinite(value)) return std::nullopt;
  return value;
}

}  // namespace

std::string response_begin_marker(int display_index) {
  return "[The Begin of Response " + std::to_string(display_index) + "]";
}

std::string response_end_marker(int display_index) {
  return "[The End of Response " + std::to_string(display_index) + "]";
}

EvalPrompt render_eval_prompt(const std::string& question,
                              const std::vector<std::string>& candidates,
                              const std::vector<int>& permutation) {
  const int n = static_cast<int>(candidates.size());
  if (n < 2) {
    throw std::invalid_argument("render_eval_prompt: need at least 2 candidates");
  }
  if (permutation.size() != candidates.size()) {
    throw std::invalid_argument("render_eval_prompt: permutation size mismatch");
  }
  std::vector<bool> seen(candidates.size(), false);
  for (const int p : permutation) {
    if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)]) {
      throw std::invalid_argument("render_eval_prompt: permutation is not a bijection");
    }
    seen[static_cast<std::size_t>(p)] = true;
  }

  std::string text;
  text.reserve(512);
  text += kEvalHeader;
  text += '\n';
  text += kQuestionBegin;
  text += question;
  text += kQuestionEnd;
  text += '\n';
  for (int k = 0; k < n; ++k) {
    text += response_begin_marker(k + 1);
    text += candidates[static_cast<std::size_t>(permutation[static_cast<std::size_t>(k)])];
    text += response_end_marker(k + 1);
    text += '\n';
  }
  text += kFormatHeader;
  text += '\n';
  text += kFormatInstruction;

  EvalPrompt prompt;
  prompt.text = std::move(text);
  prompt.n_candidates = n;
  prompt.permutation = permutation;
  return prompt;
}

ScoreParseResult parse_scores(const std::string& text, int expected_count) {
  if (expected_count < 1) {
    throw std::invalid_argument("parse_scores: expected_count must be positive");
  }
  ScoreParseResult result;

  const auto contents = last_boxed_contents(text);
  if (!contents.has_value()) {
    result.error = ParseError::NoBox;
    return result;
  }

  std::vector<std::string> entries;
  std::size_t start = 0;
  const std::string& body = *contents;
  while (true) {
    const std::size_t comma = body.find(',', start);
    if (comma == std::string::npos) {
      entries.push_back(trim(std::string_view(body).substr(start)));
      break;
    }
    entries.push_back(trim(std::string_view(body).substr(start, comma - start)));
    start = comma + 1;
  }

  result.found_count = static_cast<int>(entries.size());
  if (result.found_count != expected_count) {
    result.error = ParseError::CountMismatch;
    return result;
  }

  std::vector<double> scores;
  scores.reserve(entries.size());
  for (const std::string& entry : entries) {
    const auto value = parse_finite_number(entry);
    if (!value.has_value()) {
      result.error = ParseError::NotNumeric;
      return result;
    }
    scores.push_back(*value);
  }
  result.scores = std::move(scores);
  return result;
}

std::vector<double> unpermute(const std::vector<double>& displayed,
                              const std::vector<int>& permutation) {
  if (displayed.size() != permutation.size()) {
    throw std::invalid_argument("unpermute: size mismatch");
  }
  std::vector<double> original(displayed.size(), 0.0);
  std::vector<bool> seen(displayed.size(), false);
  for (std::size_t k = 0; k < displayed.size(); ++k) {
    const int idx = permutation[k];
    if (idx < 0 || static_cast<std::size_t>(idx) >= displayed.size() ||
        seen[static_cast<std::size_t>(idx)]) {
      throw std::invalid_argument("unpermute: permutation is not a bijection");
    }
    seen[static_cast<std::size_t>(idx)] = true;
    original[static_cast<std::size_t>(idx)] = displayed[k];
  }
  return original;
}

std::optional<std::string> extract_boxed_answer(const std::string& text) {
  const auto contents = last_boxed_contents(text);
  if (!contents.has_value()) return std::nullopt;
  return trim(*contents);
}

}  // namespace selfref

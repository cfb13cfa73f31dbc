// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation-prompt rendering and score parsing. Everything in here is
// pure string manipulation; no model state is involved.

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace selfref {

// Fixed pieces of the evaluator prompt. The rendered text is a stable
// contract (a golden-file test pins the exact bytes), so do not edit these
// strings casually — retrained checkpoints and logged prompts depend on
// them, including the historical misspelling in the format line.
inline constexpr std::string_view kEvalHeader =
    "You are a skilled expert at scoring responses. You will be given a "
    "question with multiple responses. Evaluate and score each response.";
inline constexpr std::string_view kQuestionBegin = "[The Begin of Question]";
inline constexpr std::string_view kQuestionEnd = "[The End of Question]";
inline constexpr std::string_view kFormatHeader =
    "#### Output Format Requirements ####";
inline constexpr std::string_view kFormatInstruction =
    "Scores: <the overall comprehensive score of all responses in order, "
    "separate by comma in the boxed, e.g., \\boxed{x, x} if there exists 2 "
    "responeses>.";
inline constexpr std::string_view kBoxedOpen = "\\boxed{";

std::string response_begin_marker(int display_index);  // 1-based index
std::string response_end_marker(int display_index);    // 1-based index

// A rendered evaluation prompt. `permutation[k]` is the original candidate
// index shown in display slot k, i.e. display slot k holds
// candidates[permutation[k]].
struct EvalPrompt {
  std::string text;
  int n_candidates = 0;
  std::vector<int> permutation;
};

// Lays the question and the permuted candidates out in the fixed template.
// Throws std::invalid_argument when candidates.size() < 2 or permutation is
// not a bijection over [0, N).
EvalPrompt render_eval_prompt(const std::string& question,
                              const std::vector<std::string>& candidates,
                              const std::vector<int>& permutation);

// Why a score extraction failed. Closed set: reward policy code switches
// over it exhaustively.
enum class ParseError {
  NoBox,          // no complete \boxed{...} group in the text
  CountMismatch,  // a group parsed but held the wrong number of entries
  NotNumeric,     // an entry was empty or not a finite number
};

struct ScoreParseResult {
  std::optional<std::vector<double>> scores;  // display order when present
  std::optional<ParseError> error;
  int found_count = 0;  // entries seen; meaningful for CountMismatch

  bool ok() const { return scores.has_value(); }
};

// Pulls `expected_count` comma-separated numeric scores out of the last
// complete \boxed{...} group of `text`. Scores come back in display order.
ScoreParseResult parse_scores(const std::string& text, int expected_count);

// Maps display-order scores back to original candidate order using the
// permutation recorded at render time: out[permutation[k]] = displayed[k].
std::vector<double> unpermute(const std::vector<double>& displayed,
                              const std::vector<int>& permutation);

// Trimmed contents of the last complete \boxed{...} group (one level of
// nested braces is tolerated), or nullopt when the text has none.
std::optional<std::string> extract_boxed_answer(const std::string& text);

}  // namespace selfref

// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0

#include "selfref/rewards.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "selfref/rand.hpp"

namespace selfref {

namespace {

int sign_of(double x) { return (x > 0.0) - (x < 0.0); }

std::string trim_lower(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out = s.substr(b, e - b);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::optional<double> as_number(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  if (b == e) return std::nullopt;
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data() + b, s.data() + e, value);
  if (ec != std::errc{} || ptr != s.data() + e) return std::nullopt;
  if (!std::isfinite(value)) return std::nullopt;
  return value;
}

}  // namespace

double kendall_tau(std::span<const double> scores, std::span<const int> gt_ranks) {
  const std::size_t n = scores.size();
  if (n != gt_ranks.size()) {
    throw std::invalid_argument("kendall_tau: scores and ranks differ in length");
  }
  if (n < 2) {
    throw std::invalid_argument("kendall_tau: need at least two items");
  }
  long sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const int s = sign_of(scores[i] - scores[j]);
      // Smaller rank = better item, so the rank difference enters negated:
      // scoring the better item higher counts as agreement.
      const int g = sign_of(static_cast<double>(gt_ranks[j] - gt_ranks[i]));
      sum += s * g;
    }
  }
  const double pairs = static_cast<double>(n) * static_cast<double>(n - 1) / 2.0;
  return static_cast<double>(sum) / pairs;
}

PreferenceOutcome preference_outcome(const std::string& eval_text,
                                     const EvalPrompt& prompt,
                                     std::span<const int> gt_ranks) {
  if (static_cast<int>(gt_ranks.size()) != prompt.n_candidates) {
    throw std::invalid_argument("preference_outcome: rank count mismatch");
  }
  PreferenceOutcome out;
  const ScoreParseResult parsed = parse_scores(eval_text, prompt.n_candidates);
  if (!parsed.ok()) {
    out.reward = kParsePenalty;
    out.parse_failed = true;
    return out;
  }
  const std::vector<double> scores = unpermute(*parsed.scores, prompt.permutation);
  out.reward = kendall_tau(scores, gt_ranks);
  out.parse_failed = false;
  return out;
}

double preference_reward(const std::string& eval_text, const EvalPrompt& prompt,
                         std::span<const int> gt_ranks) {
  return preference_outcome(eval_text, prompt, gt_ranks).reward;
}

double verify_answer(const std::string& response, const std::string& ground_truth,
                     double tolerance) {
  if (!(tolerance >= 0.0)) {
    throw std::invalid_argument("verify_answer: tolerance must be non-negative");
  }
  const auto extracted = extract_boxed_answer(response);
  if (!extracted.has_value()) return 0.0;

  const auto a = as_number(*extracted);
  const auto b = as_number(ground_truth);
  if (a.has_value() && b.has_value()) {
    return std::abs(*a - *b) <= tolerance * std::max(1.0, std::abs(*b)) ? 1.0 : 0.0;
  }
  return trim_lower(*extracted) == trim_lower(ground_truth) ? 1.0 : 0.0;
}

SelfRewardOutcome self_reward_group(const Policy& judge, const Vocabulary& vocab,
                                    const std::string& question,
                                    const std::vector<std::string>& responses,
                                    const SelfRewardConfig& config,
                                    std::mt19937_64& rng) {
  const int g = static_cast<int>(responses.size());
  if (g < 2) {
    throw std::invalid_argument("self_reward_group: need at least two responses");
  }
  if (config.max_retries < 0 || config.max_eval_len < 1) {
    throw std::invalid_argument("self_reward_group: invalid config");
  }

  SelfRewardOutcome out;
  if (config.shuffle_candidates) {
    out.permutation = random_permutation(g, rng);
  } else {
    out.permutation.resize(static_cast<std::size_t>(g));
    std::iota(out.permutation.begin(), out.permutation.end(), 0);
  }

  const EvalPrompt prompt = render_eval_prompt(question, responses, out.permutation);
  const std::vector<TokenId> prompt_tokens = vocab.encode(prompt.text);

  for (int attempt = 0; attempt <= config.max_retries; ++attempt) {
    ++out.attempts;
    const SampledResponse eval = judge.sample_response(
        prompt_tokens, config.eval_temperature, config.max_eval_len, rng);
    const std::string eval_text = vocab.decode(eval.tokens);
    const ScoreParseResult parsed = parse_scores(eval_text, g);
    if (parsed.ok()) {
      out.rewards.rewards = unpermute(*parsed.scores, out.permutation);
      out.rewards.source = RewardSource::SelfScore;
      return out;
    }
    ++out.parse_failures;
  }

  // Nothing usable came back: hand out identical zero rewards. The group
  // still flows through the update path but its advantages are all zero.
  out.rewards.rewards.assign(static_cast<std::size_t>(g), 0.0);
  out.rewards.source = RewardSource::Fallback;
  return out;
}

}  // namespace selfref

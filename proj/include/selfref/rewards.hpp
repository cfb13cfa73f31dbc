// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Reward computation for the three task families:
//   - verifiable tasks score against a ground-truth answer,
//   - preference tasks score an emitted ranking against ground-truth ranks,
//   - open-ended tasks are scored by a policy judging its own group.

#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "selfref/policy.hpp"
#include "selfref/prompt_kit.hpp"
#include "selfref/vocab.hpp"

namespace selfref {

enum class RewardSource {
  Verifier,    // rule-based ground-truth check
  KendallTau,  // rank agreement against annotated preference order
  SelfScore,   // scores parsed from the policy's own evaluation text
  Fallback,    // self-evaluation never parsed; zero rewards, group inert
};

struct RewardVector {
  std::vector<double> rewards;
  RewardSource source = RewardSource::Fallback;
};

// Rank-correlation in [-1, +1] between scores and ground-truth ranks.
//   tau = 2 / (N (N-1)) * sum_{i<j} sign((s_i - s_j) * (g_j - g_i))
// Ranks use "smaller is better" (rank 1 = best), so the rank difference is
// negated relative to the score difference: an item pair scored higher /
// ranked better agrees and contributes +1. Ties on either side contribute
// zero while the denominator stays fixed at the number of pairs.
double kendall_tau(std::span<const double> scores, std::span<const int> gt_ranks);

// Reward for one evaluation text produced against a rendered prompt:
// parse the displayed scores, map them back to candidate order, and return
// kendall_tau against the ground-truth ranks. Texts whose scores cannot be
// parsed earn a fixed penalty of -1, the floor of the tau range, so that
// emitting unusable evaluations is never better than a worst-case ranking.
inline constexpr double kParsePenalty = -1.0;

struct PreferenceOutcome {
  double reward = kParsePenalty;
  bool parse_failed = true;
};

PreferenceOutcome preference_outcome(const std::string& eval_text,
                                     const EvalPrompt& prompt,
                                     std::span<const int> gt_ranks);

double preference_reward(const std::string& eval_text, const EvalPrompt& prompt,
                         std::span<const int> gt_ranks);

// Verifiable-task score: 1.0 when the last boxed answer in `response`
// matches `ground_truth`, else 0.0. Values that both parse as numbers
// compare with |a - b| <= tolerance * max(1, |b|); anything else falls back
// to a trimmed, case-insensitive string comparison. Missing box: 0.0.
double verify_answer(const std::string& response, const std::string& ground_truth,
                     double tolerance = 1e-6);

struct SelfRewardConfig {
  double eval_temperature = 1.0;
  int max_eval_len = 64;
  int max_retries = 2;       // extra attempts after the first failed parse
  bool shuffle_candidates = true;
};

struct SelfRewardOutcome {
  RewardVector rewards;
  std::vector<int> permutation;  // candidate order shown to the judge
  int attempts = 0;              // evaluation samples drawn
  int parse_failures = 0;
};

// Scores a group of responses with the policy itself: render all G
// responses into one evaluation prompt (candidate order shuffled unless
// disabled), sample an evaluation from `judge`, and parse out one score per
// response. Parsing failures retry with fresh samples; when every attempt
// fails the group comes back with all-zero Fallback rewards, which zeroes
// its advantages downstream. The evaluation text itself is never returned
// as trainable data — only the numbers extracted from it.
SelfRewardOutcome self_reward_group(const Policy& judge, const Vocabulary& vocab,
                                    const std::string& question,
                                    const std::vector<std::string>& responses,
                                    const SelfRewardConfig& config,
                                    std::mt19937_64& rng);

}  // namespace selfref

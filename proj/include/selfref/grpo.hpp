// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Group-relative policy optimization. A group is G sampled responses to one
// prompt; each response's reward is standardized against its own group to
// give an advantage, and a clipped importance-ratio surrogate turns those
// advantages into a differentiable loss.
//
// Two deliberate departures from the textbook form of the surrogate:
//   - token-level aggregation: the loss sums surrogate terms over every
//     token of the group and divides once by the group's total token count,
//     instead of normalizing each response by its own length. Long
//     responses therefore contribute proportionally more terms; length no
//     longer cancels out of the per-response weight.
//   - asymmetric clip range [clip_low, clip_high] around 1 with a wider
//     upper band, which leaves more room to raise the probability of
//     low-likelihood tokens before the ratio saturates.
// The KL regularizer is off by default (beta = 0) and uses the
// exp(d) - d - 1 estimator (d = ref - new), which is non-negative per token.

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "selfref/policy.hpp"
#include "selfref/rewards.hpp"

namespace selfref {

struct GrpoConfig {
  double clip_low = 0.8;
  double clip_high = 1.28;
  double beta = 0.0;        // KL penalty weight against a reference policy
  int inner_epochs = 4;     // optimizer passes per rollout batch
  int group_size = 8;       // responses sampled per prompt
  double temperature = 1.0;
  int max_gen_len = 64;     // desk-scale; production-scale runs use 4096
  double adv_eps = 1e-8;    // std floor in advantage normalization
  double lr_peak = 5e-7;    // production-scale default; desk runs override
  int batch_prompts = 256;  // production-scale default; desk runs override

  void validate() const;
};

// One prompt with its sampled group, frozen behind the rollout policy:
// old_logprobs were recorded at sampling time and stay fixed across the
// inner epochs while the live policy moves.
struct RolloutGroup {
  std::vector<TokenId> prompt;
  std::vector<std::vector<TokenId>> responses;
  std::vector<std::vector<double>> old_logprobs;
  RewardVector rewards;
  std::vector<double> advantages;

  std::size_t total_tokens() const;
};

// Group-standardized advantages: (r - mean) / (std + adv_eps) with the
// population standard deviation. A zero-variance group (all rewards equal)
// returns exact zeros so it cannot push the policy anywhere.
std::vector<double> compute_advantages(std::span<const double> rewards,
                                       double adv_eps);

struct SurrogateTerms {
  std::vector<std::vector<double>> ratios;        // new/old per token
  std::vector<std::vector<std::uint8_t>> clipped; // clipped branch strictly won
  std::size_t clipped_count = 0;
  std::size_t token_count = 0;
};

struct ObjectiveResult {
  double loss = 0.0;
  SurrogateTerms terms;
};

// Loss of one group under the current policy's log-probabilities:
//   loss = -(1/T) * sum_{i,t} min(r A_i, clip(r) A_i) + beta * KL
// where T is the group's total token count, r the per-token probability
// ratio exp(new - old), and clip saturates r into [clip_low, clip_high].
// ref_logprobs may be null only when beta == 0.
ObjectiveResult grpo_objective(const RolloutGroup& group,
                               const std::vector<std::vector<double>>& new_logprobs,
                               const GrpoConfig& config,
                               const std::vector<std::vector<double>>* ref_logprobs = nullptr);

// Token-mean of exp(d) - d - 1 with d = ref - new; zero when the policies
// agree and non-negative everywhere.
double kl_penalty(const std::vector<std::vector<double>>& new_logprobs,
                  const std::vector<std::vector<double>>& ref_logprobs);

struct GradientResult {
  std::vector<double> grad;  // d loss / d params, flat layout
  double loss = 0.0;
  std::size_t clipped_count = 0;
  std::size_t token_count = 0;
};

// Gradient of grpo_objective with respect to `policy`'s parameters,
// evaluating new log-probabilities under the live policy. Tokens where the
// clipped branch strictly wins contribute zero gradient (the saturated
// branch is constant in the parameters). `ref_policy` is required when
// beta > 0. Non-finite intermediates raise NumericalError naming the
// response and token.
GradientResult grpo_gradient(const Policy& policy, const RolloutGroup& group,
                             const GrpoConfig& config,
                             const Policy* ref_policy = nullptr);

// ---- optimizer ----

struct OptimizerSchedule {
  double lr_peak = 0.0;
  long total_steps = 0;  // optimizer invocations over the whole run
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct TrainState {
  std::vector<double> m;  // first moment
  std::vector<double> v;  // second moment
  long step = 0;

  explicit TrainState(std::size_t param_count)
      : m(param_count, 0.0), v(param_count, 0.0) {}
};

// Cosine-annealed learning rate: lr_peak * 0.5 * (1 + cos(pi * step/total)).
double cosine_lr(double lr_peak, long step, long total_steps);

// One decoupled-weight-decay adaptive-moment update, applied in place to
// `params`. Uses bias-corrected moments and the cosine schedule above at
// the state's current step, then advances the step counter.
void optimizer_step(TrainState& state, std::span<double> params,
                    std::span<const double> grad, const OptimizerSchedule& schedule);

}  // namespace selfref

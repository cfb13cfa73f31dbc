// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0

#include "selfref/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "selfref/errors.hpp"

namespace selfref {

void GrpoConfig::validate() const {
  if (!(clip_low > 0.0 && clip_low < 1.0)) {
    throw ConfigError("grpo: clip_low must lie in (0, 1)");
  }
  if (!(clip_high > 1.0)) {
    throw ConfigError("grpo: clip_high must exceed 1");
  }
  if (beta < 0.0) throw ConfigError("grpo: beta must be non-negative");
  if (inner_epochs < 1) throw ConfigError("grpo: inner_epochs must be >= 1");
  if (group_size < 2) throw ConfigError("grpo: group_size must be >= 2");
  if (!(temperature > 0.0)) throw ConfigError("grpo: temperature must be positive");
  if (max_gen_len < 1) throw ConfigError("grpo: max_gen_len must be >= 1");
  if (adv_eps < 0.0) throw ConfigError("grpo: adv_eps must be non-negative");
  if (!(lr_peak > 0.0)) throw ConfigError("grpo: lr_peak must be positive");
  if (batch_prompts < 1) throw ConfigError("grpo: batch_prompts must be >= 1");
}

std::size_t RolloutGroup::total_tokens() const {
  std::size_t n = 0;
  for (const auto& r : responses) n += r.size();
  return n;
}

std::vector<double> compute_advantages(std::span<const double> rewards,
                                       double adv_eps) {
  const std::size_t g = rewards.size();
  if (g < 2) throw std::invalid_argument("compute_advantages: need at least two rewards");
  if (adv_eps < 0.0) throw std::invalid_argument("compute_advantages: adv_eps must be >= 0");

  double mean = 0.0;
  for (const double r : rewards) mean += r;
  mean /= static_cast<double>(g);

  double var = 0.0;
  for (const double r : rewards) var += (r - mean) * (r - mean);
  var /= static_cast<double>(g);
  const double std_dev = std::sqrt(var);

  std::vector<double> adv(g, 0.0);
  if (std_dev == 0.0) return adv;  // degenerate group: exactly zero push

  for (std::size_t i = 0; i < g; ++i) {
    adv[i] = (rewards[i] - mean) / (std_dev + adv_eps);
  }
  return adv;
}

namespace {

void check_group_shapes(const RolloutGroup& group,
                        const std::vector<std::vector<double>>& new_logprobs) {
  const std::size_t g = group.responses.size();
  if (g < 2) throw std::invalid_argument("grpo: group has fewer than two responses");
  if (group.old_logprobs.size() != g || new_logprobs.size() != g ||
      group.advantages.size() != g) {
    throw std::invalid_argument("grpo: group field sizes disagree");
  }
  for (std::size_t i = 0; i < g; ++i) {
    const std::size_t len = group.responses[i].size();
    if (len == 0) throw std::invalid_argument("grpo: empty response in group");
    if (group.old_logprobs[i].size() != len || new_logprobs[i].size() != len) {
      throw std::invalid_argument("grpo: log-probability lengths disagree with responses");
    }
  }
}

}  // namespace

ObjectiveResult grpo_objective(const RolloutGroup& group,
                               const std::vector<std::vector<double>>& new_logprobs,
                               const GrpoConfig& config,
                               const std::vector<std::vector<double>>* ref_logprobs) {
  config.validate();
  check_group_shapes(group, new_logprobs);
  if (config.beta > 0.0 && ref_logprobs == nullptr) {
    throw ConfigError("grpo: beta > 0 requires reference log-probabilities");
  }

  ObjectiveResult result;
  const std::size_t g = group.responses.size();
  result.terms.ratios.resize(g);
  result.terms.clipped.resize(g);

  double term_sum = 0.0;
  std::size_t total_tokens = 0;
  for (std::size_t i = 0; i < g; ++i) {
    const double adv = group.advantages[i];
    const std::size_t len = group.responses[i].size();
    result.terms.ratios[i].resize(len);
    result.terms.clipped[i].assign(len, 0);
    for (std::size_t t = 0; t < len; ++t) {
      const double ratio = std::exp(new_logprobs[i][t] - group.old_logprobs[i][t]);
      result.terms.ratios[i][t] = ratio;
      const double clamped = std::clamp(ratio, config.clip_low, config.clip_high);
      const double raw_term = ratio * adv;
      const double clipped_term = clamped * adv;
      if (clipped_term < raw_term) {
        result.terms.clipped[i][t] = 1;
        ++result.terms.clipped_count;
        term_sum += clipped_term;
      } else {
        term_sum += raw_term;
      }
      ++total_tokens;
    }
  }
  result.terms.token_count = total_tokens;
  result.loss = -term_sum / static_cast<double>(total_tokens);
  if (config.beta > 0.0) {
    result.loss += config.beta * kl_penalty(new_logprobs, *ref_logprobs);
  }
  return result;
}

double kl_penalty(const std::vector<std::vector<double>>& new_logprobs,
                  const std::vector<std::vector<double>>& ref_logprobs) {
  if (new_logprobs.size() != ref_logprobs.size()) {
    throw std::invalid_argument("kl_penalty: group sizes disagree");
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < new_logprobs.size(); ++i) {
    if (new_logprobs[i].size() != ref_logprobs[i].size()) {
      throw std::invalid_argument("kl_penalty: sequence lengths disagree");
    }
    for (std::size_t t = 0; t < new_logprobs[i].size(); ++t) {
      const double d = ref_logprobs[i][t] - new_logprobs[i][t];
      sum += std::exp(d) - d - 1.0;
    }
    count += new_logprobs[i].size();
  }
  if (count == 0) throw std::invalid_argument("kl_penalty: no tokens");
  return sum / static_cast<double>(count);
}

GradientResult grpo_gradient(const Policy& policy, const RolloutGroup& group,
                             const GrpoConfig& config, const Policy* ref_policy) {
  config.validate();
  if (config.beta > 0.0 && ref_policy == nullptr) {
    throw ConfigError("grpo: beta > 0 requires a reference policy");
  }

  const std::size_t g = group.responses.size();
  std::vector<std::vector<double>> new_lps(g);
  for (std::size_t i = 0; i < g; ++i) {
    new_lps[i] = policy.sequence_logprobs(group.prompt, group.responses[i],
                                          config.temperature);
  }
  std::vector<std::vector<double>> ref_lps;
  if (config.beta > 0.0) {
    ref_lps.resize(g);
    for (std::size_t i = 0; i < g; ++i) {
      ref_lps[i] = ref_policy->sequence_logprobs(group.prompt, group.responses[i],
                                                 config.temperature);
    }
  }

  const ObjectiveResult objective = grpo_objective(
      group, new_lps, config, config.beta > 0.0 ? &ref_lps : nullptr);

  const double total_tokens = static_cast<double>(objective.terms.token_count);
  GradientResult result;
  result.loss = objective.loss;
  result.clipped_count = objective.terms.clipped_count;
  result.token_count = objective.terms.token_count;
  result.grad.assign(policy.param_count(), 0.0);

  std::vector<double> weights;
  for (std::size_t i = 0; i < g; ++i) {
    const double adv = group.advantages[i];
    const std::size_t len = group.responses[i].size();
    weights.assign(len, 0.0);
    for (std::size_t t = 0; t < len; ++t) {
      double w = 0.0;
      if (!objective.terms.clipped[i][t]) {
        // d/d new_lp of -(ratio * adv) / T, with d ratio / d new_lp = ratio.
        w -= objective.terms.ratios[i][t] * adv / total_tokens;
      }
      if (config.beta > 0.0) {
        // d/d new_lp of beta * mean(exp(d) - d - 1), d = ref - new.
        const double d = ref_lps[i][t] - new_lps[i][t];
        w += config.beta * (1.0 - std::exp(d)) / total_tokens;
      }
      if (!std::isfinite(w)) {
        throw NumericalError("grpo_gradient: non-finite weight at response " +
                             std::to_string(i) + ", token " + std::to_string(t));
      }
      weights[t] = w;
    }
    const std::vector<double> resp_grad = policy.weighted_logprob_gradient(
        group.prompt, group.responses[i], weights, config.temperature);
    for (std::size_t k = 0; k < result.grad.size(); ++k) {
      result.grad[k] += resp_grad[k];
    }
  }

  for (std::size_t k = 0; k < result.grad.size(); ++k) {
    if (!std::isfinite(result.grad[k])) {
      throw NumericalError("grpo_gradient: non-finite gradient at parameter " +
                           std::to_string(k));
    }
  }
  return result;
}

double cosine_lr(double lr_peak, long step, long total_steps) {
  if (total_steps < 1) throw ConfigError("cosine_lr: total_steps must be >= 1");
  if (step < 0) throw std::invalid_argument("cosine_lr: negative step");
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  constexpr double kPi = 3.14159265358979323846;
  return lr_peak * 0.5 * (1.0 + std::cos(kPi * frac));
}

void optimizer_step(TrainState& state, std::span<double> params,
                    std::span<const double> grad, const OptimizerSchedule& schedule) {
  if (params.size() != grad.size() || params.size() != state.m.size() ||
      params.size() != state.v.size()) {
    throw std::invalid_argument("optimizer_step: size mismatch");
  }
  if (!(schedule.lr_peak > 0.0)) throw ConfigError("optimizer_step: lr_peak must be positive");

  const double lr = cosine_lr(schedule.lr_peak, state.step, schedule.total_steps);
  const double t = static_cast<double>(state.step + 1);
  const double bias1 = 1.0 - std::pow(schedule.beta1, t);
  const double bias2 = 1.0 - std::pow(schedule.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = schedule.beta1 * state.m[i] + (1.0 - schedule.beta1) * grad[i];
    state.v[i] = schedule.beta2 * state.v[i] + (1.0 - schedule.beta2) * grad[i] * grad[i];
    const double m_hat = state.m[i] / bias1;
    const double v_hat = state.v[i] / bias2;
    // Decoupled weight decay: the regularizer multiplies the learning rate
    // directly instead of passing through the adaptive moments.
    params[i] -= lr * (m_hat / (std::sqrt(v_hat) + schedule.eps) +
                       schedule.weight_decay * params[i]);
  }
  ++state.step;
}

}  // namespace selfref

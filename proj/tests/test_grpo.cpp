// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Group-relative optimization: advantage standardization, the asymmetric
// clipped surrogate, its hand-derived contrast with a per-response
// length-normalized variant, the KL estimator, analytic gradients against
// finite differences, and the optimizer/schedule arithmetic.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "selfref/errors.hpp"
#include "selfref/grpo.hpp"
#include "selfref/policy.hpp"
#include "selfref/rand.hpp"

using namespace selfref;

namespace {

constexpr double kLn2 = 0.6931471805599453;

TinyLmConfig tiny_config(std::uint64_t seed) {
  TinyLmConfig c;
  c.vocab_size = 10;
  c.embed_dim = 3;
  c.hidden_dim = 4;
  c.window = 3;
  c.end_token = 0;
  c.init_scale = 0.25;
  c.init_seed = seed;
  return c;
}

// A group with hand-set log-probabilities: response i has `len` tokens, all
// with old log-prob -1 and new log-prob -1 + log(ratio).
struct MadeGroup {
  RolloutGroup group;
  std::vector<std::vector<double>> new_lps;
};

MadeGroup make_group(const std::vector<int>& lengths,
                     const std::vector<double>& ratios,
                     const std::vector<double>& advantages) {
  MadeGroup m;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    const std::size_t len = static_cast<std::size_t>(lengths[i]);
    m.group.responses.push_back(std::vector<TokenId>(len, TokenId{1}));
    m.group.old_logprobs.push_back(std::vector<double>(len, -1.0));
    m.new_lps.push_back(std::vector<double>(len, -1.0 + std::log(ratios[i])));
  }
  m.group.advantages = advantages;
  return m;
}

// Sample a real group from a model and attach standardized advantages.
RolloutGroup sample_real_group(const TinyLm& model, const std::vector<double>& rewards,
                               const GrpoConfig& config, std::uint64_t seed) {
  RolloutGroup group;
  group.prompt = {1, 2};
  auto rng = make_rng(seed, RngChannel::Rollout, 0, 0);
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    SampledResponse r;
    do {
      r = model.sample_response(group.prompt, config.temperature, 6, rng);
    } while (r.tokens.empty());
    group.responses.push_back(r.tokens);
    group.old_logprobs.push_back(r.logprobs);
  }
  group.rewards.rewards = rewards;
  group.advantages = compute_advantages(rewards, config.adv_eps);
  return group;
}

}  // namespace

TEST_CASE("advantages: standardization invariants") {
  auto rng = make_rng(21, RngChannel::Rollout, 9, 0);
  for (int rep = 0; rep < 100; ++rep) {
    const int g = 2 + static_cast<int>(rand_below(rng, 7));
    std::vector<double> rewards;
    for (int i = 0; i < g; ++i) rewards.push_back(rand_unit(rng) * 4.0 - 2.0);

    const std::vector<double> adv = compute_advantages(rewards, 0.0);
    double sum = 0.0, var = 0.0;
    for (const double a : adv) sum += a;
    for (const double a : adv) var += a * a;
    var /= static_cast<double>(g);
    CHECK(std::abs(sum) <= 1e-9);
    CHECK(std::abs(var - 1.0) <= 1e-6);
  }
}

TEST_CASE("advantages: frozen two-point case") {
  CHECK(compute_advantages(std::vector<double>{0.0, 1.0}, 0.0) ==
        std::vector<double>{-1.0, 1.0});
}

TEST_CASE("advantages: zero-variance groups come back exactly zero") {
  for (const double value : {0.0, -1.0, 3.5}) {
    const std::vector<double> adv =
        compute_advantages(std::vector<double>{value, value, value}, 1e-8);
    for (const double a : adv) CHECK(a == 0.0);
  }
}

TEST_CASE("advantages: invariant under positive affine reward maps at eps 0") {
  auto rng = make_rng(22, RngChannel::Rollout, 10, 0);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> rewards;
    for (int i = 0; i < 6; ++i) rewards.push_back(rand_unit(rng));
    const double a = 0.1 + rand_unit(rng) * 5.0;
    const double b = rand_unit(rng) * 10.0 - 5.0;
    std::vector<double> mapped;
    for (const double r : rewards) mapped.push_back(a * r + b);

    const std::vector<double> adv = compute_advantages(rewards, 0.0);
    const std::vector<double> adv_mapped = compute_advantages(mapped, 0.0);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      CHECK(adv[i] == doctest::Approx(adv_mapped[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("advantages: shape and argument errors") {
  CHECK_THROWS_AS(compute_advantages(std::vector<double>{1.0}, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(compute_advantages(std::vector<double>{1.0, 2.0}, -1e-9),
                  std::invalid_argument);
}

TEST_CASE("clip semantics of the surrogate") {
  GrpoConfig config;  // clip band [0.8, 1.28]

  SUBCASE("ratio above the band with positive advantage saturates at 1.28") {
    const MadeGroup m = make_group({1, 1}, {1.5, 1.0}, {1.0, 0.0});
    const ObjectiveResult r = grpo_objective(m.group, m.new_lps, config);
    // Terms: 1.28 * (+1) and 1.0 * 0; loss = -(1.28 + 0) / 2.
    CHECK(r.loss == doctest::Approx(-0.64).epsilon(1e-12));
    CHECK(r.terms.clipped_count == 1);
    CHECK(r.terms.clipped[0][0] == 1);
    CHECK(r.terms.clipped[1][0] == 0);
    CHECK(r.terms.ratios[0][0] == doctest::Approx(1.5).epsilon(1e-12));
  }
  SUBCASE("ratio below the band with negative advantage saturates at 0.8") {
    const MadeGroup m = make_group({1, 1}, {0.5, 1.0}, {-1.0, 0.0});
    const ObjectiveResult r = grpo_objective(m.group, m.new_lps, config);
    // min(0.5 * -1, 0.8 * -1) = -0.8; loss = +0.8 / 2.
    CHECK(r.loss == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(r.terms.clipped_count == 1);
  }
  SUBCASE("in-band ratios pass through unclipped") {
    const MadeGroup m = make_group({1, 1}, {1.1, 1.0}, {1.0, 0.0});
    const ObjectiveResult r = grpo_objective(m.group, m.new_lps, config);
    CHECK(r.loss == doctest::Approx(-0.55).epsilon(1e-9));
    CHECK(r.terms.clipped_count == 0);
  }
  SUBCASE("the min is pessimistic: clipping never rescues a bad ratio") {
    // Ratio 1.5 with advantage -1: raw term -1.5 is worse than the clamped
    // -1.28, and the objective keeps the worse one.
    const MadeGroup m = make_group({1, 1}, {1.5, 1.0}, {-1.0, 0.0});
    const ObjectiveResult r = grpo_objective(m.group, m.new_lps, config);
    CHECK(r.loss == doctest::Approx(0.75).epsilon(1e-9));
    CHECK(r.terms.clipped_count == 0);
  }
}

TEST_CASE("token-level aggregation weights responses by their length") {
  // With every ratio at 1 the surrogate reduces to plain advantages: the
  // 3-token response contributes three -1 terms against one +1 term, and
  // the single division is by the group's total token count.
  GrpoConfig config;
  const MadeGroup m = make_group({1, 3}, {1.0, 1.0}, {1.0, -1.0});
  const ObjectiveResult r = grpo_objective(m.group, m.new_lps, config);
  CHECK(r.terms.token_count == 4);
  CHECK(r.loss == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("contrast with a per-response length-normalized surrogate") {
  // Two responses: 1 token at ratio 1.0 with advantage +1, 3 tokens at
  // ratio 0.5 with advantage -1 (each term clips to -0.8).
  //   shipped (single division by T=4):  -(1*1 + 3*(-0.8)) / 4      = 0.35
  //   reference (1/|o_i| inside, mean over G): -((1) + (-0.8)) / 2  = -0.1
  // The two implementations disagree by a factor of -3.5 on this group.
  GrpoConfig config;
  const MadeGroup m = make_group({1, 3}, {1.0, 0.5}, {1.0, -1.0});
  const ObjectiveResult shipped = grpo_objective(m.group, m.new_lps, config);
  CHECK(shipped.loss == doctest::Approx(0.35).epsilon(1e-12));

  // Reference implementation, written out independently.
  double ref_loss = 0.0;
  for (std::size_t i = 0; i < m.group.responses.size(); ++i) {
    double per_response = 0.0;
    for (std::size_t t = 0; t < m.group.responses[i].size(); ++t) {
      const double ratio = std::exp(m.new_lps[i][t] - m.group.old_logprobs[i][t]);
      const double clamped = std::clamp(ratio, config.clip_low, config.clip_high);
      per_response += std::min(ratio * m.group.advantages[i],
                               clamped * m.group.advantages[i]);
    }
    ref_loss += per_response / static_cast<double>(m.group.responses[i].size());
  }
  ref_loss = -ref_loss / static_cast<double>(m.group.responses.size());
  CHECK(ref_loss == doctest::Approx(-0.1).epsilon(1e-12));
  CHECK(shipped.loss / ref_loss == doctest::Approx(-3.5).epsilon(1e-9));
}

TEST_CASE("KL estimator: frozen values and invariants") {
  SUBCASE("one token displaced by ln 2") {
    const std::vector<std::vector<double>> new_lps = {{-1.0}};
    const std::vector<std::vector<double>> ref_lps = {{-1.0 + kLn2}};
    // exp(ln 2) - ln 2 - 1 = 1 - ln 2.
    CHECK(kl_penalty(new_lps, ref_lps) ==
          doctest::Approx(0.3068528194400547).epsilon(1e-15));
  }
  SUBCASE("token mean over mixed displacements") {
    const std::vector<std::vector<double>> new_lps = {{-1.0, -2.0}};
    const std::vector<std::vector<double>> ref_lps = {{-1.0 + kLn2, -2.0}};
    CHECK(kl_penalty(new_lps, ref_lps) ==
          doctest::Approx(0.3068528194400547 / 2.0).epsilon(1e-15));
  }
  SUBCASE("zero when the policies agree, positive otherwise") {
    auto rng = make_rng(23, RngChannel::Rollout, 11, 0);
    std::vector<std::vector<double>> lps = {{-1.5, -0.5}, {-2.0}};
    CHECK(kl_penalty(lps, lps) == 0.0);
    std::vector<std::vector<double>> shifted = lps;
    for (auto& seq : shifted) {
      for (double& v : seq) v += rand_unit(rng) - 0.5;
    }
    CHECK(kl_penalty(lps, shifted) >= 0.0);
  }
  SUBCASE("shape mismatches are rejected") {
    const std::vector<std::vector<double>> a = {{-1.0}};
    const std::vector<std::vector<double>> b = {{-1.0}, {-1.0}};
    const std::vector<std::vector<double>> c = {{-1.0, -2.0}};
    CHECK_THROWS_AS(kl_penalty(a, b), std::invalid_argument);
    CHECK_THROWS_AS(kl_penalty(a, c), std::invalid_argument);
  }
}

TEST_CASE("objective adds exactly beta times the KL penalty") {
  GrpoConfig config;
  const MadeGroup m = make_group({2, 2}, {1.1, 0.9}, {1.0, -1.0});
  std::vector<std::vector<double>> ref_lps = m.new_lps;
  ref_lps[0][0] += 0.3;
  ref_lps[1][1] -= 0.2;

  const double base = grpo_objective(m.group, m.new_lps, config).loss;
  config.beta = 0.5;
  const double with_kl = grpo_objective(m.group, m.new_lps, config, &ref_lps).loss;
  CHECK(with_kl - base ==
        doctest::Approx(0.5 * kl_penalty(m.new_lps, ref_lps)).epsilon(1e-12));
  CHECK_THROWS_AS(grpo_objective(m.group, m.new_lps, config), ConfigError);
}

TEST_CASE("objective rejects malformed groups") {
  GrpoConfig config;
  MadeGroup m = make_group({1, 1}, {1.0, 1.0}, {1.0, -1.0});

  MadeGroup single = make_group({1}, {1.0}, {1.0});
  CHECK_THROWS_AS(grpo_objective(single.group, single.new_lps, config),
                  std::invalid_argument);

  MadeGroup bad_adv = m;
  bad_adv.group.advantages.pop_back();
  CHECK_THROWS_AS(grpo_objective(bad_adv.group, bad_adv.new_lps, config),
                  std::invalid_argument);

  MadeGroup bad_len = m;
  bad_len.new_lps[0].push_back(-1.0);
  CHECK_THROWS_AS(grpo_objective(bad_len.group, bad_len.new_lps, config),
                  std::invalid_argument);

  MadeGroup empty_resp = m;
  empty_resp.group.responses[0].clear();
  empty_resp.group.old_logprobs[0].clear();
  empty_resp.new_lps[0].clear();
  CHECK_THROWS_AS(grpo_objective(empty_resp.group, empty_resp.new_lps, config),
                  std::invalid_argument);
}

TEST_CASE("config validation rejects each bad field") {
  const auto broken = [](auto mutate) {
    GrpoConfig c;
    mutate(c);
    return c;
  };
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.clip_low = 0.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.clip_low = 1.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.clip_high = 1.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.beta = -0.1; }).validate(), ConfigError);
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.inner_epochs = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.group_size = 1; }).validate(), ConfigError);
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.temperature = 0.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.max_gen_len = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.adv_eps = -1.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.lr_peak = 0.0; }).validate(), ConfigError);
  CHECK_THROWS_AS(broken([](GrpoConfig& c) { c.batch_prompts = 0; }).validate(), ConfigError);
  CHECK_NOTHROW(GrpoConfig{}.validate());
}

TEST_CASE("strictly clipped tokens contribute zero gradient") {
  const TinyLm model(tiny_config(31));
  GrpoConfig config;
  RolloutGroup group = sample_real_group(model, {1.0, 2.0}, config, 77);

  // Rewrite the frozen snapshot so every ratio is exp(ln 2) = 2, far above
  // the clip ceiling. Advantages +1 make the clipped branch win everywhere.
  for (std::size_t i = 0; i < group.responses.size(); ++i) {
    group.old_logprobs[i] =
        model.sequence_logprobs(group.prompt, group.responses[i], config.temperature);
    for (double& lp : group.old_logprobs[i]) lp -= kLn2;
    }
  group.advantages = {1.0, 1.0};

  const GradientResult clipped = grpo_gradient(model, group, config);
  CHECK(clipped.clipped_count == clipped.token_count);
  for (const double g : clipped.grad) CHECK(g == 0.0);

  // Same ratios with advantages -1: now the raw branch is the minimum, the
  // tokens are live, and the gradient moves.
  group.advantages = {-1.0, -1.0};
  const GradientResult live = grpo_gradient(model, group, config);
  CHECK(live.clipped_count == 0);
  double norm = 0.0;
  for (const double g : live.grad) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("analytic gradient matches finite differences") {
  GrpoConfig config;
  config.adv_eps = 1e-8;

  for (const std::uint64_t seed : {101ULL, 202ULL, 303ULL}) {
    TinyLm model(tiny_config(seed));
    const RolloutGroup group =
        sample_real_group(model, {0.0, 1.0, 0.5}, config, seed + 1);

    const GradientResult analytic = grpo_gradient(model, group, config);
    const auto f = [&] {
      std::vector<std::vector<double>> new_lps;
      for (const auto& resp : group.responses) {
        new_lps.push_back(
            model.sequence_logprobs(group.prompt, resp, config.temperature));
      }
      return grpo_objective(group, new_lps, config).loss;
    };
    const double worst = finite_diff_check(model, f, analytic.grad, 1e-5);
    CHECK_MESSAGE(worst < 1e-4, "seed " << seed << ": max relative error " << worst);
  }
}

TEST_CASE("analytic gradient matches finite differences with the KL term on") {
  GrpoConfig config;
  config.beta = 0.7;

  TinyLm model(tiny_config(41));
  const TinyLm reference(tiny_config(42));  // a genuinely different anchor
  const RolloutGroup group = sample_real_group(model, {0.0, 1.0}, config, 43);

  const GradientResult analytic = grpo_gradient(model, group, config, &reference);
  const auto f = [&] {
    std::vector<std::vector<double>> new_lps, ref_lps;
    for (const auto& resp : group.responses) {
      new_lps.push_back(model.sequence_logprobs(group.prompt, resp, config.temperature));
      ref_lps.push_back(
          reference.sequence_logprobs(group.prompt, resp, config.temperature));
    }
    return grpo_objective(group, new_lps, config, &ref_lps).loss;
  };
  const double worst = finite_diff_check(model, f, analytic.grad, 1e-5);
  CHECK_MESSAGE(worst < 1e-4, "max relative error " << worst);
  CHECK_THROWS_AS(grpo_gradient(model, group, config), ConfigError);
}

TEST_CASE("cosine schedule endpoints and midpoints") {
  CHECK(cosine_lr(2e-3, 0, 100) == 2e-3);
  CHECK(cosine_lr(2e-3, 50, 100) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(cosine_lr(2e-3, 25, 100) ==
        doctest::Approx(1.7071067811865476e-3).epsilon(1e-12));
  CHECK(cosine_lr(2e-3, 100, 100) == doctest::Approx(0.0).epsilon(1e-15));
  // Steps beyond the horizon clamp instead of rebounding.
  CHECK(cosine_lr(2e-3, 150, 100) == doctest::Approx(0.0).epsilon(1e-15));
  for (long s = 1; s <= 100; ++s) {
    CHECK(cosine_lr(2e-3, s, 100) <= cosine_lr(2e-3, s - 1, 100));
  }
  CHECK_THROWS_AS(cosine_lr(2e-3, 0, 0), ConfigError);
  CHECK_THROWS_AS(cosine_lr(2e-3, -1, 10), std::invalid_argument);
}

TEST_CASE("optimizer step: hand-computed first update") {
  OptimizerSchedule schedule;
  schedule.lr_peak = 0.1;
  schedule.total_steps = 1;

  SUBCASE("plain update") {
    TrainState state(1);
    std::vector<double> params = {1.0};
    const std::vector<double> grad = {2.0};
    optimizer_step(state, params, grad, schedule);
    // m-hat = 2, v-hat = 4, update = 0.1 * 2 / (2 + 1e-8).
    CHECK(params[0] == doctest::Approx(0.9000000005).epsilon(1e-12));
    CHECK(state.step == 1);
    // The second call sits at the schedule end: lr 0, parameters frozen.
    optimizer_step(state, params, grad, schedule);
    CHECK(params[0] == doctest::Approx(0.9000000005).epsilon(1e-12));
    CHECK(state.step == 2);
  }
  SUBCASE("decoupled weight decay leans on the parameter, not the moments") {
    schedule.weight_decay = 0.1;
    TrainState state(1);
    std::vector<double> params = {1.0};
    const std::vector<double> grad = {2.0};
    optimizer_step(state, params, grad, schedule);
    // Same as above minus lr * wd * param = 0.01.
    CHECK(params[0] == doctest::Approx(0.8900000005).epsilon(1e-12));
  }
  SUBCASE("shape mismatches are rejected") {
    TrainState state(2);
    std::vector<double> params = {1.0};
    const std::vector<double> grad = {1.0};
    CHECK_THROWS_AS(optimizer_step(state, params, grad, schedule),
                    std::invalid_argument);
  }
}

TEST_CASE("optimizer converges on a quadratic bowl") {
  // Minimize (p - 3)^2 from p = 0; gradient 2(p - 3). A few hundred steps
  // of the adaptive update with a cosine-annealed rate must land close.
  OptimizerSchedule schedule;
  schedule.lr_peak = 0.1;
  schedule.total_steps = 400;
  TrainState state(1);
  std::vector<double> params = {0.0};
  for (int s = 0; s < 400; ++s) {
    const std::vector<double> grad = {2.0 * (params[0] - 3.0)};
    optimizer_step(state, params, grad, schedule);
  }
  CHECK(params[0] == doctest::Approx(3.0).epsilon(1e-2));
}

// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end training driver. One policy plays both roles: it answers
// prompts as the player and scores open-ended answer groups as the judge,
// and a single optimization loop trains both behaviors from mixed batches.
// Rewards per task kind:
//   - reasoning: rule-based check against the ground-truth answer,
//   - preference: rank correlation of the policy's emitted scores against
//     annotated ranks,
//   - instruction: scores the policy assigns to its own answer group.
// A frozen-referee mode pins the judging role to a fixed checkpoint so the
// value of letting the judge co-evolve can be measured against it.

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "selfref/grpo.hpp"
#include "selfref/policy.hpp"
#include "selfref/rewards.hpp"
#include "selfref/task_data.hpp"

namespace selfref {

enum class RunMode { Unified, FrozenReferee };

const char* mode_name(RunMode mode);
RunMode parse_mode(const std::string& text);  // ConfigError on unknown value

struct ModelConfig {
  int embed_dim = 32;
  int hidden_dim = 128;
  int window = 48;
  double init_scale = 0.08;
  // Logit prior on structural output symbols (boxed markers, digits,
  // separators, end) at initialization. A blank model has no pretrained
  // notion of answer formatting, so zero bias leaves reward discovery to a
  // needle-in-haystack search; a few nats here play the role a pretrained
  // base model's format competence plays at production scale.
  double format_bias = 4.0;
};

struct RunConfig {
  RunConfig() {
    // Desk-scale overrides of the production-scale optimizer defaults.
    grpo.lr_peak = 5e-3;
    grpo.batch_prompts = 16;
  }

  RunMode mode = RunMode::Unified;
  std::uint64_t seed = 0;
  long total_steps = 300;
  MixRatio ratio{1.0, 1.0, 1.0};
  CurriculumConfig curriculum;
  GrpoConfig grpo;
  ModelConfig model;
  SelfRewardConfig self_reward;
  OptimizerSchedule optim;  // lr_peak / total_steps are filled in at run time
  double verifier_tolerance = 1e-6;

  std::string reasoning_path;
  std::string preference_path;
  std::string instruction_path;

  std::string metrics_path;     // empty: keep metrics in memory only
  std::string checkpoint_path;  // empty: skip checkpoint files
  long checkpoint_interval = 0; // extra dumps every N steps; 0 = final only

  std::string referee_checkpoint;  // FrozenReferee mode
};

RunConfig run_config_from_json(const nlohmann::json& j);
nlohmann::json run_config_to_json(const RunConfig& config);
RunConfig load_run_config(const std::string& path);
void validate_run_config(const RunConfig& config);

struct StepMetrics {
  long step = 0;
  std::array<int, 3> counts{};  // groups per kind, P/R/I order
  std::optional<double> mean_reward_verifier;
  std::optional<double> mean_reward_kendall;
  std::optional<double> mean_reward_self;
  double clip_fraction = 0.0;
  double skipped_group_fraction = 0.0;
  double parse_failure_rate = 0.0;
  double loss = 0.0;
  double lr = 0.0;
};

// One JSON object per line, keys sorted, no trailing whitespace. The same
// numbers in always serialize to the same bytes out.
std::string metrics_to_json_line(const StepMetrics& metrics);
StepMetrics metrics_from_json_line(const std::string& line);

struct StepObservation {
  const StepMetrics& metrics;
  const std::vector<RolloutGroup>& groups;
  const std::vector<TaskKind>& kinds;
};
using StepObserver = std::function<void(const StepObservation&)>;

struct TrainResult {
  std::vector<StepMetrics> metrics;
  std::unique_ptr<TinyLm> policy;
  std::string checkpoint_path;
  std::uint64_t checkpoint_file_hash = 0;  // 0 when no checkpoint was written
};

// Builds the policy for a run config over the standard vocabulary.
TinyLm build_policy(const RunConfig& config);

// Unified run: the live policy judges its own instruction groups.
TrainResult train(const RunConfig& config, const StepObserver& observer = {});

// Frozen-referee run: instruction groups are judged by a fixed policy
// loaded from config.referee_checkpoint (or injected for tests). The
// referee is never mutated. Everything else matches train().
TrainResult run_frozen_referee(const RunConfig& config,
                               const StepObserver& observer = {},
                               const Policy* referee_override = nullptr);

// ---- synthetic data ----

struct SuiteSizes {
  int reasoning = 256;
  int preference = 256;
  int instruction = 128;
};

struct SuitePaths {
  std::string reasoning;
  std::string preference;
  std::string instruction;
};

// Writes a small self-contained task suite under out_dir:
//   - reasoning: modular-arithmetic questions "a+b mod m=?" with exact
//     answers,
//   - preference: the same questions with 2-4 scored candidate answers;
//     ranks follow correctness first, then brevity,
//   - instruction: open-ended prompts from a fixed template family.
SuitePaths make_synthetic_suite(std::uint64_t seed, const SuiteSizes& sizes,
                                const std::string& out_dir);

// ---- referee evaluation ----

struct RefereeEvalConfig {
  int trials = 4;  // independent evaluations sampled per item
  double temperature = 1.0;
  int max_eval_len = 64;
  std::uint64_t seed = 0;
};

struct RefereeReport {
  double mean_reward = 0.0;        // mean preference reward incl. parse penalties
  double pairwise_accuracy = 0.0;  // correctly ordered untied pairs / all untied pairs
  double parse_failure_rate = 0.0;
  long pair_count = 0;
  long trial_count = 0;
};

// Scores a judge on a preference dataset: each trial renders the item with
// a fresh candidate permutation, samples one evaluation, and checks the
// recovered scores against the annotated ranks. Pairwise accuracy is taken
// over the untied pairs of trials that parsed; unparseable trials take the
// format penalty in mean_reward and raise parse_failure_rate instead, so
// the two numbers measure ranking quality and format health independently.
RefereeReport eval_referee(const Policy& judge, const std::vector<TaskInstance>& dataset,
                           const RefereeEvalConfig& config);

// FNV-1a hash of a file's bytes; DataError when the file cannot be read.
std::uint64_t file_hash(const std::string& path);

}  // namespace selfref

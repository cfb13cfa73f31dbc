// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 success, 2 configuration error,
// 3 data error, 4 numerical error.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "selfref/errors.hpp"
#include "selfref/harness.hpp"
#include "selfref/prompt_kit.hpp"
#include "selfref/rand.hpp"
#include "selfref/rewards.hpp"
#include "selfref/vocab.hpp"

namespace {

using selfref::ConfigError;

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  try {
    nlohmann::json j;
    in >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

// Loads the run config and reconciles the file's mode with the verb: an
// absent mode falls to the verb's, a contradicting one is an error rather
// than a silent override.
selfref::RunConfig load_verb_config(const std::string& path, selfref::RunMode verb_mode,
                                    const std::optional<std::uint64_t>& seed_override) {
  const nlohmann::json j = load_json_file(path);
  selfref::RunConfig cfg = selfref::run_config_from_json(j);
  if (!j.contains("mode")) {
    cfg.mode = verb_mode;
  } else if (cfg.mode != verb_mode) {
    throw ConfigError(std::string("config mode \"") + selfref::mode_name(cfg.mode) +
                      "\" does not match this verb (expected \"" +
                      selfref::mode_name(verb_mode) + "\")");
  }
  if (seed_override.has_value()) cfg.seed = *seed_override;
  return cfg;
}

std::string fmt_opt(const std::optional<double>& v) {
  if (!v.has_value()) return "     -";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%6.3f", *v);
  return buf;
}

selfref::StepObserver progress_printer(long total_steps) {
  const long stride = std::max<long>(1, total_steps / 30);
  return [stride, total_steps](const selfref::StepObservation& obs) {
    const selfref::StepMetrics& m = obs.metrics;
    if (m.step % stride != 0 && m.step + 1 != total_steps) return;
    std::printf(
        "step %4ld/%ld  loss % .4f  verifier %s  kendall %s  self %s  "
        "clip %.3f  skip %.3f  parse_fail %.3f\n",
        m.step, total_steps, m.loss, fmt_opt(m.mean_reward_verifier).c_str(),
        fmt_opt(m.mean_reward_kendall).c_str(), fmt_opt(m.mean_reward_self).c_str(),
        m.clip_fraction, m.skipped_group_fraction, m.parse_failure_rate);
    std::fflush(stdout);
  };
}

void print_run_result(const selfref::TrainResult& result) {
  if (!result.checkpoint_path.empty()) {
    std::printf("checkpoint: %s (hash %s)\n", result.checkpoint_path.c_str(),
                selfref::to_hex(result.checkpoint_file_hash).c_str());
  }
  std::printf("steps completed: %zu\n", result.metrics.size());
}

int run_cli(int argc, char** argv) {
  CLI::App app{"unified player/referee policy training"};
  app.require_subcommand(1);

  // train
  auto* train_cmd = app.add_subcommand("train", "run unified training");
  std::string train_config;
  std::optional<std::uint64_t> train_seed;
  train_cmd->add_option("--config", train_config, "run config file")->required();
  train_cmd->add_option("--seed", train_seed, "override the config seed");

  // baseline
  auto* base_cmd = app.add_subcommand("baseline", "run the frozen-referee baseline");
  std::string base_config, base_referee;
  std::optional<std::uint64_t> base_seed;
  base_cmd->add_option("--config", base_config, "run config file")->required();
  base_cmd->add_option("--seed", base_seed, "override the config seed");
  base_cmd->add_option("--referee", base_referee, "override referee_checkpoint");

  // gen-data
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic task suite");
  std::string gen_config, gen_out;
  std::optional<std::uint64_t> gen_seed;
  selfref::SuiteSizes sizes;
  gen_cmd->add_option("--config", gen_config, "run config file (supplies the default seed)");
  gen_cmd->add_option("--seed", gen_seed, "generator seed");
  gen_cmd->add_option("--out-dir", gen_out, "output directory")->required();
  gen_cmd->add_option("--reasoning", sizes.reasoning, "reasoning items");
  gen_cmd->add_option("--preference", sizes.preference, "preference items");
  gen_cmd->add_option("--instruction", sizes.instruction, "instruction items");

  // eval-referee
  auto* eval_cmd = app.add_subcommand("eval-referee", "score a checkpoint as a judge");
  std::string eval_config, eval_ckpt, eval_dataset;
  std::optional<std::uint64_t> eval_seed;
  selfref::RefereeEvalConfig eval_cfg;
  eval_cmd->add_option("--config", eval_config,
                       "run config file (supplies dataset path and seed defaults)");
  eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "policy checkpoint to judge with")->required();
  eval_cmd->add_option("--dataset", eval_dataset, "preference dataset file");
  eval_cmd->add_option("--trials", eval_cfg.trials, "evaluations per item");
  eval_cmd->add_option("--temperature", eval_cfg.temperature, "sampling temperature");
  eval_cmd->add_option("--max-eval-len", eval_cfg.max_eval_len, "evaluation length cap");

  // render-prompt
  auto* render_cmd = app.add_subcommand("render-prompt", "print a rendered evaluator prompt");
  std::string render_config, render_question;
  std::optional<std::uint64_t> render_seed;
  std::vector<std::string> render_candidates;
  render_cmd->add_option("--config", render_config, "run config file (accepted, unused)");
  render_cmd->add_option("--seed", render_seed, "shuffle candidates with this seed");
  render_cmd->add_option("--question", render_question, "question text")->required();
  render_cmd->add_option("--candidate", render_candidates, "candidate response (repeatable)")
      ->required();

  // verify
  auto* verify_cmd = app.add_subcommand("verify", "check one answer against a ground truth");
  std::string verify_config, verify_response, verify_gt;
  std::optional<std::uint64_t> verify_seed;
  double verify_tol = 1e-6;
  verify_cmd->add_option("--config", verify_config,
                         "run config file (supplies the tolerance default)");
  verify_cmd->add_option("--seed", verify_seed, "accepted, unused");
  verify_cmd->add_option("--response", verify_response, "generated answer text")->required();
  verify_cmd->add_option("--ground-truth", verify_gt, "expected answer")->required();
  verify_cmd->add_option("--tolerance", verify_tol, "numeric tolerance");

  CLI11_PARSE(app, argc, argv);

  if (train_cmd->parsed()) {
    selfref::RunConfig cfg = load_verb_config(train_config, selfref::RunMode::Unified, train_seed);
    selfref::TrainResult result = selfref::train(cfg, progress_printer(cfg.total_steps));
    print_run_result(result);
    return 0;
  }

  if (base_cmd->parsed()) {
    selfref::RunConfig cfg =
        load_verb_config(base_config, selfref::RunMode::FrozenReferee, base_seed);
    if (!base_referee.empty()) cfg.referee_checkpoint = base_referee;
    if (!cfg.referee_checkpoint.empty()) {
      std::printf("referee: %s (hash %s)\n", cfg.referee_checkpoint.c_str(),
                  selfref::to_hex(selfref::file_hash(cfg.referee_checkpoint)).c_str());
    }
    selfref::TrainResult result =
        selfref::run_frozen_referee(cfg, progress_printer(cfg.total_steps));
    print_run_result(result);
    return 0;
  }

  if (gen_cmd->parsed()) {
    std::uint64_t seed = 0;
    if (!gen_config.empty()) seed = selfref::run_config_from_json(load_json_file(gen_config)).seed;
    if (gen_seed.has_value()) seed = *gen_seed;
    const selfref::SuitePaths paths = selfref::make_synthetic_suite(seed, sizes, gen_out);
    std::printf("%s\n%s\n%s\n", paths.reasoning.c_str(), paths.preference.c_str(),
                paths.instruction.c_str());
    return 0;
  }

  if (eval_cmd->parsed()) {
    if (!eval_config.empty()) {
      const selfref::RunConfig cfg = selfref::run_config_from_json(load_json_file(eval_config));
      if (eval_dataset.empty()) eval_dataset = cfg.preference_path;
      eval_cfg.seed = cfg.seed;
    }
    if (eval_seed.has_value()) eval_cfg.seed = *eval_seed;
    if (eval_dataset.empty()) {
      throw ConfigError("eval-referee needs --dataset or a config with data.preference");
    }
    const selfref::TinyLm judge =
        selfref::load_checkpoint(eval_ckpt, selfref::Vocabulary::standard().hash());
    const auto dataset = selfref::load_dataset(eval_dataset, selfref::TaskKind::Preference);
    const selfref::RefereeReport report = selfref::eval_referee(judge, dataset, eval_cfg);
    nlohmann::json out = {{"mean_reward", report.mean_reward},
                          {"pairwise_accuracy", report.pairwise_accuracy},
                          {"parse_failure_rate", report.parse_failure_rate},
                          {"pairs", report.pair_count},
                          {"trials", report.trial_count}};
    std::printf("%s\n", out.dump().c_str());
    return 0;
  }

  if (render_cmd->parsed()) {
    const int n = static_cast<int>(render_candidates.size());
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
    if (render_seed.has_value()) {
      auto rng = selfref::make_rng(*render_seed, selfref::RngChannel::Permutation);
      perm = selfref::random_permutation(n, rng);
    }
    const selfref::EvalPrompt prompt =
        selfref::render_eval_prompt(render_question, render_candidates, perm);
    std::printf("%s\n", prompt.text.c_str());
    return 0;
  }

  if (verify_cmd->parsed()) {
    if (!verify_config.empty() && !verify_cmd->count("--tolerance")) {
      verify_tol = selfref::run_config_from_json(load_json_file(verify_config)).verifier_tolerance;
    }
    const double score = selfref::verify_answer(verify_response, verify_gt, verify_tol);
    std::printf("%g\n", score);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const selfref::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const selfref::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const selfref::NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 4;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

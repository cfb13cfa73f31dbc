// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0

#include "selfref/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>

#include "selfref/errors.hpp"
#include "selfref/prompt_kit.hpp"
#include "selfref/rand.hpp"

namespace selfref {

namespace {

using nlohmann::json;

// ---- config plumbing ----

void require_known_keys(const json& j, const std::string& where,
                        std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* key : allowed) {
      if (it.key() == key) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError("unknown config key '" + where + "." + it.key() + "'");
    }
  }
}

template <typename T>
T read_field(const json& j, const std::string& where, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + where + "." + key + "' has the wrong type");
  }
}

TaskKind parse_kind_name(const std::string& name) {
  for (TaskKind kind : kAllKinds) {
    if (name == kind_name(kind)) return kind;
  }
  throw ConfigError("unknown task kind '" + name +
                    "' (expected preference, reasoning or instruction)");
}

MixRatio ratio_from_json(const json& j) {
  if (j.is_string()) return parse_mix_ratio(j.get<std::string>());
  if (!j.is_object()) {
    throw ConfigError("config field 'ratio' must be a \"P:R:I\" string or an object");
  }
  require_known_keys(j, "ratio", {"preference", "reasoning", "instruction"});
  MixRatio ratio;
  ratio.preference = read_field(j, "ratio", "preference", 0.0);
  ratio.reasoning = read_field(j, "ratio", "reasoning", 0.0);
  ratio.instruction = read_field(j, "ratio", "instruction", 0.0);
  return ratio;
}

json optional_mean(const std::optional<double>& value) {
  return value.has_value() ? json(*value) : json(nullptr);
}

std::optional<double> mean_from_json(const json& j, const char* key) {
  const json& v = j.at(key);
  if (v.is_null()) return std::nullopt;
  if (!v.is_number()) throw DataError(std::string("metrics field 'mean_reward.") + key +
                                      "' must be a number or null");
  return v.get<double>();
}

// Mean of the rewards gathered for one source, or null when the step had
// no group routed to it.
struct SourceAccum {
  double sum = 0.0;
  long count = 0;

  void add(std::span<const double> rewards) {
    for (double r : rewards) sum += r;
    count += static_cast<long>(rewards.size());
  }
  std::optional<double> mean() const {
    if (count == 0) return std::nullopt;
    return sum / static_cast<double>(count);
  }
};

}  // namespace

const char* mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::Unified:
      return "unified";
    case RunMode::FrozenReferee:
      return "frozen-referee";
  }
  throw std::logic_error("unreachable: bad RunMode");
}

RunMode parse_mode(const std::string& text) {
  // "urpo" is accepted as a legacy spelling of the unified mode.
  if (text == "unified" || text == "urpo") return RunMode::Unified;
  if (text == "frozen-referee" || text == "frozen_referee") return RunMode::FrozenReferee;
  throw ConfigError("unknown mode '" + text + "' (expected \"unified\" or \"frozen-referee\")");
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  require_known_keys(j, "<top>",
                     {"mode", "seed", "total_steps", "ratio", "curriculum", "grpo",
                      "model", "self_reward", "optim", "verifier_tolerance", "data",
                      "output", "referee_checkpoint"});
  RunConfig cfg;

  if (j.contains("mode")) cfg.mode = parse_mode(read_field(j, "<top>", "mode", std::string()));
  cfg.seed = read_field(j, "<top>", "seed", cfg.seed);
  cfg.total_steps = read_field(j, "<top>", "total_steps", cfg.total_steps);
  if (j.contains("ratio")) cfg.ratio = ratio_from_json(j.at("ratio"));
  cfg.verifier_tolerance =
      read_field(j, "<top>", "verifier_tolerance", cfg.verifier_tolerance);
  cfg.referee_checkpoint =
      read_field(j, "<top>", "referee_checkpoint", cfg.referee_checkpoint);

  if (j.contains("curriculum")) {
    const json& c = j.at("curriculum");
    require_known_keys(c, "curriculum", {"warmup_steps", "phase1_kinds"});
    cfg.curriculum.warmup_steps =
        read_field(c, "curriculum", "warmup_steps", cfg.curriculum.warmup_steps);
    if (c.contains("phase1_kinds")) {
      std::vector<std::string> names =
          read_field(c, "curriculum", "phase1_kinds", std::vector<std::string>());
      cfg.curriculum.phase1_kinds.clear();
      for (const std::string& name : names) {
        cfg.curriculum.phase1_kinds.push_back(parse_kind_name(name));
      }
    }
  }

  if (j.contains("grpo")) {
    const json& g = j.at("grpo");
    require_known_keys(g, "grpo",
                       {"clip_low", "clip_high", "beta", "inner_epochs", "group_size",
                        "temperature", "max_gen_len", "adv_eps", "lr_peak",
                        "batch_prompts"});
    cfg.grpo.clip_low = read_field(g, "grpo", "clip_low", cfg.grpo.clip_low);
    cfg.grpo.clip_high = read_field(g, "grpo", "clip_high", cfg.grpo.clip_high);
    cfg.grpo.beta = read_field(g, "grpo", "beta", cfg.grpo.beta);
    cfg.grpo.inner_epochs = read_field(g, "grpo", "inner_epochs", cfg.grpo.inner_epochs);
    cfg.grpo.group_size = read_field(g, "grpo", "group_size", cfg.grpo.group_size);
    cfg.grpo.temperature = read_field(g, "grpo", "temperature", cfg.grpo.temperature);
    cfg.grpo.max_gen_len = read_field(g, "grpo", "max_gen_len", cfg.grpo.max_gen_len);
    cfg.grpo.adv_eps = read_field(g, "grpo", "adv_eps", cfg.grpo.adv_eps);
    cfg.grpo.lr_peak = read_field(g, "grpo", "lr_peak", cfg.grpo.lr_peak);
    cfg.grpo.batch_prompts = read_field(g, "grpo", "batch_prompts", cfg.grpo.batch_prompts);
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    require_known_keys(m, "model",
                       {"embed_dim", "hidden_dim", "window", "init_scale", "format_bias"});
    cfg.model.embed_dim = read_field(m, "model", "embed_dim", cfg.model.embed_dim);
    cfg.model.hidden_dim = read_field(m, "model", "hidden_dim", cfg.model.hidden_dim);
    cfg.model.window = read_field(m, "model", "window", cfg.model.window);
    cfg.model.init_scale = read_field(m, "model", "init_scale", cfg.model.init_scale);
    cfg.model.format_bias = read_field(m, "model", "format_bias", cfg.model.format_bias);
  }

  if (j.contains("self_reward")) {
    const json& s = j.at("self_reward");
    require_known_keys(s, "self_reward",
                       {"eval_temperature", "max_eval_len", "max_retries",
                        "shuffle_candidates"});
    cfg.self_reward.eval_temperature =
        read_field(s, "self_reward", "eval_temperature", cfg.self_reward.eval_temperature);
    cfg.self_reward.max_eval_len =
        read_field(s, "self_reward", "max_eval_len", cfg.self_reward.max_eval_len);
    cfg.self_reward.max_retries =
        read_field(s, "self_reward", "max_retries", cfg.self_reward.max_retries);
    cfg.self_reward.shuffle_candidates = read_field(
        s, "self_reward", "shuffle_candidates", cfg.self_reward.shuffle_candidates);
  }

  if (j.contains("optim")) {
    const json& o = j.at("optim");
    require_known_keys(o, "optim", {"beta1", "beta2", "eps", "weight_decay"});
    cfg.optim.beta1 = read_field(o, "optim", "beta1", cfg.optim.beta1);
    cfg.optim.beta2 = read_field(o, "optim", "beta2", cfg.optim.beta2);
    cfg.optim.eps = read_field(o, "optim", "eps", cfg.optim.eps);
    cfg.optim.weight_decay = read_field(o, "optim", "weight_decay", cfg.optim.weight_decay);
  }

  if (j.contains("data")) {
    const json& d = j.at("data");
    require_known_keys(d, "data", {"reasoning", "preference", "instruction"});
    cfg.reasoning_path = read_field(d, "data", "reasoning", cfg.reasoning_path);
    cfg.preference_path = read_field(d, "data", "preference", cfg.preference_path);
    cfg.instruction_path = read_field(d, "data", "instruction", cfg.instruction_path);
  }

  if (j.contains("output")) {
    const json& o = j.at("output");
    require_known_keys(o, "output", {"metrics", "checkpoint", "checkpoint_interval"});
    cfg.metrics_path = read_field(o, "output", "metrics", cfg.metrics_path);
    cfg.checkpoint_path = read_field(o, "output", "checkpoint", cfg.checkpoint_path);
    cfg.checkpoint_interval =
        read_field(o, "output", "checkpoint_interval", cfg.checkpoint_interval);
  }

  return cfg;
}

json run_config_to_json(const RunConfig& config) {
  json j;
  j["mode"] = mode_name(config.mode);
  j["seed"] = config.seed;
  j["total_steps"] = config.total_steps;
  j["ratio"] = {{"preference", config.ratio.preference},
                {"reasoning", config.ratio.reasoning},
                {"instruction", config.ratio.instruction}};
  json kinds = json::array();
  for (TaskKind kind : config.curriculum.phase1_kinds) kinds.push_back(kind_name(kind));
  j["curriculum"] = {{"warmup_steps", config.curriculum.warmup_steps},
                     {"phase1_kinds", kinds}};
  j["grpo"] = {{"clip_low", config.grpo.clip_low},
               {"clip_high", config.grpo.clip_high},
               {"beta", config.grpo.beta},
               {"inner_epochs", config.grpo.inner_epochs},
               {"group_size", config.grpo.group_size},
               {"temperature", config.grpo.temperature},
               {"max_gen_len", config.grpo.max_gen_len},
               {"adv_eps", config.grpo.adv_eps},
               {"lr_peak", config.grpo.lr_peak},
               {"batch_prompts", config.grpo.batch_prompts}};
  j["model"] = {{"embed_dim", config.model.embed_dim},
                {"hidden_dim", config.model.hidden_dim},
                {"window", config.model.window},
                {"init_scale", config.model.init_scale},
                {"format_bias", config.model.format_bias}};
  j["self_reward"] = {{"eval_temperature", config.self_reward.eval_temperature},
                      {"max_eval_len", config.self_reward.max_eval_len},
                      {"max_retries", config.self_reward.max_retries},
                      {"shuffle_candidates", config.self_reward.shuffle_candidates}};
  j["optim"] = {{"beta1", config.optim.beta1},
                {"beta2", config.optim.beta2},
                {"eps", config.optim.eps},
                {"weight_decay", config.optim.weight_decay}};
  j["verifier_tolerance"] = config.verifier_tolerance;
  j["data"] = {{"reasoning", config.reasoning_path},
               {"preference", config.preference_path},
               {"instruction", config.instruction_path}};
  j["output"] = {{"metrics", config.metrics_path},
                 {"checkpoint", config.checkpoint_path},
                 {"checkpoint_interval", config.checkpoint_interval}};
  j["referee_checkpoint"] = config.referee_checkpoint;
  return j;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

void validate_run_config(const RunConfig& config) {
  config.grpo.validate();
  if (config.total_steps < 0) throw ConfigError("total_steps must be >= 0");
  if (config.model.embed_dim < 1 || config.model.hidden_dim < 1 || config.model.window < 1) {
    throw ConfigError("model dimensions must be positive");
  }
  if (!(config.model.init_scale > 0.0) || !std::isfinite(config.model.init_scale)) {
    throw ConfigError("model.init_scale must be positive and finite");
  }
  if (!std::isfinite(config.model.format_bias) || config.model.format_bias < 0.0) {
    throw ConfigError("model.format_bias must be finite and >= 0");
  }
  const double ws[] = {config.ratio.preference, config.ratio.reasoning,
                       config.ratio.instruction};
  double total = 0.0;
  for (double w : ws) {
    if (!std::isfinite(w) || w < 0.0) throw ConfigError("ratio weights must be finite and >= 0");
    total += w;
  }
  if (total <= 0.0) throw ConfigError("ratio must have at least one positive weight");
  if (config.curriculum.warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  if (config.ratio.instruction > 0.0 && config.total_steps <= config.curriculum.warmup_steps) {
    throw ConfigError(
        "total_steps must exceed curriculum.warmup_steps when the instruction "
        "weight is positive, or the open-ended data never enters training");
  }
  if (!(config.self_reward.eval_temperature > 0.0)) {
    throw ConfigError("self_reward.eval_temperature must be positive");
  }
  if (config.self_reward.max_eval_len < 1) {
    throw ConfigError("self_reward.max_eval_len must be >= 1");
  }
  if (config.self_reward.max_retries < 0) {
    throw ConfigError("self_reward.max_retries must be >= 0");
  }
  if (!(config.optim.beta1 >= 0.0 && config.optim.beta1 < 1.0) ||
      !(config.optim.beta2 >= 0.0 && config.optim.beta2 < 1.0)) {
    throw ConfigError("optim.beta1/beta2 must lie in [0, 1)");
  }
  if (!(config.optim.eps > 0.0)) throw ConfigError("optim.eps must be positive");
  if (config.optim.weight_decay < 0.0) throw ConfigError("optim.weight_decay must be >= 0");
  if (!(config.verifier_tolerance >= 0.0)) {
    throw ConfigError("verifier_tolerance must be >= 0");
  }
  if (config.checkpoint_interval < 0) throw ConfigError("checkpoint_interval must be >= 0");
  if (config.ratio.preference > 0.0 && config.preference_path.empty()) {
    throw ConfigError("preference weight is positive but data.preference is not set");
  }
  if (config.ratio.reasoning > 0.0 && config.reasoning_path.empty()) {
    throw ConfigError("reasoning weight is positive but data.reasoning is not set");
  }
  if (config.ratio.instruction > 0.0 && config.instruction_path.empty()) {
    throw ConfigError("instruction weight is positive but data.instruction is not set");
  }
}

std::string metrics_to_json_line(const StepMetrics& m) {
  json j;
  j["step"] = m.step;
  j["counts"] = {{"preference", m.counts[0]},
                 {"reasoning", m.counts[1]},
                 {"instruction", m.counts[2]}};
  j["mean_reward"] = {{"verifier", optional_mean(m.mean_reward_verifier)},
                      {"kendall", optional_mean(m.mean_reward_kendall)},
                      {"self", optional_mean(m.mean_reward_self)}};
  j["clip_fraction"] = m.clip_fraction;
  j["skipped_group_fraction"] = m.skipped_group_fraction;
  j["parse_failure_rate"] = m.parse_failure_rate;
  j["loss"] = m.loss;
  j["lr"] = m.lr;
  return j.dump();
}

StepMetrics metrics_from_json_line(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("metrics line is not valid JSON: ") + e.what());
  }
  try {
    StepMetrics m;
    m.step = j.at("step").get<long>();
    const json& counts = j.at("counts");
    m.counts[0] = counts.at("preference").get<int>();
    m.counts[1] = counts.at("reasoning").get<int>();
    m.counts[2] = counts.at("instruction").get<int>();
    const json& mr = j.at("mean_reward");
    m.mean_reward_verifier = mean_from_json(mr, "verifier");
    m.mean_reward_kendall = mean_from_json(mr, "kendall");
    m.mean_reward_self = mean_from_json(mr, "self");
    m.clip_fraction = j.at("clip_fraction").get<double>();
    m.skipped_group_fraction = j.at("skipped_group_fraction").get<double>();
    m.parse_failure_rate = j.at("parse_failure_rate").get<double>();
    m.loss = j.at("loss").get<double>();
    m.lr = j.at("lr").get<double>();
    return m;
  } catch (const json::exception& e) {
    throw DataError(std::string("metrics line does not match the schema: ") + e.what());
  }
}

namespace {

// Relative strength of the format prior per structural symbol. The boxed
// markers carry the most weight — they are the rarest and most valuable
// pieces of a scoreable output — digits and separators follow, and filler
// punctuation trails so random emissions lean toward "\boxed{d, d}"-shaped
// strings instead of dot soup. One scalar (model.format_bias) scales the
// whole profile.
double format_bias_weight(const std::string& symbol) {
  if (symbol == "\\boxed{" || symbol == "}") return 1.3;
  if (symbol == ",") return 1.4;
  if (symbol.size() == 1 && symbol[0] >= '0' && symbol[0] <= '9') return 1.0;
  if (symbol == " ") return 0.6;
  if (symbol == ".") return 0.3;
  return 1.0;  // the end symbol
}

}  // namespace

TinyLm build_policy(const RunConfig& config) {
  const Vocabulary& vocab = Vocabulary::standard();
  TinyLmConfig mc;
  mc.vocab_size = vocab.size();
  mc.embed_dim = config.model.embed_dim;
  mc.hidden_dim = config.model.hidden_dim;
  mc.window = config.model.window;
  mc.end_token = vocab.end_token();
  mc.init_scale = config.model.init_scale;
  mc.init_seed = config.seed;
  if (config.model.format_bias != 0.0) {
    for (TokenId t : vocab.structural_tokens()) {
      mc.logit_bias.emplace_back(t, config.model.format_bias * format_bias_weight(vocab.symbol(t)));
    }
  }
  return TinyLm(mc);
}

namespace {

// ---- training loop ----

struct BuiltGroup {
  RolloutGroup group;
  bool skipped = false;     // zero-variance rewards; contributes no gradient
  int parse_attempts = 0;   // evaluation texts that went through the parser
  int parse_failures = 0;
};

BuiltGroup build_group(const Policy& policy, const Policy& judge,
                       const Vocabulary& vocab, const TaskInstance& task,
                       const RunConfig& config, long step, std::size_t index) {
  BuiltGroup built;
  RolloutGroup& group = built.group;
  const GrpoConfig& grpo = config.grpo;
  auto rollout_rng = make_rng(config.seed, RngChannel::Rollout, static_cast<std::uint64_t>(step),
                              static_cast<std::uint64_t>(index));

  switch (task.kind) {
    case TaskKind::Reasoning: {
      group.prompt = vocab.encode(task.prompt);
      SampledGroup sg = policy.sample_group(group.prompt, grpo.group_size, grpo.temperature,
                                            grpo.max_gen_len, rollout_rng);
      group.responses = std::move(sg.responses);
      group.old_logprobs = std::move(sg.logprobs);
      group.rewards.source = RewardSource::Verifier;
      for (const auto& tokens : group.responses) {
        group.rewards.rewards.push_back(verify_answer(
            vocab.decode(tokens), task.ground_truth_answer, config.verifier_tolerance));
      }
      break;
    }
    case TaskKind::Preference: {
      // The rendered evaluator prompt is the GRPO prompt; each sampled
      // response is one evaluation text scored by rank agreement.
      auto perm_rng = make_rng(config.seed, RngChannel::Permutation,
                               static_cast<std::uint64_t>(step),
                               static_cast<std::uint64_t>(index));
      const int n = static_cast<int>(task.candidates.size());
      EvalPrompt prompt = render_eval_prompt(task.prompt, task.candidates,
                                             random_permutation(n, perm_rng));
      group.prompt = vocab.encode(prompt.text);
      SampledGroup sg = policy.sample_group(group.prompt, grpo.group_size, grpo.temperature,
                                            grpo.max_gen_len, rollout_rng);
      group.responses = std::move(sg.responses);
      group.old_logprobs = std::move(sg.logprobs);
      group.rewards.source = RewardSource::KendallTau;
      for (const auto& tokens : group.responses) {
        PreferenceOutcome outcome =
            preference_outcome(vocab.decode(tokens), prompt, task.gt_ranks);
        group.rewards.rewards.push_back(outcome.reward);
        ++built.parse_attempts;
        if (outcome.parse_failed) ++built.parse_failures;
      }
      break;
    }
    case TaskKind::Instruction: {
      group.prompt = vocab.encode(task.prompt);
      SampledGroup sg = policy.sample_group(group.prompt, grpo.group_size, grpo.temperature,
                                            grpo.max_gen_len, rollout_rng);
      group.responses = std::move(sg.responses);
      group.old_logprobs = std::move(sg.logprobs);
      std::vector<std::string> texts;
      texts.reserve(group.responses.size());
      for (const auto& tokens : group.responses) texts.push_back(vocab.decode(tokens));
      auto eval_rng = make_rng(config.seed, RngChannel::SelfEval,
                               static_cast<std::uint64_t>(step),
                               static_cast<std::uint64_t>(index));
      SelfRewardOutcome outcome = self_reward_group(judge, vocab, task.prompt, texts,
                                                    config.self_reward, eval_rng);
      group.rewards = std::move(outcome.rewards);
      built.parse_attempts += outcome.attempts;
      built.parse_failures += outcome.parse_failures;
      break;
    }
  }

  group.advantages = compute_advantages(group.rewards.rewards, grpo.adv_eps);
  built.skipped = std::all_of(group.advantages.begin(), group.advantages.end(),
                              [](double a) { return a == 0.0; });
  return built;
}

// Reward routing is a fixed contract: any mismatch is a programming error,
// not a data condition.
void assert_routing(TaskKind kind, RewardSource source) {
  bool ok = false;
  switch (kind) {
    case TaskKind::Reasoning:
      ok = source == RewardSource::Verifier;
      break;
    case TaskKind::Preference:
      ok = source == RewardSource::KendallTau;
      break;
    case TaskKind::Instruction:
      ok = source == RewardSource::SelfScore || source == RewardSource::Fallback;
      break;
  }
  if (!ok) throw std::logic_error("reward source does not match task kind routing");
}

struct RunOutputs {
  std::ofstream metrics_out;
  bool write_metrics = false;
};

void write_meta_sidecar(const RunConfig& config, const Vocabulary& vocab,
                        const std::optional<std::string>& referee_note) {
  if (config.metrics_path.empty()) return;
  json meta;
  meta["config"] = run_config_to_json(config);
  meta["vocab_hash"] = to_hex(vocab.hash());
  meta["referee"] = referee_note.has_value() ? json(*referee_note) : json(nullptr);
  meta["fields"] = {"clip_fraction", "counts",    "loss",
                    "lr",            "mean_reward", "parse_failure_rate",
                    "skipped_group_fraction",      "step"};
  const std::string path = config.metrics_path + ".meta.json";
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open metrics sidecar for writing: " + path);
  out << meta.dump(2) << "\n";
}

TrainResult run_loop(const RunConfig& config, const StepObserver& observer,
                     const Policy* referee) {
  validate_run_config(config);
  const Vocabulary& vocab = Vocabulary::standard();

  TaskPools pools;
  if (config.ratio.preference > 0.0) {
    pools.preference = load_dataset(config.preference_path, TaskKind::Preference);
  }
  if (config.ratio.reasoning > 0.0) {
    pools.reasoning = load_dataset(config.reasoning_path, TaskKind::Reasoning);
  }
  if (config.ratio.instruction > 0.0) {
    pools.instruction = load_dataset(config.instruction_path, TaskKind::Instruction);
  }

  auto policy = std::make_unique<TinyLm>(build_policy(config));

  // KL regularization (when enabled) anchors to a snapshot of the freshly
  // initialized policy.
  std::unique_ptr<Policy> kl_reference;
  if (config.grpo.beta > 0.0) kl_reference = policy->clone();

  std::optional<std::string> referee_note;
  if (config.mode == RunMode::FrozenReferee) {
    referee_note = config.referee_checkpoint.empty()
                       ? "in-process referee"
                       : config.referee_checkpoint + " " + to_hex(file_hash(config.referee_checkpoint));
  }

  RunOutputs outputs;
  if (!config.metrics_path.empty()) {
    outputs.metrics_out.open(config.metrics_path, std::ios::trunc);
    if (!outputs.metrics_out) {
      throw ConfigError("cannot open metrics file for writing: " + config.metrics_path);
    }
    outputs.write_metrics = true;
  }
  write_meta_sidecar(config, vocab, referee_note);

  OptimizerSchedule schedule = config.optim;
  schedule.lr_peak = config.grpo.lr_peak;
  schedule.total_steps =
      std::max<long>(1, config.total_steps * config.grpo.inner_epochs);
  TrainState state(policy->param_count());

  TrainResult result;
  result.metrics.reserve(static_cast<std::size_t>(config.total_steps));

  const auto save_to = [&](const std::string& path, long trained_steps) {
    save_checkpoint(path, *policy, vocab.hash(), trained_steps,
                    run_config_to_json(config));
  };

  for (long step = 0; step < config.total_steps; ++step) {
    auto batch_rng = make_rng(config.seed, RngChannel::Batch, static_cast<std::uint64_t>(step));
    const std::vector<TaskInstance> batch =
        mix_batch(pools, config.ratio, step, config.curriculum,
                  config.grpo.batch_prompts, batch_rng);

    // Rollouts + rewards for the whole batch under the pre-update policy.
    // In unified mode the same live policy judges its own instruction
    // groups; in frozen-referee mode the fixed referee judges instead.
    const Policy& judge = referee != nullptr ? *referee : *policy;
    std::vector<RolloutGroup> groups;
    std::vector<TaskKind> kinds;
    std::vector<bool> skipped;
    groups.reserve(batch.size());
    kinds.reserve(batch.size());

    StepMetrics metrics;
    metrics.step = step;
    SourceAccum verifier_acc, kendall_acc, self_acc;
    long parse_attempts = 0, parse_failures = 0;
    std::size_t skipped_count = 0;

    for (std::size_t i = 0; i < batch.size(); ++i) {
      const TaskInstance& task = batch[i];
      BuiltGroup built;
      try {
        built = build_group(*policy, judge, vocab, task, config, step, i);
      } catch (const NumericalError& e) {
        throw NumericalError("step " + std::to_string(step) + ", group " +
                             std::to_string(i) + " (" + kind_name(task.kind) +
                             "): " + e.what());
      }
      assert_routing(task.kind, built.group.rewards.source);
      metrics.counts[static_cast<int>(task.kind)] += 1;
      switch (built.group.rewards.source) {
        case RewardSource::Verifier:
          verifier_acc.add(built.group.rewards.rewards);
          break;
        case RewardSource::KendallTau:
          kendall_acc.add(built.group.rewards.rewards);
          break;
        case RewardSource::SelfScore:
          self_acc.add(built.group.rewards.rewards);
          break;
        case RewardSource::Fallback:
          break;  // all-zero placeholder rewards carry no signal to average
      }
      parse_attempts += built.parse_attempts;
      parse_failures += built.parse_failures;
      if (built.skipped) ++skipped_count;
      skipped.push_back(built.skipped);
      kinds.push_back(task.kind);
      groups.push_back(std::move(built.group));
    }

    metrics.mean_reward_verifier = verifier_acc.mean();
    metrics.mean_reward_kendall = kendall_acc.mean();
    metrics.mean_reward_self = self_acc.mean();
    metrics.parse_failure_rate =
        parse_attempts > 0
            ? static_cast<double>(parse_failures) / static_cast<double>(parse_attempts)
            : 0.0;
    metrics.skipped_group_fraction =
        groups.empty() ? 0.0
                       : static_cast<double>(skipped_count) / static_cast<double>(groups.size());
    metrics.lr = cosine_lr(schedule.lr_peak, state.step, schedule.total_steps);

    // Inner optimization epochs against the frozen rollout log-probs.
    // Skipped (zero-variance) groups are left out of both the gradient sum
    // and its denominator; a batch with no active group still advances the
    // optimizer with a zero gradient so the schedule stays aligned.
    double loss_sum = 0.0;
    std::size_t clipped_tokens = 0, total_tokens = 0;
    for (int epoch = 0; epoch < config.grpo.inner_epochs; ++epoch) {
      std::vector<double> grad(policy->param_count(), 0.0);
      double epoch_loss = 0.0;
      int active = 0;
      for (std::size_t i = 0; i < groups.size(); ++i) {
        if (skipped[i]) continue;
        GradientResult res;
        try {
          res = grpo_gradient(*policy, groups[i], config.grpo, kl_reference.get());
        } catch (const NumericalError& e) {
          throw NumericalError("step " + std::to_string(step) + ", group " +
                               std::to_string(i) + " (" + kind_name(kinds[i]) +
                               "), epoch " + std::to_string(epoch) + ": " + e.what());
        }
        for (std::size_t p = 0; p < grad.size(); ++p) grad[p] += res.grad[p];
        epoch_loss += res.loss;
        clipped_tokens += res.clipped_count;
        total_tokens += res.token_count;
        ++active;
      }
      if (active > 0) {
        const double inv = 1.0 / static_cast<double>(active);
        for (double& g : grad) g *= inv;
        epoch_loss *= inv;
      }
      optimizer_step(state, policy->mutable_params(), grad, schedule);
      loss_sum += epoch_loss;
    }
    metrics.loss = loss_sum / static_cast<double>(config.grpo.inner_epochs);
    metrics.clip_fraction =
        total_tokens > 0
            ? static_cast<double>(clipped_tokens) / static_cast<double>(total_tokens)
            : 0.0;

    if (outputs.write_metrics) {
      outputs.metrics_out << metrics_to_json_line(metrics) << "\n";
    }
    if (observer) observer(StepObservation{metrics, groups, kinds});
    result.metrics.push_back(metrics);

    if (!config.checkpoint_path.empty() && config.checkpoint_interval > 0 &&
        (step + 1) % config.checkpoint_interval == 0 && step + 1 < config.total_steps) {
      save_to(config.checkpoint_path + ".step" + std::to_string(step + 1), step + 1);
    }
  }

  if (outputs.write_metrics) {
    outputs.metrics_out.flush();
    if (!outputs.metrics_out) {
      throw DataError("failed writing metrics file: " + config.metrics_path);
    }
  }

  if (!config.checkpoint_path.empty()) {
    save_to(config.checkpoint_path, config.total_steps);
    result.checkpoint_path = config.checkpoint_path;
    result.checkpoint_file_hash = file_hash(config.checkpoint_path);
  }
  result.policy = std::move(policy);
  return result;
}

}  // namespace

TrainResult train(const RunConfig& config, const StepObserver& observer) {
  if (config.mode != RunMode::Unified) {
    throw ConfigError("train() requires mode \"unified\"; use run_frozen_referee() for "
                      "the frozen-referee baseline");
  }
  return run_loop(config, observer, nullptr);
}

TrainResult run_frozen_referee(const RunConfig& config, const StepObserver& observer,
                               const Policy* referee_override) {
  if (config.mode != RunMode::FrozenReferee) {
    throw ConfigError("run_frozen_referee() requires mode \"frozen-referee\"");
  }
  std::unique_ptr<TinyLm> owned;
  const Policy* referee = referee_override;
  if (referee == nullptr) {
    if (config.referee_checkpoint.empty()) {
      throw ConfigError("frozen-referee mode requires referee_checkpoint");
    }
    owned = std::make_unique<TinyLm>(
        load_checkpoint(config.referee_checkpoint, Vocabulary::standard().hash()));
    referee = owned.get();
  }
  return run_loop(config, observer, referee);
}

// ---- synthetic data ----

namespace {

// Generator shape constants. Tuned so a small window-bound policy can
// plausibly learn the tasks: tiny operand space, single-digit answers and
// mostly pairwise preference items with one clearly wrong candidate. Wrong
// candidates keep the bare boxed form so the discriminating digits sit at
// near-fixed offsets inside a fixed-window judge's context.
constexpr int kOperandRange = 10;                 // a, b in [0, 10)
constexpr std::array<int, 3> kModuli = {2, 3, 5};
constexpr double kPrefTwoCandidates = 0.80;       // else 3 or 4 candidates
constexpr double kPrefThreeCandidates = 0.15;
constexpr double kCorrectVerbose = 0.15;          // correct answer, wordy form
constexpr double kWrongEasy = 0.85;               // digit outside [0, m)
constexpr double kWrongJunk = 0.05;               // no boxed answer at all

struct ArithmeticTask {
  std::string prompt;
  int modulus = 0;
  int answer = 0;
};

ArithmeticTask make_arithmetic(std::mt19937_64& rng) {
  const int a = static_cast<int>(rand_below(rng, kOperandRange));
  const int b = static_cast<int>(rand_below(rng, kOperandRange));
  const int m = kModuli[rand_below(rng, kModuli.size())];
  ArithmeticTask task;
  task.prompt = std::to_string(a) + "+" + std::to_string(b) + " mod " + std::to_string(m) + "=?";
  task.modulus = m;
  task.answer = (a + b) % m;
  return task;
}

std::string boxed_digit(int digit, bool verbose) {
  std::string core = "\\boxed{" + std::to_string(digit) + "}";
  return verbose ? "the answer is " + core : core;
}

// Latent candidate quality: correctness dominates, shorter text breaks
// ties. gt_ranks are derived from this exact ordering, and a test
// recomputes it independently.
std::pair<int, int> candidate_quality(const std::string& text, const std::string& gt,
                                      double tolerance) {
  const int correct = verify_answer(text, gt, tolerance) == 1.0 ? 1 : 0;
  return {correct, -static_cast<int>(text.size())};
}

json make_preference_record(std::mt19937_64& rng) {
  const ArithmeticTask task = make_arithmetic(rng);
  const std::string gt = std::to_string(task.answer);

  const double shape = rand_unit(rng);
  const int n = shape < kPrefTwoCandidates ? 2 : (shape < kPrefTwoCandidates + kPrefThreeCandidates ? 3 : 4);

  std::vector<std::string> candidates;
  candidates.push_back(boxed_digit(task.answer, rand_unit(rng) < kCorrectVerbose));
  while (static_cast<int>(candidates.size()) < n) {
    std::string text;
    for (int attempt = 0; attempt < 8; ++attempt) {
      const double kind = rand_unit(rng);
      if (kind < kWrongEasy) {
        // A digit that is not even a valid residue mod m.
        const int wrong =
            task.modulus + static_cast<int>(rand_below(rng, 10 - static_cast<std::size_t>(task.modulus)));
        text = boxed_digit(wrong, false);
      } else if (kind < 1.0 - kWrongJunk) {
        // A valid residue that is not the answer: wrong for this a+b.
        int wrong = task.answer;
        while (wrong == task.answer) {
          wrong = static_cast<int>(rand_below(rng, static_cast<std::size_t>(task.modulus)));
        }
        text = boxed_digit(wrong, false);
      } else {
        text = "i am not sure";
      }
      if (std::find(candidates.begin(), candidates.end(), text) == candidates.end()) break;
    }
    // Rare duplicate after all attempts: keep it; tied candidates simply
    // share a rank.
    candidates.push_back(text);
  }
  shuffle_in_place(candidates, rng);

  std::vector<std::pair<int, int>> quality;
  quality.reserve(candidates.size());
  for (const std::string& c : candidates) quality.push_back(candidate_quality(c, gt, 1e-6));
  std::vector<int> ranks(candidates.size(), 1);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    for (std::size_t k = 0; k < candidates.size(); ++k) {
      if (quality[k] > quality[i]) ++ranks[i];
    }
  }

  json record;
  record["prompt"] = task.prompt;
  record["candidates"] = candidates;
  record["gt_ranks"] = ranks;
  return record;
}

json make_instruction_record(std::mt19937_64& rng) {
  const int which = static_cast<int>(rand_below(rng, 5));
  std::string prompt;
  switch (which) {
    case 0:
      prompt = "write one short line about the number " +
               std::to_string(rand_below(rng, 10));
      break;
    case 1:
      prompt = std::string("say something nice about the letter ") +
               static_cast<char>('a' + rand_below(rng, 26));
      break;
    case 2: {
      const int lo = static_cast<int>(rand_below(rng, 8));
      const int hi = lo + 1 + static_cast<int>(rand_below(rng, static_cast<std::size_t>(9 - lo)));
      prompt = "count from " + std::to_string(lo) + " to " + std::to_string(hi);
      break;
    }
    case 3:
      prompt = std::string("name two words that start with ") +
               static_cast<char>('a' + rand_below(rng, 26));
      break;
    default:
      prompt = "describe a quiet morning in a few words";
      break;
  }
  return json{{"prompt", prompt}};
}

void write_jsonl(const std::string& path, const std::vector<json>& records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot open dataset file for writing: " + path);
  for (const json& record : records) out << record.dump() << "\n";
  out.flush();
  if (!out) throw DataError("failed writing dataset file: " + path);
}

}  // namespace

SuitePaths make_synthetic_suite(std::uint64_t seed, const SuiteSizes& sizes,
                                const std::string& out_dir) {
  if (sizes.reasoning <= 0 || sizes.preference <= 0 || sizes.instruction <= 0) {
    throw ConfigError("synthetic suite sizes must be positive");
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw ConfigError("cannot create output directory " + out_dir + ": " + ec.message());

  SuitePaths paths;
  paths.reasoning = (std::filesystem::path(out_dir) / "reasoning.jsonl").string();
  paths.preference = (std::filesystem::path(out_dir) / "preference.jsonl").string();
  paths.instruction = (std::filesystem::path(out_dir) / "instruction.jsonl").string();

  // One sub-stream per file, so resizing one dataset never shifts the
  // contents of another.
  {
    auto rng = make_rng(seed, RngChannel::DataGen, 0);
    std::vector<json> records;
    records.reserve(static_cast<std::size_t>(sizes.reasoning));
    for (int i = 0; i < sizes.reasoning; ++i) {
      const ArithmeticTask task = make_arithmetic(rng);
      records.push_back(json{{"prompt", task.prompt},
                             {"ground_truth_answer", std::to_string(task.answer)}});
    }
    write_jsonl(paths.reasoning, records);
  }
  {
    auto rng = make_rng(seed, RngChannel::DataGen, 1);
    std::vector<json> records;
    records.reserve(static_cast<std::size_t>(sizes.preference));
    for (int i = 0; i < sizes.preference; ++i) records.push_back(make_preference_record(rng));
    write_jsonl(paths.preference, records);
  }
  {
    auto rng = make_rng(seed, RngChannel::DataGen, 2);
    std::vector<json> records;
    records.reserve(static_cast<std::size_t>(sizes.instruction));
    for (int i = 0; i < sizes.instruction; ++i) records.push_back(make_instruction_record(rng));
    write_jsonl(paths.instruction, records);
  }

  // Round-trip through the strict loader so a generator bug surfaces here,
  // at the source, rather than mid-run.
  load_dataset(paths.reasoning, TaskKind::Reasoning);
  load_dataset(paths.preference, TaskKind::Preference);
  load_dataset(paths.instruction, TaskKind::Instruction);
  return paths;
}

RefereeReport eval_referee(const Policy& judge, const std::vector<TaskInstance>& dataset,
                           const RefereeEvalConfig& config) {
  if (dataset.empty()) throw DataError("referee evaluation needs a non-empty preference dataset");
  if (config.trials < 1) throw ConfigError("eval trials must be >= 1");
  if (!(config.temperature > 0.0)) throw ConfigError("eval temperature must be positive");
  if (config.max_eval_len < 1) throw ConfigError("max_eval_len must be >= 1");
  const Vocabulary& vocab = Vocabulary::standard();

  RefereeReport report;
  double reward_sum = 0.0;
  long parse_failures = 0;
  long pair_total = 0;
  long pair_correct = 0;

  for (std::size_t item = 0; item < dataset.size(); ++item) {
    const TaskInstance& task = dataset[item];
    if (task.kind != TaskKind::Preference || task.candidates.size() < 2) {
      throw DataError("referee evaluation item " + std::to_string(item) +
                      " is not a preference instance");
    }
    const int n = static_cast<int>(task.candidates.size());
    for (int trial = 0; trial < config.trials; ++trial) {
      auto rng = make_rng(config.seed, RngChannel::Eval, item,
                          static_cast<std::uint64_t>(trial));
      EvalPrompt prompt =
          render_eval_prompt(task.prompt, task.candidates, random_permutation(n, rng));
      const std::vector<TokenId> prompt_tokens = vocab.encode(prompt.text);
      const SampledResponse resp =
          judge.sample_response(prompt_tokens, config.temperature, config.max_eval_len, rng);
      const std::string text = vocab.decode(resp.tokens);
      ++report.trial_count;

      const ScoreParseResult parsed = parse_scores(text, n);
      if (!parsed.ok()) {
        reward_sum += kParsePenalty;
        ++parse_failures;
        // Unparsable evaluations are tracked by the parse-failure rate;
        // pairwise accuracy measures only the rankings actually produced.
        continue;
      }
      const std::vector<double> scores = unpermute(*parsed.scores, prompt.permutation);
      reward_sum += kendall_tau(scores, task.gt_ranks);
      for (int i = 0; i < n; ++i) {
        for (int k = i + 1; k < n; ++k) {
          const int gi = task.gt_ranks[static_cast<std::size_t>(i)];
          const int gk = task.gt_ranks[static_cast<std::size_t>(k)];
          if (gi == gk) continue;
          ++pair_total;
          const double ds = scores[static_cast<std::size_t>(i)] -
                            scores[static_cast<std::size_t>(k)];
          // Ranks grow downward: the pair is ordered correctly when the
          // better-ranked (smaller) side got the strictly larger score.
          if (ds * static_cast<double>(gk - gi) > 0.0) ++pair_correct;
        }
      }
    }
  }

  report.mean_reward = reward_sum / static_cast<double>(report.trial_count);
  report.parse_failure_rate =
      static_cast<double>(parse_failures) / static_cast<double>(report.trial_count);
  report.pair_count = pair_total;
  report.pairwise_accuracy =
      pair_total > 0 ? static_cast<double>(pair_correct) / static_cast<double>(pair_total) : 0.0;
  return report;
}

std::uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file for hashing: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return fnv1a64(buffer.str());
}

}  // namespace selfref

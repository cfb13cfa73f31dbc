// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Token policies. TinyLm is the trainable model: a fixed-window bag of
// position-bound token embeddings feeding one tanh hidden layer and an
// affine output head. It is deliberately small — every gradient is written
// out by hand and checked against finite differences in the tests, so the
// whole training stack stays inspectable end to end. ScriptedPolicy is a
// deterministic stand-in used by tests and as a frozen referee double.

#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "selfref/vocab.hpp"

namespace selfref {

struct SampledResponse {
  std::vector<TokenId> tokens;
  std::vector<double> logprobs;  // log-prob of each token when sampled
};

struct SampledGroup {
  std::vector<std::vector<TokenId>> responses;
  std::vector<std::vector<double>> logprobs;
};

class Policy {
 public:
  virtual ~Policy() = default;

  virtual int vocab_size() const = 0;
  virtual std::size_t param_count() const = 0;
  virtual std::span<const double> params() const = 0;
  virtual std::span<double> mutable_params() = 0;
  virtual std::unique_ptr<Policy> clone() const = 0;

  // Distribution over the next token given a context; always a valid
  // probability vector. temperature must be positive.
  virtual std::vector<double> next_token_dist(std::span<const TokenId> context,
                                              double temperature) const = 0;

  // Samples autoregressively until the end token or max_len tokens. The
  // recorded log-probabilities are exactly what sequence_logprobs returns
  // for the same (prompt, response, temperature).
  virtual SampledResponse sample_response(std::span<const TokenId> prompt,
                                          double temperature, int max_len,
                                          std::mt19937_64& rng) const = 0;

  // group_size independent samples from the same prompt.
  SampledGroup sample_group(std::span<const TokenId> prompt, int group_size,
                            double temperature, int max_len,
                            std::mt19937_64& rng) const;

  // Teacher-forced per-token log-probabilities of `response` after `prompt`.
  virtual std::vector<double> sequence_logprobs(std::span<const TokenId> prompt,
                                                std::span<const TokenId> response,
                                                double temperature) const = 0;

  // Gradient of sum_t weights[t] * log pi(response[t] | prefix) with respect
  // to the flat parameter vector. Parameter-free policies return an empty
  // vector.
  virtual std::vector<double> weighted_logprob_gradient(
      std::span<const TokenId> prompt, std::span<const TokenId> response,
      std::span<const double> weights, double temperature) const = 0;
};

struct TinyLmConfig {
  int vocab_size = 0;
  int embed_dim = 16;
  int hidden_dim = 32;
  int window = 8;  // how many trailing context tokens the model sees
  TokenId end_token = 0;
  double init_scale = 0.08;
  std::uint64_t init_seed = 0;
  // Added to the output bias at initialization. Training from a blank
  // model has no pretrained format competence to lean on, so runs may seed
  // a mild preference for the structural output symbols here; zero-bias
  // models stay exactly uniform at init.
  std::vector<std::pair<TokenId, double>> logit_bias;
};

class TinyLm final : public Policy {
 public:
  explicit TinyLm(const TinyLmConfig& config);

  const TinyLmConfig& config() const { return config_; }

  int vocab_size() const override { return config_.vocab_size; }
  std::size_t param_count() const override { return params_.size(); }
  std::span<const double> params() const override { return params_; }
  std::span<double> mutable_params() override { return params_; }
  std::unique_ptr<Policy> clone() const override;

  std::vector<double> next_token_dist(std::span<const TokenId> context,
                                      double temperature) const override;
  SampledResponse sample_response(std::span<const TokenId> prompt,
                                  double temperature, int max_len,
                                  std::mt19937_64& rng) const override;
  std::vector<double> sequence_logprobs(std::span<const TokenId> prompt,
                                        std::span<const TokenId> response,
                                        double temperature) const override;
  std::vector<double> weighted_logprob_gradient(
      std::span<const TokenId> prompt, std::span<const TokenId> response,
      std::span<const double> weights, double temperature) const override;

 private:
  // Flat parameter layout (offsets in that order):
  //   token embeddings   V x d
  //   position embeddings window x d
  //   hidden weights      h x d, hidden bias h
  //   output weights      V x h, output bias V
  std::size_t tok_off_, pos_off_, w1_off_, b1_off_, w2_off_, b2_off_;

  // Sum over window slots of token-embedding (*) slot-embedding. The
  // elementwise product binds identity to position, so "3+4" and "4+3"
  // produce distinct features even though the window is a bag.
  void context_features(std::span<const TokenId> context, double* x) const;
  void log_probs(std::span<const TokenId> context, double temperature,
                 double* lp, double* x_buf, double* h_buf) const;
  void validate_tokens(std::span<const TokenId> tokens, const char* where) const;

  TinyLmConfig config_;
  std::vector<double> params_;
};

struct ScriptedRule {
  std::string pattern;  // matches any prompt containing it as a substring
  std::string output;
};

// Deterministic policy driven by a rule table: the first rule whose pattern
// occurs in the decoded prompt supplies the emitted text (then the end
// token). Prompts matching no rule fall back to uniform random tokens.
// Emission distributions are smoothed one-hot vectors so log-probabilities
// stay finite everywhere.
class ScriptedPolicy final : public Policy {
 public:
  ScriptedPolicy(const Vocabulary& vocab, std::vector<ScriptedRule> rules,
                 std::optional<std::string> default_output = std::nullopt);

  int vocab_size() const override { return vocab_.size(); }
  std::size_t param_count() const override { return 0; }
  std::span<const double> params() const override { return {}; }
  std::span<double> mutable_params() override { return {}; }
  std::unique_ptr<Policy> clone() const override;

  std::vector<double> next_token_dist(std::span<const TokenId> context,
                                      double temperature) const override;
  SampledResponse sample_response(std::span<const TokenId> prompt,
                                  double temperature, int max_len,
                                  std::mt19937_64& rng) const override;
  std::vector<double> sequence_logprobs(std::span<const TokenId> prompt,
                                        std::span<const TokenId> response,
                                        double temperature) const override;
  std::vector<double> weighted_logprob_gradient(
      std::span<const TokenId> prompt, std::span<const TokenId> response,
      std::span<const double> weights, double temperature) const override;

 private:
  const std::string* lookup(std::span<const TokenId> prompt) const;
  std::vector<TokenId> scripted_tokens(const std::string& output) const;

  Vocabulary vocab_;
  std::vector<ScriptedRule> rules_;
  std::optional<std::string> default_output_;
  double smoothing_ = 1e-6;
};

// Central-difference check of an analytic gradient: perturbs each parameter
// of `policy` by +/-eps, evaluates `f`, and reports the maximum over
// parameters of |analytic - numeric| / max(1e-12, |numeric|). The policy's
// parameters are restored before returning.
double finite_diff_check(Policy& policy, const std::function<double()>& f,
                         std::span<const double> analytic_grad, double eps);

// ---- checkpointing ----

struct CheckpointData {
  TinyLmConfig config;
  std::vector<double> params;
  long trained_steps = 0;
  nlohmann::json run_echo;
};

// Writes a versioned JSON dump of the model: layout config, flat parameter
// vector, vocabulary hash, plus an arbitrary run-configuration echo.
void save_checkpoint(const std::string& path, const TinyLm& model,
                     std::uint64_t vocab_hash, long trained_steps,
                     const nlohmann::json& run_echo);

// Loads and validates a checkpoint. A vocabulary-hash mismatch or a
// malformed file raises ConfigError: parameters indexed by one token
// numbering must never be applied under another.
CheckpointData load_checkpoint_data(const std::string& path,
                                    std::uint64_t expected_vocab_hash);
TinyLm load_checkpoint(const std::string& path,
                       std::uint64_t expected_vocab_hash);

}  // namespace selfref

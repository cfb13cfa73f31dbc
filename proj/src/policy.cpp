// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0

#include "selfref/policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "selfref/errors.hpp"
#include "selfref/rand.hpp"

namespace selfref {

namespace {

void check_temperature(double temperature) {
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("temperature must be positive");
  }
}

// log-softmax of z (length n) written into lp; returns nothing. Stable via
// max subtraction.
void log_softmax(const double* z, int n, double* lp) {
  double zmax = z[0];
  for (int i = 1; i < n; ++i) zmax = std::max(zmax, z[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += std::exp(z[i] - zmax);
  const double lse = zmax + std::log(sum);
  for (int i = 0; i < n; ++i) lp[i] = z[i] - lse;
}

// Inverse-CDF draw from probabilities p (length n) at uniform u in [0,1).
int pick_from(const double* p, int n, double u) {
  double cum = 0.0;
  for (int i = 0; i < n; ++i) {
    cum += p[i];
    if (u < cum) return i;
  }
  // Rounding can leave cum marginally below 1; fall back to the last
  // symbol with positive mass.
  for (int i = n - 1; i >= 0; --i) {
    if (p[i] > 0.0) return i;
  }
  return n - 1;
}

}  // namespace

SampledGroup Policy::sample_group(std::span<const TokenId> prompt, int group_size,
                                  double temperature, int max_len,
                                  std::mt19937_64& rng) const {
  if (group_size < 2) {
    throw std::invalid_argument("sample_group: group_size must be at least 2");
  }
  SampledGroup group;
  group.responses.reserve(static_cast<std::size_t>(group_size));
  group.logprobs.reserve(static_cast<std::size_t>(group_size));
  for (int i = 0; i < group_size; ++i) {
    SampledResponse r = sample_response(prompt, temperature, max_len, rng);
    group.responses.push_back(std::move(r.tokens));
    group.logprobs.push_back(std::move(r.logprobs));
  }
  return group;
}

// ---- TinyLm ----

TinyLm::TinyLm(const TinyLmConfig& config) : config_(config) {
  if (config_.vocab_size < 2) throw std::invalid_argument("TinyLm: vocab_size must be >= 2");
  if (config_.embed_dim < 1 || config_.hidden_dim < 1 || config_.window < 1) {
    throw std::invalid_argument("TinyLm: dimensions must be positive");
  }
  if (config_.end_token < 0 || config_.end_token >= config_.vocab_size) {
    throw std::invalid_argument("TinyLm: end_token out of range");
  }
  const std::size_t v = static_cast<std::size_t>(config_.vocab_size);
  const std::size_t d = static_cast<std::size_t>(config_.embed_dim);
  const std::size_t h = static_cast<std::size_t>(config_.hidden_dim);
  const std::size_t w = static_cast<std::size_t>(config_.window);

  tok_off_ = 0;
  pos_off_ = tok_off_ + v * d;
  w1_off_ = pos_off_ + w * d;
  b1_off_ = w1_off_ + h * d;
  w2_off_ = b1_off_ + h;
  b2_off_ = w2_off_ + v * h;
  params_.assign(b2_off_ + v, 0.0);

  // Embeddings and weight matrices start at small zero-mean values; biases
  // start at zero so a freshly built model is exactly uniform (plus any
  // explicit logit prior).
  auto rng = make_rng(config_.init_seed, RngChannel::PolicyInit);
  for (std::size_t i = tok_off_; i < b1_off_; ++i) {
    params_[i] = config_.init_scale * rand_normal(rng);
  }
  for (std::size_t i = w2_off_; i < b2_off_; ++i) {
    params_[i] = config_.init_scale * rand_normal(rng);
  }
  for (const auto& [token, bias] : config_.logit_bias) {
    if (token < 0 || token >= config_.vocab_size) {
      throw std::invalid_argument("TinyLm: logit_bias token out of range");
    }
    params_[b2_off_ + static_cast<std::size_t>(token)] += bias;
  }
}

std::unique_ptr<Policy> TinyLm::clone() const {
  return std::make_unique<TinyLm>(*this);
}

void TinyLm::validate_tokens(std::span<const TokenId> tokens, const char* where) const {
  for (const TokenId t : tokens) {
    if (t < 0 || t >= config_.vocab_size) {
      throw std::invalid_argument(std::string("TinyLm: token out of range in ") + where);
    }
  }
}

void TinyLm::context_features(std::span<const TokenId> context, double* x) const {
  const int d = config_.embed_dim;
  std::fill(x, x + d, 0.0);
  const int len = static_cast<int>(context.size());
  const int slots = std::min(config_.window, len);
  for (int j = 0; j < slots; ++j) {
    const TokenId tok = context[static_cast<std::size_t>(len - 1 - j)];
    const double* te = params_.data() + tok_off_ + static_cast<std::size_t>(tok) * d;
    const double* pe = params_.data() + pos_off_ + static_cast<std::size_t>(j) * d;
    for (int e = 0; e < d; ++e) x[e] += te[e] * pe[e];
  }
}

void TinyLm::log_probs(std::span<const TokenId> context, double temperature,
                       double* lp, double* x_buf, double* h_buf) const {
  const int d = config_.embed_dim;
  const int h = config_.hidden_dim;
  const int v = config_.vocab_size;

  context_features(context, x_buf);

  const double* w1 = params_.data() + w1_off_;
  const double* b1 = params_.data() + b1_off_;
  for (int r = 0; r < h; ++r) {
    double a = b1[r];
    const double* row = w1 + static_cast<std::size_t>(r) * d;
    for (int e = 0; e < d; ++e) a += row[e] * x_buf[e];
    h_buf[r] = std::tanh(a);
  }

  const double* w2 = params_.data() + w2_off_;
  const double* b2 = params_.data() + b2_off_;
  std::vector<double> z(static_cast<std::size_t>(v));
  for (int i = 0; i < v; ++i) {
    double zi = b2[i];
    const double* row = w2 + static_cast<std::size_t>(i) * h;
    for (int r = 0; r < h; ++r) zi += row[r] * h_buf[r];
    z[static_cast<std::size_t>(i)] = zi / temperature;
  }
  log_softmax(z.data(), v, lp);
}

std::vector<double> TinyLm::next_token_dist(std::span<const TokenId> context,
                                            double temperature) const {
  check_temperature(temperature);
  validate_tokens(context, "next_token_dist");
  const int v = config_.vocab_size;
  std::vector<double> lp(static_cast<std::size_t>(v));
  std::vector<double> x(static_cast<std::size_t>(config_.embed_dim));
  std::vector<double> hbuf(static_cast<std::size_t>(config_.hidden_dim));
  log_probs(context, temperature, lp.data(), x.data(), hbuf.data());
  std::vector<double> probs(static_cast<std::size_t>(v));
  for (int i = 0; i < v; ++i) probs[static_cast<std::size_t>(i)] = std::exp(lp[static_cast<std::size_t>(i)]);
  return probs;
}

SampledResponse TinyLm::sample_response(std::span<const TokenId> prompt,
                                        double temperature, int max_len,
                                        std::mt19937_64& rng) const {
  check_temperature(temperature);
  if (max_len < 1) throw std::invalid_argument("sample_response: max_len must be >= 1");
  validate_tokens(prompt, "sample_response");

  const int v = config_.vocab_size;
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  std::vector<double> lp(static_cast<std::size_t>(v));
  std::vector<double> probs(static_cast<std::size_t>(v));
  std::vector<double> x(static_cast<std::size_t>(config_.embed_dim));
  std::vector<double> hbuf(static_cast<std::size_t>(config_.hidden_dim));

  SampledResponse out;
  for (int t = 0; t < max_len; ++t) {
    log_probs(context, temperature, lp.data(), x.data(), hbuf.data());
    for (int i = 0; i < v; ++i) probs[static_cast<std::size_t>(i)] = std::exp(lp[static_cast<std::size_t>(i)]);
    const int tok = pick_from(probs.data(), v, rand_unit(rng));
    out.tokens.push_back(tok);
    out.logprobs.push_back(lp[static_cast<std::size_t>(tok)]);
    context.push_back(tok);
    if (tok == config_.end_token) break;
  }
  return out;
}

std::vector<double> TinyLm::sequence_logprobs(std::span<const TokenId> prompt,
                                              std::span<const TokenId> response,
                                              double temperature) const {
  check_temperature(temperature);
  validate_tokens(prompt, "sequence_logprobs");
  validate_tokens(response, "sequence_logprobs");

  const int v = config_.vocab_size;
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  context.reserve(prompt.size() + response.size());
  std::vector<double> lp(static_cast<std::size_t>(v));
  std::vector<double> x(static_cast<std::size_t>(config_.embed_dim));
  std::vector<double> hbuf(static_cast<std::size_t>(config_.hidden_dim));

  std::vector<double> out;
  out.reserve(response.size());
  for (const TokenId tok : response) {
    log_probs(context, temperature, lp.data(), x.data(), hbuf.data());
    out.push_back(lp[static_cast<std::size_t>(tok)]);
    context.push_back(tok);
  }
  return out;
}

std::vector<double> TinyLm::weighted_logprob_gradient(
    std::span<const TokenId> prompt, std::span<const TokenId> response,
    std::span<const double> weights, double temperature) const {
  check_temperature(temperature);
  if (weights.size() != response.size()) {
    throw std::invalid_argument("weighted_logprob_gradient: weights size mismatch");
  }
  validate_tokens(prompt, "weighted_logprob_gradient");
  validate_tokens(response, "weighted_logprob_gradient");

  const int d = config_.embed_dim;
  const int h = config_.hidden_dim;
  const int v = config_.vocab_size;

  std::vector<double> grad(params_.size(), 0.0);
  std::vector<TokenId> context(prompt.begin(), prompt.end());
  context.reserve(prompt.size() + response.size());

  std::vector<double> x(static_cast<std::size_t>(d));
  std::vector<double> hbuf(static_cast<std::size_t>(h));
  std::vector<double> lp(static_cast<std::size_t>(v));
  std::vector<double> dz(static_cast<std::size_t>(v));
  std::vector<double> dh(static_cast<std::size_t>(h));
  std::vector<double> dx(static_cast<std::size_t>(d));

  for (std::size_t t = 0; t < response.size(); ++t) {
    const TokenId target = response[t];
    const double w = weights[t];
    if (w != 0.0) {
      log_probs(context, temperature, lp.data(), x.data(), hbuf.data());

      // d(w * lp[target]) / dz_i = w * ((i == target) - p_i) / temperature
      for (int i = 0; i < v; ++i) {
        const double p = std::exp(lp[static_cast<std::size_t>(i)]);
        dz[static_cast<std::size_t>(i)] = w * ((i == target ? 1.0 : 0.0) - p) / temperature;
      }

      double* gw2 = grad.data() + w2_off_;
      double* gb2 = grad.data() + b2_off_;
      const double* w2 = params_.data() + w2_off_;
      std::fill(dh.begin(), dh.end(), 0.0);
      for (int i = 0; i < v; ++i) {
        const double dzi = dz[static_cast<std::size_t>(i)];
        gb2[i] += dzi;
        double* grow = gw2 + static_cast<std::size_t>(i) * h;
        const double* row = w2 + static_cast<std::size_t>(i) * h;
        for (int r = 0; r < h; ++r) {
          grow[r] += dzi * hbuf[static_cast<std::size_t>(r)];
          dh[static_cast<std::size_t>(r)] += dzi * row[r];
        }
      }

      double* gw1 = grad.data() + w1_off_;
      double* gb1 = grad.data() + b1_off_;
      const double* w1 = params_.data() + w1_off_;
      std::fill(dx.begin(), dx.end(), 0.0);
      for (int r = 0; r < h; ++r) {
        const double hr = hbuf[static_cast<std::size_t>(r)];
        const double da = (1.0 - hr * hr) * dh[static_cast<std::size_t>(r)];
        gb1[r] += da;
        double* grow = gw1 + static_cast<std::size_t>(r) * d;
        const double* row = w1 + static_cast<std::size_t>(r) * d;
        for (int e = 0; e < d; ++e) {
          grow[e] += da * x[static_cast<std::size_t>(e)];
          dx[static_cast<std::size_t>(e)] += da * row[e];
        }
      }

      const int len = static_cast<int>(context.size());
      const int slots = std::min(config_.window, len);
      for (int j = 0; j < slots; ++j) {
        const TokenId tok = context[static_cast<std::size_t>(len - 1 - j)];
        double* gte = grad.data() + tok_off_ + static_cast<std::size_t>(tok) * d;
        double* gpe = grad.data() + pos_off_ + static_cast<std::size_t>(j) * d;
        const double* te = params_.data() + tok_off_ + static_cast<std::size_t>(tok) * d;
        const double* pe = params_.data() + pos_off_ + static_cast<std::size_t>(j) * d;
        for (int e = 0; e < d; ++e) {
          gte[e] += dx[static_cast<std::size_t>(e)] * pe[e];
          gpe[e] += dx[static_cast<std::size_t>(e)] * te[e];
        }
      }
    }
    context.push_back(target);
  }
  return grad;
}

// ---- ScriptedPolicy ----

ScriptedPolicy::ScriptedPolicy(const Vocabulary& vocab, std::vector<ScriptedRule> rules,
                               std::optional<std::string> default_output)
    : vocab_(vocab), rules_(std::move(rules)), default_output_(std::move(default_output)) {}

std::unique_ptr<Policy> ScriptedPolicy::clone() const {
  return std::make_unique<ScriptedPolicy>(*this);
}

const std::string* ScriptedPolicy::lookup(std::span<const TokenId> prompt) const {
  const std::string text = vocab_.decode(prompt);
  for (const ScriptedRule& rule : rules_) {
    if (text.find(rule.pattern) != std::string::npos) return &rule.output;
  }
  if (default_output_.has_value()) return &*default_output_;
  return nullptr;
}

std::vector<TokenId> ScriptedPolicy::scripted_tokens(const std::string& output) const {
  std::vector<TokenId> tokens = vocab_.encode(output);
  tokens.push_back(vocab_.end_token());
  return tokens;
}

std::vector<double> ScriptedPolicy::next_token_dist(std::span<const TokenId> /*context*/,
                                                    double temperature) const {
  check_temperature(temperature);
  // Scripted emission is defined through the sampling and scoring paths;
  // as a bare conditional the policy is uniform, which is all the training
  // machinery ever requires of it.
  return std::vector<double>(static_cast<std::size_t>(vocab_.size()),
                             1.0 / vocab_.size());
}

SampledResponse ScriptedPolicy::sample_response(std::span<const TokenId> prompt,
                                                double temperature, int max_len,
                                                std::mt19937_64& rng) const {
  check_temperature(temperature);
  if (max_len < 1) throw std::invalid_argument("sample_response: max_len must be >= 1");

  SampledResponse out;
  const int v = vocab_.size();
  const std::string* output = lookup(prompt);
  if (output == nullptr) {
    const double lp = -std::log(static_cast<double>(v));
    for (int t = 0; t < max_len; ++t) {
      const TokenId tok = static_cast<TokenId>(rand_below(rng, static_cast<std::size_t>(v)));
      out.tokens.push_back(tok);
      out.logprobs.push_back(lp);
      if (tok == vocab_.end_token()) break;
    }
    return out;
  }

  const std::vector<TokenId> tokens = scripted_tokens(*output);
  const double on_script = std::log(1.0 - smoothing_ + smoothing_ / v);
  const std::size_t n = std::min<std::size_t>(tokens.size(), static_cast<std::size_t>(max_len));
  for (std::size_t t = 0; t < n; ++t) {
    out.tokens.push_back(tokens[t]);
    out.logprobs.push_back(on_script);
  }
  return out;
}

std::vector<double> ScriptedPolicy::sequence_logprobs(std::span<const TokenId> prompt,
                                                      std::span<const TokenId> response,
                                                      double temperature) const {
  check_temperature(temperature);
  const int v = vocab_.size();
  const double uniform = -std::log(static_cast<double>(v));
  std::vector<double> out(response.size(), uniform);

  const std::string* output = lookup(prompt);
  if (output == nullptr) return out;

  const std::vector<TokenId> tokens = scripted_tokens(*output);
  const double on_script = std::log(1.0 - smoothing_ + smoothing_ / v);
  const double off_script = std::log(smoothing_ / v);
  for (std::size_t t = 0; t < response.size(); ++t) {
    if (t < tokens.size()) {
      out[t] = (response[t] == tokens[t]) ? on_script : off_script;
    }
  }
  return out;
}

std::vector<double> ScriptedPolicy::weighted_logprob_gradient(
    std::span<const TokenId> /*prompt*/, std::span<const TokenId> response,
    std::span<const double> weights, double /*temperature*/) const {
  if (weights.size() != response.size()) {
    throw std::invalid_argument("weighted_logprob_gradient: weights size mismatch");
  }
  return {};
}

// ---- finite differences ----

double finite_diff_check(Policy& policy, const std::function<double()>& f,
                         std::span<const double> analytic_grad, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
  std::span<double> params = policy.mutable_params();
  if (analytic_grad.size() != params.size()) {
    throw std::invalid_argument("finite_diff_check: gradient size mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + eps;
    const double up = f();
    params[i] = saved - eps;
    const double down = f();
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double rel = std::abs(analytic_grad[i] - numeric) /
                       std::max(1e-12, std::abs(numeric));
    worst = std::max(worst, rel);
  }
  return worst;
}

// ---- checkpointing ----

namespace {
constexpr int kCheckpointVersion = 1;
}

void save_checkpoint(const std::string& path, const TinyLm& model,
                     std::uint64_t vocab_hash, long trained_steps,
                     const nlohmann::json& run_echo) {
  nlohmann::json j;
  j["format_version"] = kCheckpointVersion;
  j["kind"] = "tiny_lm";
  j["vocab_hash"] = to_hex(vocab_hash);
  const TinyLmConfig& c = model.config();
  j["model"] = {{"vocab_size", c.vocab_size}, {"embed_dim", c.embed_dim},
                {"hidden_dim", c.hidden_dim}, {"window", c.window},
                {"end_token", c.end_token}};
  const auto params = model.params();
  j["params"] = std::vector<double>(params.begin(), params.end());
  j["trained_steps"] = trained_steps;
  j["run"] = run_echo;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open checkpoint for writing: " + path);
  out << j.dump() << '\n';
  if (!out) throw DataError("failed writing checkpoint: " + path);
}

CheckpointData load_checkpoint_data(const std::string& path,
                                    std::uint64_t expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint: " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed checkpoint " + path + ": " + e.what());
  }
  try {
    if (j.at("format_version").get<int>() != kCheckpointVersion) {
      throw ConfigError("unsupported checkpoint version in " + path);
    }
    if (j.at("vocab_hash").get<std::string>() != to_hex(expected_vocab_hash)) {
      throw ConfigError("checkpoint " + path + " was written under a different vocabulary");
    }
    CheckpointData data;
    const auto& m = j.at("model");
    data.config.vocab_size = m.at("vocab_size").get<int>();
    data.config.embed_dim = m.at("embed_dim").get<int>();
    data.config.hidden_dim = m.at("hidden_dim").get<int>();
    data.config.window = m.at("window").get<int>();
    data.config.end_token = m.at("end_token").get<TokenId>();
    data.params = j.at("params").get<std::vector<double>>();
    data.trained_steps = j.value("trained_steps", 0L);
    data.run_echo = j.value("run", nlohmann::json::object());
    return data;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid checkpoint " + path + ": " + e.what());
  }
}

TinyLm load_checkpoint(const std::string& path, std::uint64_t expected_vocab_hash) {
  CheckpointData data = load_checkpoint_data(path, expected_vocab_hash);
  TinyLm model(data.config);
  if (data.params.size() != model.param_count()) {
    throw ConfigError("checkpoint " + path + " parameter count mismatch");
  }
  std::copy(data.params.begin(), data.params.end(), model.mutable_params().begin());
  return model;
}

}  // namespace selfref

// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0

#include "selfref/task_data.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "selfref/errors.hpp"
#include "selfref/rand.hpp"
#include "selfref/vocab.hpp"

namespace selfref {

const char* kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Preference: return "preference";
    case TaskKind::Reasoning: return "reasoning";
    case TaskKind::Instruction: return "instruction";
  }
  return "unknown";
}

double MixRatio::weight(TaskKind kind) const {
  switch (kind) {
    case TaskKind::Preference: return preference;
    case TaskKind::Reasoning: return reasoning;
    case TaskKind::Instruction: return instruction;
  }
  return 0.0;
}

MixRatio parse_mix_ratio(const std::string& text) {
  std::array<double, 3> parts{};
  std::size_t start = 0;
  for (int i = 0; i < 3; ++i) {
    const std::size_t colon = text.find(':', start);
    const bool last = (i == 2);
    if (last != (colon == std::string::npos)) {
      throw ConfigError("mix ratio must have exactly three ':'-separated parts: " + text);
    }
    const std::string part = text.substr(start, last ? std::string::npos : colon - start);
    try {
      std::size_t used = 0;
      parts[static_cast<std::size_t>(i)] = std::stod(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw ConfigError("mix ratio part is not a number: '" + part + "'");
    }
    if (parts[static_cast<std::size_t>(i)] < 0.0) {
      throw ConfigError("mix ratio weights must be non-negative: " + text);
    }
    start = colon + 1;
  }
  return MixRatio{parts[0], parts[1], parts[2]};
}

bool CurriculumConfig::allows(TaskKind kind, long step) const {
  if (step >= warmup_steps) return true;
  return std::find(phase1_kinds.begin(), phase1_kinds.end(), kind) != phase1_kinds.end();
}

const std::vector<TaskInstance>& TaskPools::pool(TaskKind kind) const {
  switch (kind) {
    case TaskKind::Preference: return preference;
    case TaskKind::Reasoning: return reasoning;
    case TaskKind::Instruction: return instruction;
  }
  return reasoning;
}

std::vector<TaskInstance>& TaskPools::pool(TaskKind kind) {
  return const_cast<std::vector<TaskInstance>&>(
      static_cast<const TaskPools*>(this)->pool(kind));
}

namespace {

[[noreturn]] void line_error(const std::string& path, std::size_t line,
                             const std::string& what) {
  throw DataError(path + ":" + std::to_string(line) + ": " + what);
}

void check_charset(const std::string& path, std::size_t line,
                   const std::string& field, const std::string& text) {
  const auto bad = Vocabulary::standard().first_invalid_byte(text);
  if (bad.has_value()) {
    std::ostringstream msg;
    msg << "field '" << field << "' has a character outside the task charset at byte "
        << *bad;
    line_error(path, line, msg.str());
  }
}

std::string require_string(const nlohmann::json& record, const char* field,
                           const std::string& path, std::size_t line) {
  const auto it = record.find(field);
  if (it == record.end()) line_error(path, line, std::string("missing field '") + field + "'");
  if (!it->is_string()) line_error(path, line, std::string("field '") + field + "' must be a string");
  return it->get<std::string>();
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

}  // namespace

std::vector<TaskInstance> load_dataset(const std::string& path, TaskKind kind) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset: " + path);

  std::vector<TaskInstance> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (blank(line)) continue;

    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      line_error(path, line_no, std::string("malformed record: ") + e.what());
    }
    if (!record.is_object()) line_error(path, line_no, "record must be an object");

    TaskInstance inst;
    inst.kind = kind;
    inst.prompt = require_string(record, "prompt", path, line_no);
    if (inst.prompt.empty()) line_error(path, line_no, "field 'prompt' is empty");
    check_charset(path, line_no, "prompt", inst.prompt);

    switch (kind) {
      case TaskKind::Reasoning: {
        inst.ground_truth_answer =
            require_string(record, "ground_truth_answer", path, line_no);
        if (inst.ground_truth_answer.empty()) {
          line_error(path, line_no, "field 'ground_truth_answer' is empty");
        }
        check_charset(path, line_no, "ground_truth_answer", inst.ground_truth_answer);
        break;
      }
      case TaskKind::Preference: {
        const auto cit = record.find("candidates");
        if (cit == record.end()) line_error(path, line_no, "missing field 'candidates'");
        if (!cit->is_array() || cit->size() < 2) {
          line_error(path, line_no, "field 'candidates' must be an array of at least 2");
        }
        for (const auto& c : *cit) {
          if (!c.is_string()) line_error(path, line_no, "candidates must be strings");
          inst.candidates.push_back(c.get<std::string>());
          check_charset(path, line_no, "candidates", inst.candidates.back());
        }
        const auto rit = record.find("gt_ranks");
        if (rit == record.end()) line_error(path, line_no, "missing field 'gt_ranks'");
        if (!rit->is_array() || rit->size() != inst.candidates.size()) {
          line_error(path, line_no, "field 'gt_ranks' must match candidates in length");
        }
        const int n = static_cast<int>(inst.candidates.size());
        for (const auto& r : *rit) {
          if (!r.is_number_integer()) line_error(path, line_no, "gt_ranks must be integers");
          const int rank = r.get<int>();
          if (rank < 1 || rank > n) {
            line_error(path, line_no, "gt_ranks values must lie in [1, N]");
          }
          inst.gt_ranks.push_back(rank);
        }
        break;
      }
      case TaskKind::Instruction:
        break;
    }
    out.push_back(std::move(inst));
  }
  return out;
}

std::array<int, 3> apportion_batch(const MixRatio& ratio, long step,
                                   const CurriculumConfig& curriculum,
                                   int batch_size) {
  if (batch_size < 1) throw ConfigError("mix_batch: batch_size must be >= 1");

  std::array<double, 3> weights{};
  double total = 0.0;
  for (std::size_t k = 0; k < kAllKinds.size(); ++k) {
    const TaskKind kind = kAllKinds[k];
    weights[k] = curriculum.allows(kind, step) ? ratio.weight(kind) : 0.0;
    total += weights[k];
  }
  if (total <= 0.0) {
    throw ConfigError("mix_batch: no task kind has positive weight at step " +
                      std::to_string(step));
  }

  // Largest-remainder apportionment; remainder ties go to the earliest kind
  // in P, R, I order so counts are deterministic.
  std::array<int, 3> counts{};
  std::array<double, 3> remainders{};
  int assigned = 0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double quota = static_cast<double>(batch_size) * weights[k] / total;
    counts[k] = static_cast<int>(quota);
    remainders[k] = quota - static_cast<double>(counts[k]);
    assigned += counts[k];
  }
  int leftover = batch_size - assigned;
  while (leftover > 0) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < 3; ++k) {
      if (remainders[k] > remainders[best]) best = k;
    }
    ++counts[best];
    remainders[best] = -1.0;
    --leftover;
  }
  return counts;
}

std::vector<TaskInstance> mix_batch(const TaskPools& pools, const MixRatio& ratio,
                                    long step, const CurriculumConfig& curriculum,
                                    int batch_size, std::mt19937_64& rng) {
  const std::array<int, 3> counts = apportion_batch(ratio, step, curriculum, batch_size);

  std::vector<TaskInstance> batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (std::size_t k = 0; k < kAllKinds.size(); ++k) {
    const TaskKind kind = kAllKinds[k];
    const int want = counts[k];
    if (want == 0) continue;
    const std::vector<TaskInstance>& pool = pools.pool(kind);
    if (pool.empty()) {
      throw DataError(std::string("mix_batch: kind '") + kind_name(kind) +
                      "' has positive weight but an empty pool");
    }
    const auto indices = sample_indices(pool.size(), static_cast<std::size_t>(want), rng);
    for (const std::size_t idx : indices) batch.push_back(pool[idx]);
  }
  return batch;
}

}  // namespace selfref

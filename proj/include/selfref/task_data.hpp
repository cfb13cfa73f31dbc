// Copyright (c) 2026 The selfref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Task instances, dataset files, and batch mixing.
//
// Datasets are line-delimited JSON, one record per line, with fields named
// exactly as in TaskInstance. Text fields are validated against the task
// charset at load time: a character the vocabulary cannot encode is a data
// error naming the offending line, not a silent <unk>.

#pragma once

#include <array>
#include <random>
#include <string>
#include <vector>

namespace selfref {

// Order is part of the contract: mixing ratios are written P:R:I, batches
// are laid out kind-major in this order, and apportionment ties break the
// same way.
enum class TaskKind { Preference = 0, Reasoning = 1, Instruction = 2 };

inline constexpr std::array<TaskKind, 3> kAllKinds = {
    TaskKind::Preference, TaskKind::Reasoning, TaskKind::Instruction};

const char* kind_name(TaskKind kind);

struct TaskInstance {
  TaskKind kind = TaskKind::Reasoning;
  std::string prompt;

  // Reasoning only.
  std::string ground_truth_answer;

  // Preference only. gt_ranks[i] ranks candidates[i]; rank 1 is best and
  // ties are allowed.
  std::vector<std::string> candidates;
  std::vector<int> gt_ranks;
};

struct MixRatio {
  double preference = 0.0;
  double reasoning = 0.0;
  double instruction = 0.0;

  double weight(TaskKind kind) const;
};

// Parses "P:R:I", e.g. "3:1:1". Throws ConfigError on malformed input or
// negative weights.
MixRatio parse_mix_ratio(const std::string& text);

struct CurriculumConfig {
  long warmup_steps = 100;
  // Kinds allowed before warmup_steps elapse. The early phase leans on
  // tasks with externally checkable rewards so the model's judging ability
  // has something to stand on before self-scored data enters the mix.
  std::vector<TaskKind> phase1_kinds = {TaskKind::Reasoning, TaskKind::Preference};

  bool allows(TaskKind kind, long step) const;
};

struct TaskPools {
  std::vector<TaskInstance> preference;
  std::vector<TaskInstance> reasoning;
  std::vector<TaskInstance> instruction;

  const std::vector<TaskInstance>& pool(TaskKind kind) const;
  std::vector<TaskInstance>& pool(TaskKind kind);
};

// Loads one dataset file of the given kind. Malformed JSON, missing or
// ill-typed fields, rank/candidate inconsistencies and charset violations
// raise DataError naming the file and 1-based line number. Blank lines are
// skipped.
std::vector<TaskInstance> load_dataset(const std::string& path, TaskKind kind);

// Exact per-kind counts for one batch: scale the (curriculum-masked)
// weights to batch_size and apportion by largest remainder, breaking ties
// in P, R, I order. Deterministic in its inputs.
std::array<int, 3> apportion_batch(const MixRatio& ratio, long step,
                                   const CurriculumConfig& curriculum,
                                   int batch_size);

// Draws a batch in kind-major order (all preference, then reasoning, then
// instruction). Within a kind, instances are drawn without replacement,
// falling back to replacement when the pool is smaller than its quota.
// Raises ConfigError when every effective weight is zero and DataError when
// a kind with a positive quota has an empty pool.
std::vector<TaskInstance> mix_batch(const TaskPools& pools, const MixRatio& ratio,
                                    long step, const CurriculumConfig& curriculum,
                                    int batch_size, std::mt19937_64& rng);

}  // namespace selfref

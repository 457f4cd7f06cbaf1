// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "kvgate/engine.hpp"
#include "kvgate/memory.hpp"
#include "kvgate/teacher.hpp"
#include "kvgate/training.hpp"

namespace kvgate {

inline constexpr int kConfigVersion = 1;

struct IndexerOverrides {
  std::size_t heads = 0;  // 0 keeps the layout-derived default
  std::size_t dim = 0;
};

struct TrainSection {
  WsdSchedule indexer_schedule;
  double indexer_clip = 1.0;
  WsdSchedule memory_schedule;
  double memory_clip = 1.0;
  bool joint_indexer = true;
  double joint_indexer_lr_scale = 1.0;
};

struct DecodeSection {
  std::size_t steps = 2000;
  std::vector<std::size_t> budgets = {256};
};

struct SweepSection {
  std::vector<PolicyKind> policies = {PolicyKind::kRandom, PolicyKind::kKnorm,
                                      PolicyKind::kSnapKv, PolicyKind::kTova,
                                      PolicyKind::kIndexer};
  std::vector<double> ratios = {0.0, 0.10, 0.25, 0.50, 0.75, 0.90};
  std::size_t recall_sequences = 50;
};

/// Fully resolved experiment description. Every field has a default; the
/// JSON form may omit any section but may not add unknown keys.
struct ExperimentConfig {
  std::uint64_t seed = 1;
  TeacherConfig teacher;
  IndexerOverrides indexer;
  MemoryConfig memory;
  EvictionConfig eviction;
  TrainSection train;
  DataConfig data;
  DecodeSection decode;
  SweepSection sweep;

  IndexerShape indexer_shape() const;
  void validate() const;
};

/// Parses and validates; throws ConfigError with a precise message.
ExperimentConfig parse_config(std::string_view json_text);
/// Reads a file (IoError when unreadable) and parses it.
ExperimentConfig load_config(const std::string& path);

/// Canonical JSON (sorted keys, every field present).
std::string canonical_json(const ExperimentConfig& config);
/// FNV-1a 64 of the canonical JSON, as 16 lowercase hex digits.
std::string config_hash(const ExperimentConfig& config);

}  // namespace kvgate

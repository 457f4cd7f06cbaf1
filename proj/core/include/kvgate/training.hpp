// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "kvgate/engine.hpp"
#include "kvgate/indexer.hpp"
#include "kvgate/memory.hpp"
#include "kvgate/planted.hpp"
#include "kvgate/teacher.hpp"

namespace kvgate {

/// Warmup-stable-decay learning rate: linear ramp to the peak, a plateau,
/// then a linear ramp down to the final rate.
struct WsdSchedule {
  double peak_lr = 1e-3;
  double final_lr = 7.5e-6;
  std::size_t warmup = 100;
  std::size_t stable = 2000;
  std::size_t decay = 2000;

  std::size_t total_steps() const { return warmup + stable + decay; }
  /// Rate for 0-based step index.
  double lr(std::size_t step) const;
  void validate() const;
};

/// Global L2 norm over a set of gradient tensors.
double global_norm(const std::vector<std::span<const double>>& grads);

/// p -= lr * scale * g with scale = min(1, max_norm / ||g||). Returns ||g||.
double clipped_sgd_step(const std::vector<std::span<double>>& params,
                        const std::vector<std::span<const double>>& grads, double lr,
                        double max_norm);

/// Synthetic sequences: a planted-retrieval prompt followed by isotropic
/// continuation rows.
struct DataConfig {
  std::size_t train_sequences = 64;
  std::size_t eval_sequences = 32;
  std::size_t prompt_len = 128;
  std::size_t continuation = 32;
  PlantedConfig planted;  // planted.length is forced to prompt_len
  std::uint64_t seed = 11;

  void validate() const;
};

enum class DataSplit : std::uint64_t { kTrain = 1, kEval = 2, kRecall = 3 };

struct Sequence {
  Matrix x0;                         // prompt_len + continuation rows
  std::vector<std::size_t> needles;  // planted positions inside the prompt
};

Sequence make_sequence(const TeacherModel& teacher, const DataConfig& data, DataSplit split,
                       std::size_t index);

/// Per-step record of a training run.
struct TrainCurve {
  std::vector<double> loss;
  std::vector<double> lr;
  std::vector<double> grad_norm;
  std::vector<double> aux;  // joint indexer loss during memory training
};

/// Cached indexer training inputs for one (sequence, layer).
struct IndexerSample {
  Matrix x;
  Matrix q_pre;
  Vector teacher_imp;
};

/// Prompt-only samples for every layer of every sequence: [sequence][layer].
std::vector<std::vector<IndexerSample>> make_indexer_samples(const TeacherModel& teacher,
                                                             const std::vector<Sequence>& data,
                                                             std::size_t prompt_len);

struct IndexerTrainOptions {
  WsdSchedule schedule;
  std::size_t sink_count = 4;
  double clip = 1.0;
};

/// Plain clipped SGD on the pooled KL, one sequence per step (cycling), all
/// layers updated together under one global clip. Throws DivergenceError on a
/// non-finite loss.
TrainCurve train_indexer(std::vector<IndexerParams>& params,
                         const std::vector<std::vector<IndexerSample>>& samples,
                         const IndexerTrainOptions& options);

/// Mean pooled KL over all layers and the given samples.
double mean_indexer_loss(const std::vector<IndexerParams>& params,
                         const std::vector<std::vector<IndexerSample>>& samples,
                         std::size_t sink_count);

struct MemoryTrainOptions {
  WsdSchedule schedule;
  MemoryConfig memory;
  EvictionConfig eviction;  // decides which prompt rows are written
  bool train_indexer = true;
  double joint_indexer_lr_scale = 1.0;
  double clip = 1.0;
};

/// Traces and indexer samples for one training sequence.
struct MemorySample {
  std::vector<LayerTrace> traces;
  std::vector<IndexerSample> indexer;
};

std::vector<MemorySample> make_memory_samples(const TeacherModel& teacher,
                                              const std::vector<Sequence>& data,
                                              std::size_t prompt_len);

/// Per-layer memory episodes for one sequence under the current eviction.
std::vector<MemoryEpisode> build_episodes(const std::vector<LayerTrace>& traces,
                                          std::size_t prompt_len, const HeadLayout& layout,
                                          const EvictionConfig& eviction,
                                          const std::vector<IndexerParams>* indexer,
                                          ValueAggregation values, std::uint64_t seed);

/// Stage two: memory slow weights trained on the reconstruction loss, with
/// optional joint indexer KL steps on the same sequence.
TrainCurve train_memory(std::vector<MemorySlowWeights>& memory,
                        std::vector<IndexerParams>& indexer,
                        const std::vector<MemorySample>& samples, std::size_t prompt_len,
                        const HeadLayout& layout, const MemoryTrainOptions& options);

}  // namespace kvgate

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kvgate/tensor.hpp"
#include "kvgate/teacher.hpp"

namespace kvgate {

/// Synthetic retrieval stress test: a block of tail rows issues strong,
/// mutually aligned queries, and a few needle rows carry keys pointing at
/// those queries. Everything else is isotropic noise.
struct PlantedConfig {
  std::size_t length = 128;
  std::size_t needles = 4;
  std::size_t tail = 16;           // w_query_tail
  double needle_cosine = 0.95;     // key-space cosine to the pooled tail query
  double tail_noise = 0.3;
  std::size_t sink_count = 4;      // needles avoid sinks
  std::size_t local_window = 32;   // and the protected recent window

  void validate() const;
  /// Half-open range of positions eligible for needles.
  std::size_t needle_begin() const { return sink_count; }
  std::size_t needle_end() const;
};

struct PlantedSample {
  Matrix x0;
  std::vector<std::size_t> needles;  // ascending
};

/// Distinct needle positions drawn uniformly from the eligible range.
std::vector<std::size_t> draw_needle_positions(const PlantedConfig& config, Rng& rng);

/// Builds X0 for layer 0 of `teacher` with needles at the given positions.
/// Throws std::invalid_argument when a needle overlaps the query tail.
PlantedSample planted_retrieval(const TeacherModel& teacher, const PlantedConfig& config,
                                std::span<const std::size_t> needle_positions, Rng& rng);

/// Draws positions, then builds the sample.
PlantedSample planted_sample(const TeacherModel& teacher, const PlantedConfig& config, Rng& rng);

/// Fraction of needles present among kept positions; 1 when there are none.
double retention_recall(std::span<const std::size_t> needles,
                        std::span<const std::size_t> kept_positions);

}  // namespace kvgate

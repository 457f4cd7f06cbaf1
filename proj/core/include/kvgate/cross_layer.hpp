// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "kvgate/numeric.hpp"
#include "kvgate/tensor.hpp"

namespace kvgate {

enum class AggregationMode { kNone, kLayerMean, kEntSkipHigh, kEntSkipLow };

AggregationMode parse_aggregation(std::string_view name);
std::string_view to_string(AggregationMode mode);

/// One score vector per layer, all of the same length.
struct LayerScoreBundle {
  std::vector<Vector> scores;

  std::size_t n_layers() const { return scores.size(); }
  std::size_t length() const { return scores.empty() ? 0 : scores.front().size(); }
  void validate() const;
};

/// Normalised entropy of each layer's score distribution.
Vector layer_entropies(const LayerScoreBundle& bundle, const ProbMapping& mapping);

/// Element-wise mean over layers.
Vector running_mean(const LayerScoreBundle& bundle);

/// The recurrence mean_m = mean_{m-1} + (s_m - mean_{m-1}) / m, one layer at a time.
class RunningMean {
 public:
  void add(std::span<const double> scores);
  std::size_t count() const { return count_; }
  const Vector& mean() const { return mean_; }

 private:
  Vector mean_;
  std::size_t count_ = 0;
};

enum class EntropyDirection { kSkipHigh, kSkipLow };

struct GatedMean {
  Vector scores;
  std::vector<char> included;  // per layer
  bool fallback = false;       // no layer qualified; scores is running_mean
};

/// sum_l a_l s_l / sum_l a_l with a_l = [H_l <= gamma] (skip high)
/// or [H_l >= gamma] (skip low). Falls back to running_mean when no layer
/// qualifies.
GatedMean entropy_gated_mean(const LayerScoreBundle& bundle, double gamma,
                             const ProbMapping& mapping, EntropyDirection direction);

/// Aggregated scores for a mode; kNone is rejected (there is nothing to share).
Vector aggregate_scores(const LayerScoreBundle& bundle, AggregationMode mode, double gamma,
                        const ProbMapping& mapping);

/// Layer l reads scores from layer floor(l / group_size) * group_size.
std::vector<std::size_t> index_reuse_plan(std::size_t n_layers, std::size_t group_size);

/// Pairwise Jaccard similarity of per-layer keep sets.
Matrix overlap_metric(const std::vector<std::vector<std::size_t>>& keep_sets);

/// Mean Jaccard of layers (l, l+1); 1 for fewer than two layers.
double adjacent_overlap(const Matrix& jaccard);

}  // namespace kvgate

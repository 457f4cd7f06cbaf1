// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "kvgate/tensor.hpp"
#include "kvgate/teacher.hpp"

namespace kvgate {

inline constexpr std::size_t kUnlimitedBudget = std::numeric_limits<std::size_t>::max();

/// When and how hard to compress.
struct CompressionPlan {
  double ratio = 0.0;                  // evicted fraction of candidate rows at prefill
  std::size_t interval = 128;          // decode compression period (tokens)
  std::size_t budget = kUnlimitedBudget;  // decode-time cap on retained rows, sinks and window included
  std::size_t sink_count = 4;
  std::size_t local_window = 32;

  void validate() const;
};

/// A row removed from a layer cache, in original sequence order.
struct EvictedRow {
  std::size_t position = 0;
  Vector key;    // all kv heads, head-major
  Vector value;
};

/// Keys and values of one layer. Every kv head shares one position set, so a
/// row holds the concatenation of all kv heads.
class LayerCache {
 public:
  LayerCache() = default;
  LayerCache(const HeadLayout& layout, std::size_t sink_count, std::size_t local_window);

  /// Appends rows; positions must continue the strictly increasing sequence.
  void append(const Matrix& keys, const Matrix& values, std::span<const std::size_t> positions);
  void append_row(std::span<const double> key, std::span<const double> value,
                  std::size_t position);

  /// Keeps the given row indices (ascending, unique). Sink rows and the
  /// `local_window` most recent rows must be present. Returns evicted rows.
  std::vector<EvictedRow> compact(std::span<const std::size_t> keep_rows);

  std::size_t size() const { return positions_.size(); }
  bool empty() const { return positions_.empty(); }
  const std::vector<std::size_t>& positions() const { return positions_; }
  const Matrix& keys() const { return keys_; }
  const Matrix& values() const { return values_; }
  std::span<const double> key(std::size_t row, std::size_t kv_head) const;
  std::span<const double> value(std::size_t row, std::size_t kv_head) const;
  const HeadLayout& layout() const { return layout_; }
  std::size_t sink_count() const { return sink_count_; }
  std::size_t local_window() const { return local_window_; }

  /// Row indices that may never be evicted: sinks plus the recent window.
  std::vector<std::size_t> forced_rows() const;
  /// Bytes held by keys and values at 8 bytes per element.
  std::size_t bytes() const;

 private:
  HeadLayout layout_;
  std::size_t sink_count_ = 0;
  std::size_t local_window_ = 0;
  Matrix keys_;
  Matrix values_;
  std::vector<std::size_t> positions_;
};

/// Per-layer caches for a whole model.
class KvCache {
 public:
  KvCache() = default;
  KvCache(std::size_t n_layers, const HeadLayout& layout, std::size_t sink_count,
          std::size_t local_window);

  LayerCache& layer(std::size_t l) { return layers_.at(l); }
  const LayerCache& layer(std::size_t l) const { return layers_.at(l); }
  std::size_t n_layers() const { return layers_.size(); }

  void append(std::size_t l, const Matrix& keys, const Matrix& values,
              std::span<const std::size_t> positions) {
    layer(l).append(keys, values, positions);
  }
  std::vector<EvictedRow> compact(std::size_t l, std::span<const std::size_t> keep_rows) {
    return layer(l).compact(keep_rows);
  }
  std::size_t bytes() const;

 private:
  std::vector<LayerCache> layers_;
};

/// ceil((1 - ratio) * candidates), robust to representation error in ratio.
std::size_t ratio_keep_count(std::size_t candidates, double ratio);

/// Forced rows (sinks, recent window) united with the top `keep_candidates`
/// of the remaining rows by score. Ascending row indices.
std::vector<std::size_t> select_keep(std::span<const double> scores,
                                     std::span<const std::size_t> positions,
                                     std::size_t sink_count, std::size_t local_window,
                                     std::size_t keep_candidates);

/// Prefill selection: ceil((1-r) * candidates) rows on top of the forced set.
std::vector<std::size_t> select_by_ratio(std::span<const double> scores,
                                         std::span<const std::size_t> positions,
                                         const CompressionPlan& plan);

/// Decode selection: at most plan.budget rows in total (forced rows included).
std::vector<std::size_t> select_by_budget(std::span<const double> scores,
                                          std::span<const std::size_t> positions,
                                          const CompressionPlan& plan);

/// One-shot compression after prefill.
std::vector<EvictedRow> prefill_compress(LayerCache& cache, const CompressionPlan& plan,
                                         std::span<const double> scores);

using RowScorer = std::function<Vector(const LayerCache&)>;
using EvictionSink = std::function<void(std::vector<EvictedRow>&&)>;

/// Compaction half of the decode schedule: when step_index is a multiple of
/// the interval and the cache exceeds the budget, scores, keeps the budget
/// and hands evicted rows to `sink`. Returns true when a compaction happened.
bool maybe_compress(LayerCache& cache, std::size_t step_index, const CompressionPlan& plan,
                    const RowScorer& scorer, const EvictionSink& sink);

/// Appends one decoded token. When step_index is a multiple of the interval
/// and the cache exceeds the budget, scores the cache, keeps the budget and
/// hands evicted rows to `sink`. Returns true when a compaction happened.
bool decode_schedule_step(LayerCache& cache, std::span<const double> key,
                          std::span<const double> value, std::size_t position,
                          std::size_t step_index, const CompressionPlan& plan,
                          const RowScorer& scorer, const EvictionSink& sink);

}  // namespace kvgate

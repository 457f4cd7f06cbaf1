// SPDX-License-Identifier: Apache-2.0
#include "kvgate/kv_cache.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "kvgate/numeric.hpp"

namespace kvgate {

void CompressionPlan::validate() const {
  if (!(ratio >= 0.0 && ratio <= 1.0)) {
    throw std::invalid_argument("plan: ratio must lie in [0, 1]");
  }
  if (interval == 0) throw std::invalid_argument("plan: interval must be positive");
  if (budget < sink_count + local_window) {
    throw std::invalid_argument("plan: budget must cover sinks and the local window");
  }
}

LayerCache::LayerCache(const HeadLayout& layout, std::size_t sink_count,
                       std::size_t local_window)
    : layout_(layout),
      sink_count_(sink_count),
      local_window_(local_window),
      keys_(0, layout.kv_width()),
      values_(0, layout.kv_width()) {}

void LayerCache::append(const Matrix& keys, const Matrix& values,
                        std::span<const std::size_t> positions) {
  if (keys.rows() != positions.size() || values.rows() != positions.size()) {
    throw std::invalid_argument("append: row count mismatch");
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    append_row(keys.row(i), values.row(i), positions[i]);
  }
}

void LayerCache::append_row(std::span<const double> key, std::span<const double> value,
                            std::size_t position) {
  if (key.size() != layout_.kv_width() || value.size() != layout_.kv_width()) {
    throw std::invalid_argument("append: row width mismatch");
  }
  if (!positions_.empty() && position <= positions_.back()) {
    throw std::invalid_argument("append: non-monotone position " + std::to_string(position));
  }
  keys_.append_row(key);
  values_.append_row(value);
  positions_.push_back(position);
}

std::span<const double> LayerCache::key(std::size_t row, std::size_t kv_head) const {
  return keys_.row(row).subspan(kv_head * layout_.d_head, layout_.d_head);
}

std::span<const double> LayerCache::value(std::size_t row, std::size_t kv_head) const {
  return values_.row(row).subspan(kv_head * layout_.d_head, layout_.d_head);
}

std::vector<std::size_t> LayerCache::forced_rows() const {
  std::vector<std::size_t> rows;
  const std::size_t n = size();
  const std::size_t window_start = n > local_window_ ? n - local_window_ : 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positions_[i] < sink_count_ || i >= window_start) rows.push_back(i);
  }
  return rows;
}

std::vector<EvictedRow> LayerCache::compact(std::span<const std::size_t> keep_rows) {
  const std::size_t n = size();
  std::vector<char> keep(n, 0);
  for (std::size_t i = 0; i < keep_rows.size(); ++i) {
    if (keep_rows[i] >= n) throw std::out_of_range("compact: row index out of range");
    if (i > 0 && keep_rows[i] <= keep_rows[i - 1]) {
      throw std::invalid_argument("compact: keep indices must be strictly ascending");
    }
    keep[keep_rows[i]] = 1;
  }
  const std::size_t window_start = n > local_window_ ? n - local_window_ : 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (keep[i]) continue;
    if (positions_[i] < sink_count_) throw std::invalid_argument("sink eviction forbidden");
    if (i >= window_start) throw std::invalid_argument("local window eviction forbidden");
  }
  std::vector<EvictedRow> evicted;
  Matrix new_keys(0, layout_.kv_width());
  Matrix new_values(0, layout_.kv_width());
  std::vector<std::size_t> new_positions;
  new_positions.reserve(keep_rows.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (keep[i]) {
      new_keys.append_row(keys_.row(i));
      new_values.append_row(values_.row(i));
      new_positions.push_back(positions_[i]);
    } else {
      EvictedRow row;
      row.position = positions_[i];
      row.key.assign(keys_.row(i).begin(), keys_.row(i).end());
      row.value.assign(values_.row(i).begin(), values_.row(i).end());
      evicted.push_back(std::move(row));
    }
  }
  keys_ = std::move(new_keys);
  values_ = std::move(new_values);
  positions_ = std::move(new_positions);
  return evicted;
}

std::size_t LayerCache::bytes() const {
  return 2 * size() * layout_.kv_width() * sizeof(double);
}

KvCache::KvCache(std::size_t n_layers, const HeadLayout& layout, std::size_t sink_count,
                 std::size_t local_window)
    : layers_(n_layers, LayerCache(layout, sink_count, local_window)) {}

std::size_t KvCache::bytes() const {
  std::size_t total = 0;
  for (const LayerCache& l : layers_) total += l.bytes();
  return total;
}

std::size_t ratio_keep_count(std::size_t candidates, double ratio) {
  const double raw = (1.0 - ratio) * static_cast<double>(candidates);
  const double kept = std::ceil(raw - 1e-9);
  return std::min(candidates, static_cast<std::size_t>(std::max(0.0, kept)));
}

std::vector<std::size_t> select_keep(std::span<const double> scores,
                                     std::span<const std::size_t> positions,
                                     std::size_t sink_count, std::size_t local_window,
                                     std::size_t keep_candidates) {
  const std::size_t n = scores.size();
  if (positions.size() != n) throw std::invalid_argument("select: scores/positions mismatch");
  const std::size_t window_start = n > local_window ? n - local_window : 0;
  std::vector<char> forced(n, 0);
  std::vector<std::size_t> candidates;
  Vector candidate_scores;
  for (std::size_t i = 0; i < n; ++i) {
    if (positions[i] < sink_count || i >= window_start) {
      forced[i] = 1;
    } else {
      if (!std::isfinite(scores[i])) throw std::invalid_argument("select: non-finite score");
      candidates.push_back(i);
      candidate_scores.push_back(scores[i]);
    }
  }
  const std::size_t k = std::min(keep_candidates, candidates.size());
  for (std::size_t c : topk_indices(candidate_scores, k)) forced[candidates[c]] = 1;
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i) {
    if (forced[i]) keep.push_back(i);
  }
  return keep;
}

namespace {

std::size_t count_forced(std::span<const std::size_t> positions, std::size_t sink_count,
                         std::size_t local_window) {
  const std::size_t n = positions.size();
  const std::size_t window_start = n > local_window ? n - local_window : 0;
  std::size_t forced = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positions[i] < sink_count || i >= window_start) ++forced;
  }
  return forced;
}

}  // namespace

std::vector<std::size_t> select_by_ratio(std::span<const double> scores,
                                         std::span<const std::size_t> positions,
                                         const CompressionPlan& plan) {
  const std::size_t forced = count_forced(positions, plan.sink_count, plan.local_window);
  const std::size_t candidates = positions.size() - forced;
  return select_keep(scores, positions, plan.sink_count, plan.local_window,
                     ratio_keep_count(candidates, plan.ratio));
}

std::vector<std::size_t> select_by_budget(std::span<const double> scores,
                                          std::span<const std::size_t> positions,
                                          const CompressionPlan& plan) {
  const std::size_t forced = count_forced(positions, plan.sink_count, plan.local_window);
  const std::size_t room = plan.budget > forced ? plan.budget - forced : 0;
  return select_keep(scores, positions, plan.sink_count, plan.local_window, room);
}

std::vector<EvictedRow> prefill_compress(LayerCache& cache, const CompressionPlan& plan,
                                         std::span<const double> scores) {
  if (scores.size() != cache.size()) {
    throw std::invalid_argument("prefill_compress: one score per cached row required");
  }
  const auto keep = select_by_ratio(scores, cache.positions(), plan);
  return cache.compact(keep);
}

bool maybe_compress(LayerCache& cache, std::size_t step_index, const CompressionPlan& plan,
                    const RowScorer& scorer, const EvictionSink& sink) {
  if (plan.interval == 0) throw std::invalid_argument("decode schedule: interval must be positive");
  if (step_index % plan.interval != 0 || cache.size() <= plan.budget) return false;
  const Vector scores = scorer(cache);
  if (scores.size() != cache.size()) {
    throw std::invalid_argument("decode schedule: scorer returned wrong length");
  }
  const auto keep = select_by_budget(scores, cache.positions(), plan);
  auto evicted = cache.compact(keep);
  if (sink) sink(std::move(evicted));
  return true;
}

bool decode_schedule_step(LayerCache& cache, std::span<const double> key,
                          std::span<const double> value, std::size_t position,
                          std::size_t step_index, const CompressionPlan& plan,
                          const RowScorer& scorer, const EvictionSink& sink) {
  cache.append_row(key, value, position);
  return maybe_compress(cache, step_index, plan, scorer, sink);
}

}  // namespace kvgate

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kvgate/kv_cache.hpp"
#include "kvgate/tensor.hpp"
#include "kvgate/teacher.hpp"

namespace kvgate {

enum class PolicyKind { kSnapKv, kKnorm, kTova, kIndexer, kRandom };

/// How query heads sharing a kv head are pooled in attention-based scores.
enum class HeadPooling { kMean, kMax };

struct PolicySpec {
  PolicyKind kind = PolicyKind::kIndexer;
  std::size_t window = 8;      // SnapKV observation window
  std::uint64_t seed = 0;      // random policy
  HeadPooling pooling = HeadPooling::kMean;

  void validate() const;
};

PolicyKind parse_policy(std::string_view name);
std::string_view to_string(PolicyKind kind);
HeadPooling parse_pooling(std::string_view name);

/// Recent queries (post-RoPE, head-major) with their sequence positions.
struct QueryWindow {
  Matrix q;
  std::vector<std::size_t> positions;
};

/// Per kv head SnapKV score: mean over the window queries (and over the query
/// heads of the group) of causal softmax attention on each key. H_kv x L.
Matrix score_snapkv_heads(const QueryWindow& queries, const Matrix& keys,
                          std::span<const std::size_t> key_positions, const HeadLayout& layout,
                          HeadPooling pooling = HeadPooling::kMean);

/// Euclidean key norm per kv head. H_kv x L.
Matrix score_knorm_heads(const Matrix& keys, const HeadLayout& layout);

/// Sum of per-head scores: the per-layer score used for selection.
Vector sum_heads(const Matrix& per_head);

/// Per-layer SnapKV over the last `window` rows of `queries`.
Vector score_snapkv(const QueryWindow& queries, std::size_t window, const Matrix& keys,
                    std::span<const std::size_t> key_positions, const HeadLayout& layout,
                    HeadPooling pooling = HeadPooling::kMean);
Vector score_knorm(const Matrix& keys, const HeadLayout& layout);
/// Attention row of the single most recent query, averaged over all heads.
/// Per kv head it equals score_snapkv_heads with a one-query window.
Vector score_tova(const QueryWindow& queries, const Matrix& keys,
                  std::span<const std::size_t> key_positions, const HeadLayout& layout);
Vector score_random(std::size_t n, Rng& rng);

/// Alias kept for readability at call sites: forced rows plus top-`target`.
inline std::vector<std::size_t> select(const CompressionPlan& plan, std::span<const double> scores,
                                       std::span<const std::size_t> positions,
                                       std::size_t target) {
  return select_keep(scores, positions, plan.sink_count, plan.local_window, target);
}

}  // namespace kvgate

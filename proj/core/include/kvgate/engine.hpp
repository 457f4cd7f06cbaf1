// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "kvgate/cross_layer.hpp"
#include "kvgate/indexer.hpp"
#include "kvgate/kv_cache.hpp"
#include "kvgate/memory.hpp"
#include "kvgate/policies.hpp"
#include "kvgate/teacher.hpp"

namespace kvgate {

/// Everything that decides which rows survive a compression event.
struct EvictionConfig {
  PolicySpec policy;
  CompressionPlan plan;
  AggregationMode aggregation = AggregationMode::kNone;
  double gamma = 1.0;
  ProbMapping prob;
  std::size_t reuse_group = 1;  // 1 disables score reuse

  void validate() const;
};

/// Per-layer keep sets produced by one compression event.
struct KeepPlan {
  std::vector<std::vector<std::size_t>> keep;  // row indices per layer, ascending
  std::vector<Vector> scores;                  // score vector used by each layer
  std::size_t score_evaluations = 0;           // policy scoring calls
  bool aggregation_fallback = false;
};

/// Scores every row of layer l's current candidate set.
using LayerScoreFn = std::function<Vector(std::size_t layer)>;
/// Turns a layer's scores into a keep set (ratio or budget selection).
using LayerSelectFn = std::function<std::vector<std::size_t>(std::size_t layer, const Vector&)>;

/// Applies aggregation and index reuse around per-layer scoring. Reused layers
/// copy the keep set of their source; with aggregation every layer shares one
/// keep set computed from the (source-layer) score bundle.
KeepPlan plan_keep_sets(std::size_t n_layers, const EvictionConfig& config,
                        const LayerScoreFn& score, const LayerSelectFn& select);

/// Policy scores over the first `prompt_len` rows of a layer trace, with all
/// prompt rows as the query set. `indexer` is required for the indexer policy.
Vector prefill_scores(const LayerTrace& trace, std::size_t prompt_len, const HeadLayout& layout,
                      const PolicySpec& policy, const IndexerParams* indexer, Rng& rng);

/// Keep sets for a prefill of `prompt_len` rows compressed at plan.ratio.
KeepPlan prefill_keep_plan(const std::vector<LayerTrace>& traces, std::size_t prompt_len,
                           const HeadLayout& layout, const EvictionConfig& config,
                           const std::vector<IndexerParams>* indexer, Rng& rng);

/// Pre-eviction path: indexer keep set from (X, Q_pre) alone, then only kept
/// rows enter the cache; evicted rows are produced once for the memory.
LayerCache pre_evict_layer(const TeacherModel& teacher, std::size_t layer, const Matrix& x,
                           const IndexerParams& params, const CompressionPlan& plan,
                           std::vector<EvictedRow>* evicted);

/// Post-hoc path with the same keep set: materialise everything, then compact.
LayerCache compact_layer(const TeacherModel& teacher, std::size_t layer, const Matrix& x,
                         std::span<const std::size_t> keep_rows, const CompressionPlan& plan,
                         std::vector<EvictedRow>* evicted);

/// Builds the memory episode of one layer: one write of the evicted prompt
/// rows, then a read for every continuation row s >= prompt_len whose
/// residual is o_full(s) minus attention over kept prompt rows and
/// continuation rows up to s.
MemoryEpisode build_episode(const LayerTrace& trace, std::size_t prompt_len,
                            std::span<const std::size_t> keep_rows, const HeadLayout& layout,
                            ValueAggregation values);

/// KL(softmax(teacher pooled) || softmax(policy scores)) over non-sink rows.
double policy_kl(const LayerTrace& trace, std::size_t prompt_len, const HeadLayout& layout,
                 std::span<const double> policy_scores, std::size_t sink_count);

/// Byte counts for one configuration of caches and memories.
struct MemoryAccounting {
  std::size_t kv_bytes = 0;
  std::size_t indexer_key_bytes = 0;
  std::size_t memory_bytes = 0;
  std::size_t total() const { return kv_bytes + indexer_key_bytes + memory_bytes; }
};

struct DecodeStepRecord {
  std::size_t step = 0;       // 1-based decode step
  std::size_t kept = 0;       // retained rows (layer 0)
  bool compressed = false;
  std::size_t evicted_total = 0;
  double error = 0.0;         // mean squared difference to the reference hidden state
};

/// Incremental inference over a compressed cache with optional memory fusion.
class DecodeSession {
 public:
  DecodeSession(const TeacherModel& teacher, const EvictionConfig& config,
                const std::vector<IndexerParams>* indexer,
                const std::vector<MemorySlowWeights>* memory, const MemoryConfig& memory_config,
                bool compress);

  /// Full-attention prefill of the prompt, then compression down to the
  /// budget. Returns final hidden states of the prompt rows.
  Matrix prefill(const Matrix& x0);
  /// One token through every layer; compression runs after the whole step.
  Vector step(std::span<const double> x0_row);

  std::size_t position() const { return position_; }
  std::size_t steps() const { return steps_; }
  std::size_t kept() const;
  std::size_t evicted_total() const { return evicted_total_; }
  bool last_step_compressed() const { return last_compressed_; }
  std::size_t score_evaluations() const { return score_evaluations_; }
  const KvCache& cache() const { return cache_; }
  const MemoryState* memory_state(std::size_t layer) const;
  MemoryAccounting accounting() const;

 private:
  struct IntervalQueries {
    QueryWindow post_rope;
    Matrix x;
    Matrix q_pre;
  };

  void compress();
  Vector layer_scores(std::size_t layer);
  void route_evicted(std::size_t layer, std::vector<EvictedRow>&& rows);

  const TeacherModel& teacher_;
  EvictionConfig config_;
  const std::vector<IndexerParams>* indexer_;
  const std::vector<MemorySlowWeights>* memory_;
  MemoryConfig memory_config_;
  bool compress_;
  HeadLayout layout_;
  KvCache cache_;
  std::vector<IndexerKeyCache> index_keys_;
  std::vector<IntervalQueries> interval_;
  std::vector<MemoryState> states_;
  std::vector<std::size_t> writes_;
  std::size_t position_ = 0;
  std::size_t steps_ = 0;
  std::size_t evicted_total_ = 0;
  std::size_t score_evaluations_ = 0;
  bool last_compressed_ = false;
  Rng rng_;
};

/// Runs a reference session without compression that feeds itself
/// rmsnorm(final hidden) as the next input, and a compressed session fed the
/// same inputs. One record per decode step.
std::vector<DecodeStepRecord> simulate_decode(const TeacherModel& teacher, const Matrix& prompt,
                                              std::size_t steps, const EvictionConfig& config,
                                              const std::vector<IndexerParams>* indexer,
                                              const std::vector<MemorySlowWeights>* memory,
                                              const MemoryConfig& memory_config,
                                              MemoryAccounting* final_accounting = nullptr);

}  // namespace kvgate

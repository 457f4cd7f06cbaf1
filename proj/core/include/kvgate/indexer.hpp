// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "kvgate/kv_cache.hpp"
#include "kvgate/tensor.hpp"
#include "kvgate/teacher.hpp"

namespace kvgate {

/// Dimensions of a learned importance scorer attached to one backbone layer.
struct IndexerShape {
  std::size_t d_model = 64;
  std::size_t query_width = 64;  // H * d_head of the backbone
  std::size_t heads = 2;         // H_index
  std::size_t dim = 1;           // d_index

  /// H_index = H/4 and d_index = d_head/8, floored at 1, unless overridden (non-zero).
  static IndexerShape for_layout(const HeadLayout& layout, std::size_t heads_override = 0,
                                 std::size_t dim_override = 0);
  double gate_scale() const;
};

/// Slow weights of the scorer. All maps are (out x in).
struct IndexerParams {
  IndexerShape shape;
  Matrix u_q;  // (heads*dim) x query_width
  Matrix u_k;  // dim x d_model
  Matrix g;    // heads x d_model

  static IndexerParams init(const IndexerShape& shape, Rng& rng);
  static IndexerParams zeros_like(const IndexerParams& other);

  std::size_t parameter_count() const { return u_q.size() + u_k.size() + g.size(); }
  /// Flat views in the fixed order u_q, u_k, g (for clipping and finite differences).
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
};

/// Normalised per-head query features and head gates for a set of query rows.
struct IndexerQueries {
  Matrix q_hat;   // n x (heads*dim)
  Matrix q_raw;   // pre-normalisation, kept for the backward pass
  Matrix alpha;   // n x heads
  std::vector<std::size_t> positions;
};

IndexerQueries indexer_queries(const IndexerParams& params, const Matrix& x, const Matrix& q_pre,
                               std::span<const std::size_t> rows);
/// Queries for explicit (x row, pre-RoPE query row) pairs at the given positions.
IndexerQueries indexer_queries_from_rows(const IndexerParams& params, const Matrix& x_rows,
                                         const Matrix& q_pre_rows,
                                         std::span<const std::size_t> positions);
/// RMS-normalised shared keys, one row per requested sequence row.
Matrix indexer_keys(const IndexerParams& params, const Matrix& x, std::span<const std::size_t> rows);
Vector indexer_key(const IndexerParams& params, std::span<const double> x_row);

/// Append-only cache of normalised indexer keys; never compacted.
class IndexerKeyCache {
 public:
  explicit IndexerKeyCache(std::size_t dim = 0) : keys_(0, dim) {}

  void append(std::span<const double> key, std::size_t position);
  std::size_t size() const { return positions_.size(); }
  const std::vector<std::size_t>& positions() const { return positions_; }
  /// Keys for the given sequence positions; throws if one is missing.
  Matrix lookup(std::span<const std::size_t> positions) const;
  std::size_t bytes() const { return keys_.size() * sizeof(double); }

 private:
  Matrix keys_;
  std::vector<std::size_t> positions_;
};

/// A[s, t] = sum_h alpha[s,h] * relu(<q_hat[s,h], k_hat[t]>); -inf where key
/// position exceeds query position.
Matrix score_block(const IndexerShape& shape, const IndexerQueries& queries, const Matrix& keys,
                   std::span<const std::size_t> key_positions);

/// Score block for sequence rows q_ids x k_ids. Keys come from `cache` when
/// given (looked up by position), else are computed from `x`.
Matrix indexer_score_block(const IndexerParams& params, const Matrix& x, const Matrix& q_pre,
                           std::span<const std::size_t> q_ids, std::span<const std::size_t> k_ids,
                           const IndexerKeyCache* cache = nullptr);

/// Column max of A over the listed query rows of A.
Vector pooled_importance(const Matrix& a, std::span<const std::size_t> query_rows);

/// Running max over keys with first-winning argmax query (lowest query index on ties).
struct PooledScores {
  Vector imp;
  std::vector<std::size_t> argmax;  // query position per key; SIZE_MAX if none
};

/// Streams query blocks of q_set against key blocks of [0, n_keys) with O(L) state.
PooledScores indexer_importance(const IndexerParams& params, const Matrix& x, const Matrix& q_pre,
                                std::span<const std::size_t> q_set, std::size_t n_keys,
                                std::size_t q_blk, std::size_t k_blk);

/// Teacher pooled logits: max over heads and q_set of q.k / sqrt(d_model), causal.
Vector teacher_pooled_importance(const Matrix& q, const Matrix& k, const HeadLayout& layout,
                                 std::span<const std::size_t> q_set, std::size_t q_blk,
                                 std::size_t k_blk);

/// Indexer keep set computed from hidden states and pre-RoPE queries only,
/// before any key/value row is materialised. Ascending row indices.
std::vector<std::size_t> pre_evict(const IndexerParams& params, const Matrix& x_chunk,
                                   const Matrix& q_pre_chunk, const CompressionPlan& plan);

struct DistillBatch {
  const Matrix* x = nullptr;       // L x d_model, indexer input
  const Matrix* q_pre = nullptr;   // L x H*d_head
  const Matrix* q = nullptr;       // teacher post-RoPE queries
  const Matrix* k = nullptr;       // teacher post-RoPE keys
  HeadLayout layout;
  std::size_t sink_count = 4;
  std::vector<std::size_t> q_set;  // empty means all rows
};

struct DistillLoss {
  double loss = 0.0;
  Vector teacher_imp;
  Vector student_imp;
  std::vector<std::size_t> student_argmax;
};

/// KL(softmax(teacher pooled) || softmax(student pooled)) over non-sink keys.
double pooled_kl(std::span<const double> teacher_imp, std::span<const double> student_imp,
                 std::size_t sink_count);

DistillLoss streaming_distill_loss(const IndexerParams& params, const DistillBatch& batch,
                                   std::size_t q_blk, std::size_t k_blk);

/// Same loss against a precomputed teacher pooled vector.
DistillLoss distill_loss_with_teacher(const IndexerParams& params, const Matrix& x,
                                      const Matrix& q_pre, std::span<const double> teacher_imp,
                                      std::size_t sink_count, std::span<const std::size_t> q_set);

/// Analytic gradient of the pooled KL. Max pooling routes through the
/// lowest-index argmax query; relu has zero slope at zero.
IndexerParams distill_gradients(const IndexerParams& params, const Matrix& x, const Matrix& q_pre,
                                std::span<const double> teacher_imp, std::size_t sink_count,
                                std::span<const std::size_t> q_set, double* loss_out = nullptr);

IndexerParams distill_gradients(const IndexerParams& params, const DistillBatch& batch,
                                double* loss_out = nullptr);

}  // namespace kvgate

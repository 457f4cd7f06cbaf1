// SPDX-License-Identifier: Apache-2.0
#include "kvgate/indexer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "kvgate/numeric.hpp"

namespace kvgate {

namespace {

constexpr std::size_t kNoQuery = std::numeric_limits<std::size_t>::max();

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

void check_inputs(const IndexerParams& params, const Matrix& x, const Matrix& q_pre) {
  if (x.cols() != params.shape.d_model) throw std::invalid_argument("indexer: x width mismatch");
  if (q_pre.cols() != params.shape.query_width) {
    throw std::invalid_argument("indexer: query width mismatch");
  }
  if (x.rows() != q_pre.rows()) throw std::invalid_argument("indexer: row count mismatch");
}

// Student pooled scores plus the features that produced them.
struct StudentPass {
  IndexerQueries queries;
  Matrix keys;   // normalised, one per sequence row
  Matrix k_raw;
  PooledScores pooled;
};

StudentPass student_pass(const IndexerParams& params, const Matrix& x, const Matrix& q_pre,
                         std::span<const std::size_t> q_set) {
  check_inputs(params, x, q_pre);
  StudentPass pass;
  pass.queries = indexer_queries(params, x, q_pre, q_set);
  const std::size_t n = x.rows();
  const std::size_t di = params.shape.dim;
  pass.keys = Matrix(n, di);
  pass.k_raw = Matrix(n, di);
  for (std::size_t t = 0; t < n; ++t) {
    const Vector raw = matvec(params.u_k, x.row(t));
    const Vector normed = rmsnorm(raw);
    std::copy(raw.begin(), raw.end(), pass.k_raw.row(t).begin());
    std::copy(normed.begin(), normed.end(), pass.keys.row(t).begin());
  }
  const auto key_positions = iota_rows(n);
  const Matrix a = score_block(params.shape, pass.queries, pass.keys, key_positions);
  pass.pooled.imp.assign(n, kNegInf);
  pass.pooled.argmax.assign(n, kNoQuery);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t t = 0; t < n; ++t) {
      if (a(i, t) > pass.pooled.imp[t]) {
        pass.pooled.imp[t] = a(i, t);
        pass.pooled.argmax[t] = i;  // row of `queries`, not a position
      }
    }
  }
  return pass;
}

std::vector<std::size_t> resolve_q_set(std::span<const std::size_t> q_set, std::size_t n) {
  if (q_set.empty()) return iota_rows(n);
  std::vector<std::size_t> rows(q_set.begin(), q_set.end());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n) throw std::out_of_range("indexer: query row out of range");
    if (i > 0 && rows[i] <= rows[i - 1]) {
      throw std::invalid_argument("indexer: query set must be strictly ascending");
    }
  }
  return rows;
}

}  // namespace

IndexerShape IndexerShape::for_layout(const HeadLayout& layout, std::size_t heads_override,
                                      std::size_t dim_override) {
  IndexerShape s;
  s.d_model = layout.d_model();
  s.query_width = layout.n_heads * layout.d_head;
  s.heads = heads_override != 0 ? heads_override : std::max<std::size_t>(1, layout.n_heads / 4);
  s.dim = dim_override != 0 ? dim_override : std::max<std::size_t>(1, layout.d_head / 8);
  return s;
}

double IndexerShape::gate_scale() const {
  return 1.0 / std::sqrt(static_cast<double>(heads * dim));
}

IndexerParams IndexerParams::init(const IndexerShape& shape, Rng& rng) {
  if (shape.heads == 0 || shape.dim == 0 || shape.d_model == 0 || shape.query_width == 0) {
    throw std::invalid_argument("indexer: zero-sized shape");
  }
  IndexerParams p;
  p.shape = shape;
  const double q_std = 1.0 / std::sqrt(static_cast<double>(shape.query_width));
  const double x_std = 1.0 / std::sqrt(static_cast<double>(shape.d_model));
  p.u_q = random_normal(shape.heads * shape.dim, shape.query_width, q_std, rng);
  p.u_k = random_normal(shape.dim, shape.d_model, x_std, rng);
  p.g = random_normal(shape.heads, shape.d_model, x_std, rng);
  return p;
}

IndexerParams IndexerParams::zeros_like(const IndexerParams& other) {
  IndexerParams p;
  p.shape = other.shape;
  p.u_q = Matrix(other.u_q.rows(), other.u_q.cols());
  p.u_k = Matrix(other.u_k.rows(), other.u_k.cols());
  p.g = Matrix(other.g.rows(), other.g.cols());
  return p;
}

std::vector<std::span<double>> IndexerParams::tensors() {
  return {u_q.data(), u_k.data(), g.data()};
}

std::vector<std::span<const double>> IndexerParams::tensors() const {
  return {u_q.data(), u_k.data(), g.data()};
}

IndexerQueries indexer_queries_from_rows(const IndexerParams& params, const Matrix& x_rows,
                                         const Matrix& q_pre_rows,
                                         std::span<const std::size_t> positions) {
  const IndexerShape& s = params.shape;
  const std::size_t n = positions.size();
  if (x_rows.rows() != n || q_pre_rows.rows() != n) {
    throw std::invalid_argument("indexer queries: row count mismatch");
  }
  IndexerQueries out;
  out.q_hat = Matrix(n, s.heads * s.dim);
  out.q_raw = Matrix(n, s.heads * s.dim);
  out.alpha = Matrix(n, s.heads);
  out.positions.assign(positions.begin(), positions.end());
  const double gscale = s.gate_scale();
  for (std::size_t i = 0; i < n; ++i) {
    const Vector raw = matvec(params.u_q, q_pre_rows.row(i));
    std::copy(raw.begin(), raw.end(), out.q_raw.row(i).begin());
    for (std::size_t h = 0; h < s.heads; ++h) {
      const Vector normed = rmsnorm(std::span<const double>(raw).subspan(h * s.dim, s.dim));
      std::copy(normed.begin(), normed.end(), out.q_hat.row(i).begin() + h * s.dim);
    }
    const Vector a = matvec(params.g, x_rows.row(i));
    for (std::size_t h = 0; h < s.heads; ++h) out.alpha(i, h) = a[h] * gscale;
  }
  return out;
}

IndexerQueries indexer_queries(const IndexerParams& params, const Matrix& x, const Matrix& q_pre,
                               std::span<const std::size_t> rows) {
  check_inputs(params, x, q_pre);
  return indexer_queries_from_rows(params, x.gather_rows(rows), q_pre.gather_rows(rows), rows);
}

Vector indexer_key(const IndexerParams& params, std::span<const double> x_row) {
  if (x_row.size() != params.shape.d_model) throw std::invalid_argument("indexer key: width");
  return rmsnorm(matvec(params.u_k, x_row));
}

Matrix indexer_keys(const IndexerParams& params, const Matrix& x,
                    std::span<const std::size_t> rows) {
  Matrix out(rows.size(), params.shape.dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const Vector k = indexer_key(params, x.row(rows[i]));
    std::copy(k.begin(), k.end(), out.row(i).begin());
  }
  return out;
}

void IndexerKeyCache::append(std::span<const double> key, std::size_t position) {
  if (key.size() != keys_.cols()) throw std::invalid_argument("indexer cache: key width");
  if (!positions_.empty() && position <= positions_.back()) {
    throw std::invalid_argument("indexer cache: non-monotone position");
  }
  keys_.append_row(key);
  positions_.push_back(position);
}

Matrix IndexerKeyCache::lookup(std::span<const std::size_t> positions) const {
  Matrix out(positions.size(), keys_.cols());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    auto it = std::lower_bound(positions_.begin(), positions_.end(), positions[i]);
    if (it == positions_.end() || *it != positions[i]) {
      throw std::out_of_range("indexer cache: missing position");
    }
    const auto row = keys_.row(static_cast<std::size_t>(it - positions_.begin()));
    std::copy(row.begin(), row.end(), out.row(i).begin());
  }
  return out;
}

Matrix score_block(const IndexerShape& shape, const IndexerQueries& queries, const Matrix& keys,
                   std::span<const std::size_t> key_positions) {
  const std::size_t nq = queries.positions.size();
  const std::size_t nk = keys.rows();
  if (key_positions.size() != nk) throw std::invalid_argument("score block: key positions");
  if (keys.cols() != shape.dim) throw std::invalid_argument("score block: key width");
  Matrix a(nq, nk);
  for (std::size_t i = 0; i < nq; ++i) {
    const auto qrow = queries.q_hat.row(i);
    for (std::size_t t = 0; t < nk; ++t) {
      if (key_positions[t] > queries.positions[i]) {
        a(i, t) = kNegInf;
        continue;
      }
      double acc = 0.0;
      for (std::size_t h = 0; h < shape.heads; ++h) {
        const double z = dot(qrow.subspan(h * shape.dim, shape.dim), keys.row(t));
        if (z > 0.0) acc += queries.alpha(i, h) * z;
      }
      a(i, t) = acc;
    }
  }
  return a;
}

Matrix indexer_score_block(const IndexerParams& params, const Matrix& x, const Matrix& q_pre,
                           std::span<const std::size_t> q_ids, std::span<const std::size_t> k_ids,
                           const IndexerKeyCache* cache) {
  const IndexerQueries queries = indexer_queries(params, x, q_pre, q_ids);
  const Matrix keys = cache != nullptr ? cache->lookup(k_ids) : indexer_keys(params, x, k_ids);
  return score_block(params.shape, queries, keys, k_ids);
}

Vector pooled_importance(const Matrix& a, std::span<const std::size_t> query_rows) {
  Vector imp(a.cols(), kNegInf);
  for (std::size_t r : query_rows) {
    if (r >= a.rows()) throw std::out_of_range("pooled importance: query row");
    for (std::size_t t = 0; t < a.cols(); ++t) imp[t] = std::max(imp[t], a(r, t));
  }
  return imp;
}

PooledScores indexer_importance(const IndexerParams& params, const Matrix& x, const Matrix& q_pre,
                                std::span<const std::size_t> q_set, std::size_t n_keys,
                                std::size_t q_blk, std::size_t k_blk) {
  check_inputs(params, x, q_pre);
  if (q_blk == 0 || k_blk == 0) throw std::invalid_argument("indexer importance: zero block");
  if (n_keys > x.rows()) throw std::out_of_range("indexer importance: too many keys");
  const auto queries_all = resolve_q_set(q_set, x.rows());
  PooledScores out;
  out.imp.assign(n_keys, kNegInf);
  out.argmax.assign(n_keys, kNoQuery);
  for (std::size_t q0 = 0; q0 < queries_all.size(); q0 += q_blk) {
    const std::size_t q1 = std::min(queries_all.size(), q0 + q_blk);
    const std::span<const std::size_t> q_ids(queries_all.data() + q0, q1 - q0);
    const IndexerQueries queries = indexer_queries(params, x, q_pre, q_ids);
    for (std::size_t k0 = 0; k0 < n_keys; k0 += k_blk) {
      const std::size_t k1 = std::min(n_keys, k0 + k_blk);
      std::vector<std::size_t> k_ids(k1 - k0);
      std::iota(k_ids.begin(), k_ids.end(), k0);
      const Matrix keys = indexer_keys(params, x, k_ids);
      const Matrix a = score_block(params.shape, queries, keys, k_ids);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
          if (a(i, j) > out.imp[k0 + j]) {
            out.imp[k0 + j] = a(i, j);
            out.argmax[k0 + j] = q_ids[i];
          }
        }
      }
    }
  }
  return out;
}

Vector teacher_pooled_importance(const Matrix& q, const Matrix& k, const HeadLayout& layout,
                                 std::span<const std::size_t> q_set, std::size_t q_blk,
                                 std::size_t k_blk) {
  if (q_blk == 0 || k_blk == 0) throw std::invalid_argument("teacher importance: zero block");
  if (q.cols() != layout.n_heads * layout.d_head || k.cols() != layout.kv_width()) {
    throw std::invalid_argument("teacher importance: width mismatch");
  }
  const std::size_t n = k.rows();
  const auto queries = resolve_q_set(q_set, q.rows());
  const std::size_t dh = layout.d_head;
  const double scale = layout.logit_scale();
  Vector imp(n, kNegInf);
  for (std::size_t q0 = 0; q0 < queries.size(); q0 += q_blk) {
    const std::size_t q1 = std::min(queries.size(), q0 + q_blk);
    for (std::size_t k0 = 0; k0 < n; k0 += k_blk) {
      const std::size_t k1 = std::min(n, k0 + k_blk);
      for (std::size_t qi = q0; qi < q1; ++qi) {
        const std::size_t s = queries[qi];
        for (std::size_t t = k0; t < k1 && t <= s; ++t) {
          for (std::size_t h = 0; h < layout.n_heads; ++h) {
            const std::size_t g = layout.kv_head_of(h);
            const double logit =
                dot(q.row(s).subspan(h * dh, dh), k.row(t).subspan(g * dh, dh)) * scale;
            imp[t] = std::max(imp[t], logit);
          }
        }
      }
    }
  }
  return imp;
}

std::vector<std::size_t> pre_evict(const IndexerParams& params, const Matrix& x_chunk,
                                   const Matrix& q_pre_chunk, const CompressionPlan& plan) {
  const std::size_t n = x_chunk.rows();
  const PooledScores pooled = indexer_importance(params, x_chunk, q_pre_chunk, {}, n, 64, 64);
  return select_by_ratio(pooled.imp, iota_rows(n), plan);
}

double pooled_kl(std::span<const double> teacher_imp, std::span<const double> student_imp,
                 std::size_t sink_count) {
  if (teacher_imp.size() != student_imp.size()) {
    throw std::invalid_argument("pooled kl: length mismatch");
  }
  if (teacher_imp.size() <= sink_count) throw std::invalid_argument("pooled kl: no scored keys");
  return kl_divergence(teacher_imp.subspan(sink_count), student_imp.subspan(sink_count));
}

DistillLoss streaming_distill_loss(const IndexerParams& params, const DistillBatch& batch,
                                   std::size_t q_blk, std::size_t k_blk) {
  if (!batch.x || !batch.q_pre || !batch.q || !batch.k) {
    throw std::invalid_argument("distill: incomplete batch");
  }
  DistillLoss out;
  out.teacher_imp =
      teacher_pooled_importance(*batch.q, *batch.k, batch.layout, batch.q_set, q_blk, k_blk);
  PooledScores pooled = indexer_importance(params, *batch.x, *batch.q_pre, batch.q_set,
                                           batch.x->rows(), q_blk, k_blk);
  out.student_imp = std::move(pooled.imp);
  out.student_argmax = std::move(pooled.argmax);
  out.loss = pooled_kl(out.teacher_imp, out.student_imp, batch.sink_count);
  return out;
}

DistillLoss distill_loss_with_teacher(const IndexerParams& params, const Matrix& x,
                                      const Matrix& q_pre, std::span<const double> teacher_imp,
                                      std::size_t sink_count, std::span<const std::size_t> q_set) {
  PooledScores pooled = indexer_importance(params, x, q_pre, q_set, x.rows(), 64, 64);
  DistillLoss out;
  out.teacher_imp.assign(teacher_imp.begin(), teacher_imp.end());
  out.student_imp = std::move(pooled.imp);
  out.student_argmax = std::move(pooled.argmax);
  out.loss = pooled_kl(out.teacher_imp, out.student_imp, sink_count);
  return out;
}

IndexerParams distill_gradients(const IndexerParams& params, const Matrix& x, const Matrix& q_pre,
                                std::span<const double> teacher_imp, std::size_t sink_count,
                                std::span<const std::size_t> q_set, double* loss_out) {
  const std::size_t n = x.rows();
  if (teacher_imp.size() != n) throw std::invalid_argument("distill: teacher length mismatch");
  const auto queries = resolve_q_set(q_set, n);
  const StudentPass pass = student_pass(params, x, q_pre, queries);
  const IndexerShape& s = params.shape;

  const auto teacher_tail = teacher_imp.subspan(sink_count);
  const auto student_tail = std::span<const double>(pass.pooled.imp).subspan(sink_count);
  if (loss_out) *loss_out = kl_divergence(teacher_tail, student_tail);
  const Vector p = softmax_stable(teacher_tail);
  const Vector sp = softmax_stable(student_tail);

  const std::size_t nq = queries.size();
  Matrix d_qhat(nq, s.heads * s.dim);
  Matrix d_alpha(nq, s.heads);
  Matrix d_khat(n, s.dim);
  for (std::size_t t = sink_count; t < n; ++t) {
    const double d = sp[t - sink_count] - p[t - sink_count];
    const std::size_t i = pass.pooled.argmax[t];
    if (i == kNoQuery || d == 0.0) continue;
    const auto qrow = pass.queries.q_hat.row(i);
    const auto krow = pass.keys.row(t);
    for (std::size_t h = 0; h < s.heads; ++h) {
      const auto qh = qrow.subspan(h * s.dim, s.dim);
      const double z = dot(qh, krow);
      if (z <= 0.0) continue;
      d_alpha(i, h) += d * z;
      const double a = pass.queries.alpha(i, h);
      axpy(d * a, krow, d_qhat.row(i).subspan(h * s.dim, s.dim));
      axpy(d * a, qh, d_khat.row(t));
    }
  }

  IndexerParams grad = IndexerParams::zeros_like(params);
  const double gscale = s.gate_scale();
  for (std::size_t i = 0; i < nq; ++i) {
    const std::size_t row = queries[i];
    for (std::size_t h = 0; h < s.heads; ++h) {
      const auto dq = d_qhat.row(i).subspan(h * s.dim, s.dim);
      if (std::all_of(dq.begin(), dq.end(), [](double v) { return v == 0.0; })) continue;
      const Vector d_raw = rmsnorm_backward(pass.queries.q_raw.row(i).subspan(h * s.dim, s.dim), dq);
      for (std::size_t c = 0; c < s.dim; ++c) {
        axpy(d_raw[c], q_pre.row(row), grad.u_q.row(h * s.dim + c));
      }
    }
    for (std::size_t h = 0; h < s.heads; ++h) {
      if (d_alpha(i, h) != 0.0) axpy(d_alpha(i, h) * gscale, x.row(row), grad.g.row(h));
    }
  }
  for (std::size_t t = 0; t < n; ++t) {
    const auto dk = d_khat.row(t);
    if (std::all_of(dk.begin(), dk.end(), [](double v) { return v == 0.0; })) continue;
    const Vector d_raw = rmsnorm_backward(pass.k_raw.row(t), dk);
    for (std::size_t c = 0; c < s.dim; ++c) axpy(d_raw[c], x.row(t), grad.u_k.row(c));
  }
  return grad;
}

IndexerParams distill_gradients(const IndexerParams& params, const DistillBatch& batch,
                                double* loss_out) {
  if (!batch.x || !batch.q_pre || !batch.q || !batch.k) {
    throw std::invalid_argument("distill: incomplete batch");
  }
  const Vector teacher =
      teacher_pooled_importance(*batch.q, *batch.k, batch.layout, batch.q_set, 64, 64);
  return distill_gradients(params, *batch.x, *batch.q_pre, teacher, batch.sink_count, batch.q_set,
                           loss_out);
}

}  // namespace kvgate

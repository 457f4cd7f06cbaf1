// SPDX-License-Identifier: Apache-2.0
#include "kvgate/policies.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "kvgate/numeric.hpp"

namespace kvgate {

void PolicySpec::validate() const {
  if (kind == PolicyKind::kSnapKv && window == 0) {
    throw std::invalid_argument("policy: snapkv window must be positive");
  }
}

PolicyKind parse_policy(std::string_view name) {
  if (name == "snapkv") return PolicyKind::kSnapKv;
  if (name == "knorm") return PolicyKind::kKnorm;
  if (name == "tova") return PolicyKind::kTova;
  if (name == "indexer") return PolicyKind::kIndexer;
  if (name == "random") return PolicyKind::kRandom;
  throw std::invalid_argument("unknown policy '" + std::string(name) + "'");
}

std::string_view to_string(PolicyKind kind) {
  switch (kind) {
    case PolicyKind::kSnapKv: return "snapkv";
    case PolicyKind::kKnorm: return "knorm";
    case PolicyKind::kTova: return "tova";
    case PolicyKind::kIndexer: return "indexer";
    case PolicyKind::kRandom: return "random";
  }
  return "unknown";
}

HeadPooling parse_pooling(std::string_view name) {
  if (name == "mean") return HeadPooling::kMean;
  if (name == "max") return HeadPooling::kMax;
  throw std::invalid_argument("unknown head pooling '" + std::string(name) + "'");
}

Matrix score_snapkv_heads(const QueryWindow& queries, const Matrix& keys,
                          std::span<const std::size_t> key_positions, const HeadLayout& layout,
                          HeadPooling pooling) {
  const std::size_t w = queries.q.rows();
  const std::size_t n = keys.rows();
  if (w == 0) throw std::invalid_argument("snapkv: empty query window");
  if (queries.positions.size() != w || key_positions.size() != n) {
    throw std::invalid_argument("snapkv: position count mismatch");
  }
  const std::size_t dh = layout.d_head;
  const double scale = layout.logit_scale();
  Matrix out(layout.n_kv_heads, n, 0.0);
  Vector logits(n);
  for (std::size_t g = 0; g < layout.n_kv_heads; ++g) {
    Vector acc(n, 0.0);
    std::size_t contributors = 0;
    for (std::size_t h = 0; h < layout.n_heads; ++h) {
      if (layout.kv_head_of(h) != g) continue;
      ++contributors;
      Vector head_score(n, 0.0);
      for (std::size_t i = 0; i < w; ++i) {
        auto qh = queries.q.row(i).subspan(h * dh, dh);
        for (std::size_t t = 0; t < n; ++t) {
          logits[t] = key_positions[t] > queries.positions[i]
                          ? kNegInf
                          : dot(qh, keys.row(t).subspan(g * dh, dh)) * scale;
        }
        const Vector p = softmax_stable(logits);
        for (std::size_t t = 0; t < n; ++t) head_score[t] += p[t] / static_cast<double>(w);
      }
      for (std::size_t t = 0; t < n; ++t) {
        acc[t] = pooling == HeadPooling::kMean ? acc[t] + head_score[t]
                                               : std::max(acc[t], head_score[t]);
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      out(g, t) = pooling == HeadPooling::kMean ? acc[t] / static_cast<double>(contributors)
                                                : acc[t];
    }
  }
  return out;
}

Matrix score_knorm_heads(const Matrix& keys, const HeadLayout& layout) {
  Matrix out(layout.n_kv_heads, keys.rows());
  for (std::size_t t = 0; t < keys.rows(); ++t) {
    for (std::size_t g = 0; g < layout.n_kv_heads; ++g) {
      out(g, t) = std::sqrt(squared_norm(keys.row(t).subspan(g * layout.d_head, layout.d_head)));
    }
  }
  return out;
}

Vector sum_heads(const Matrix& per_head) {
  Vector out(per_head.cols(), 0.0);
  for (std::size_t g = 0; g < per_head.rows(); ++g) axpy(1.0, per_head.row(g), out);
  return out;
}

Vector score_snapkv(const QueryWindow& queries, std::size_t window, const Matrix& keys,
                    std::span<const std::size_t> key_positions, const HeadLayout& layout,
                    HeadPooling pooling) {
  if (window == 0) throw std::invalid_argument("snapkv: window must be positive");
  const std::size_t w = std::min(window, queries.q.rows());
  QueryWindow tail;
  tail.q = Matrix(0, queries.q.cols());
  for (std::size_t i = queries.q.rows() - w; i < queries.q.rows(); ++i) {
    tail.q.append_row(queries.q.row(i));
    tail.positions.push_back(queries.positions[i]);
  }
  return sum_heads(score_snapkv_heads(tail, keys, key_positions, layout, pooling));
}

Vector score_knorm(const Matrix& keys, const HeadLayout& layout) {
  return sum_heads(score_knorm_heads(keys, layout));
}

Vector score_tova(const QueryWindow& queries, const Matrix& keys,
                  std::span<const std::size_t> key_positions, const HeadLayout& layout) {
  if (queries.q.rows() == 0) throw std::invalid_argument("tova: no query");
  const std::size_t last = queries.q.rows() - 1;
  QueryWindow newest;
  newest.q = Matrix(1, queries.q.cols());
  std::copy(queries.q.row(last).begin(), queries.q.row(last).end(), newest.q.row(0).begin());
  newest.positions = {queries.positions[last]};
  Vector out = sum_heads(score_snapkv_heads(newest, keys, key_positions, layout));
  for (double& v : out) v /= static_cast<double>(layout.n_kv_heads);
  return out;
}

Vector score_random(std::size_t n, Rng& rng) {
  Vector out(n);
  for (double& v : out) v = rng.uniform();
  return out;
}

}  // namespace kvgate

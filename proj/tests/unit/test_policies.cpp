// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "kvgate/numeric.hpp"
#include "kvgate/policies.hpp"
#include "test_support.hpp"

namespace kvgate {
namespace {

using testing::max_abs_diff;

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

QueryWindow window_rows(const Matrix& q, std::size_t begin, std::size_t end) {
  QueryWindow w;
  w.q = Matrix(0, q.cols());
  for (std::size_t s = begin; s < end; ++s) {
    w.q.append_row(q.row(s));
    w.positions.push_back(s);
  }
  return w;
}

// Dense causal probabilities per query head, rebuilt with exp/sum.
std::vector<Matrix> dense_probs(const Matrix& q, const Matrix& k, const HeadLayout& layout) {
  const std::size_t n = q.rows();
  const std::size_t dh = layout.d_head;
  std::vector<Matrix> out;
  for (std::size_t h = 0; h < layout.n_heads; ++h) {
    const std::size_t g = layout.kv_head_of(h);
    Matrix p(n, n, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
      double mx = -1e300;
      Vector l(s + 1);
      for (std::size_t t = 0; t <= s; ++t) {
        double acc = 0.0;
        for (std::size_t d = 0; d < dh; ++d) acc += q(s, h * dh + d) * k(t, g * dh + d);
        l[t] = acc / std::sqrt(static_cast<double>(layout.d_model()));
        mx = std::max(mx, l[t]);
      }
      double z = 0.0;
      for (double x : l) z += std::exp(x - mx);
      for (std::size_t t = 0; t <= s; ++t) p(s, t) = std::exp(l[t] - mx) / z;
    }
    out.push_back(std::move(p));
  }
  return out;
}

TEST(SnapKv, MatchesDenseAttentionAverage) {
  Rng rng(1);
  const HeadLayout layout{4, 2, 4};
  const std::size_t n = 12, w = 4;
  const Matrix q = random_normal(n, layout.d_model(), 1.0, rng);
  const Matrix k = random_normal(n, layout.kv_width(), 1.0, rng);
  const Matrix per_head = score_snapkv_heads(window_rows(q, n - w, n), k, iota(n), layout);
  const auto probs = dense_probs(q, k, layout);
  for (std::size_t g = 0; g < layout.n_kv_heads; ++g) {
    double total = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      double want = 0.0;
      for (std::size_t h = 0; h < layout.n_heads; ++h) {
        if (layout.kv_head_of(h) != g) continue;
        for (std::size_t i = n - w; i < n; ++i) want += probs[h](i, t);
      }
      want /= static_cast<double>(w * layout.group_size());
      EXPECT_NEAR(per_head(g, t), want, 1e-10);
      total += per_head(g, t);
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST(SnapKv, FullWindowEqualsDenseColumnMeans) {
  Rng rng(2);
  const HeadLayout layout{2, 1, 4};
  const std::size_t n = 9;
  const Matrix q = random_normal(n, layout.d_model(), 1.0, rng);
  const Matrix k = random_normal(n, layout.kv_width(), 1.0, rng);
  const Matrix per_head = score_snapkv_heads(window_rows(q, 0, n), k, iota(n), layout);
  const auto probs = dense_probs(q, k, layout);
  for (std::size_t t = 0; t < n; ++t) {
    double mean = 0.0;
    for (const Matrix& p : probs) {
      for (std::size_t s = 0; s < n; ++s) mean += p(s, t);
    }
    EXPECT_NEAR(per_head(0, t), mean / static_cast<double>(n * probs.size()), 1e-10);
  }
}

TEST(SnapKv, ZeroWindowThrows) {
  const HeadLayout layout{2, 1, 2};
  QueryWindow w;
  w.q = Matrix(1, 4, 1.0);
  w.positions = {0};
  EXPECT_THROW(score_snapkv(w, 0, Matrix(1, 2, 1.0), iota(1), layout), std::invalid_argument);
  PolicySpec spec;
  spec.kind = PolicyKind::kSnapKv;
  spec.window = 0;
  EXPECT_THROW(spec.validate(), std::invalid_argument);
}

TEST(Knorm, NormsSummedOverKvHeads) {
  const HeadLayout layout{2, 2, 2};
  const Matrix k(3, 4, Vector{1, 0, 0, 0, 2, 0, 0, 0, 0, 0, 3, 4});
  const Vector s = score_knorm(k, layout);
  EXPECT_EQ(s, (Vector{1.0, 2.0, 5.0}));
}

TEST(Knorm, ScalingKeysKeepsSelection) {
  Rng rng(3);
  const HeadLayout layout{4, 2, 4};
  Matrix k = random_normal(30, layout.kv_width(), 1.0, rng);
  const Vector before = score_knorm(k, layout);
  for (double& v : k.data()) v *= 3.5;
  EXPECT_EQ(topk_indices(before, 10), topk_indices(score_knorm(k, layout), 10));
}

TEST(Tova, PerHeadEqualsOneQuerySnapKv) {
  Rng rng(4);
  const HeadLayout layout{8, 2, 4};
  const std::size_t n = 15;
  const Matrix q = random_normal(n, layout.d_model(), 1.0, rng);
  const Matrix k = random_normal(n, layout.kv_width(), 1.0, rng);
  const Vector tova = score_tova(window_rows(q, 0, n), k, iota(n), layout);
  const Vector snap = score_snapkv(window_rows(q, 0, n), 1, k, iota(n), layout);
  for (std::size_t t = 0; t < n; ++t) EXPECT_NEAR(tova[t] * layout.n_kv_heads, snap[t], 1e-14);
  EXPECT_EQ(topk_indices(tova, 5), topk_indices(snap, 5));
  double total = 0.0;
  for (double v : tova) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Tova, SingleKeyScoresOne) {
  const HeadLayout layout{2, 1, 2};
  QueryWindow w;
  w.q = Matrix(1, 4, 0.3);
  w.positions = {0};
  EXPECT_NEAR(score_tova(w, Matrix(1, 2, 0.7), iota(1), layout)[0], 1.0, 1e-15);
}

TEST(RandomPolicy, ReproducibleForSeed) {
  Rng a(5), b(5);
  EXPECT_EQ(score_random(20, a), score_random(20, b));
}

TEST(Policy, ParseNames) {
  for (PolicyKind k : {PolicyKind::kSnapKv, PolicyKind::kKnorm, PolicyKind::kTova,
                       PolicyKind::kIndexer, PolicyKind::kRandom}) {
    EXPECT_EQ(parse_policy(to_string(k)), k);
  }
  EXPECT_THROW(parse_policy("h2o"), std::invalid_argument);
  EXPECT_EQ(parse_pooling("max"), HeadPooling::kMax);
}

TEST(Policy, SelectionOnlySeesScores) {
  Rng rng(6);
  CompressionPlan plan;
  plan.sink_count = 2;
  plan.local_window = 3;
  const Vector s = testing::random_vector(20, rng);
  EXPECT_EQ(select(plan, s, iota(20), 6), select(plan, Vector(s), iota(20), 6));
  EXPECT_EQ(select(plan, Vector(20, 1.0), iota(20), 3),
            (std::vector<std::size_t>{0, 1, 2, 3, 4, 17, 18, 19}));
  EXPECT_EQ(select(plan, s, iota(20), 20).size(), 20u);
}

}  // namespace
}  // namespace kvgate

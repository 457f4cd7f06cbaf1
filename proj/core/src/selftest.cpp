// SPDX-License-Identifier: Apache-2.0
#include "kvgate/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>

#include "kvgate/config.hpp"
#include "kvgate/engine.hpp"
#include "kvgate/indexer.hpp"
#include "kvgate/kv_cache.hpp"
#include "kvgate/memory.hpp"
#include "kvgate/numeric.hpp"
#include "kvgate/teacher.hpp"
#include "kvgate/weights_io.hpp"

namespace kvgate {

namespace {

TeacherConfig small_teacher() {
  TeacherConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.d_ffn = 64;
  c.vocab_size = 16;
  c.seed = 5;
  return c;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Plain exp/sum softmax attention for one query over the rows with mask[j].
Vector naive_attend(std::span<const double> q, const Matrix& k, const Matrix& v,
                    const std::vector<bool>& mask, const HeadLayout& layout) {
  const std::size_t dh = layout.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(layout.d_model()));
  Vector out(layout.d_model(), 0.0);
  for (std::size_t h = 0; h < layout.n_heads; ++h) {
    const std::size_t g = layout.kv_head_of(h);
    double mx = -1e300;
    Vector logit(k.rows(), 0.0);
    for (std::size_t j = 0; j < k.rows(); ++j) {
      if (!mask[j]) continue;
      double s = 0.0;
      for (std::size_t d = 0; d < dh; ++d) s += q[h * dh + d] * k(j, g * dh + d);
      logit[j] = s * scale;
      mx = std::max(mx, logit[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < k.rows(); ++j) {
      if (mask[j]) z += std::exp(logit[j] - mx);
    }
    for (std::size_t j = 0; j < k.rows(); ++j) {
      if (!mask[j]) continue;
      const double w = std::exp(logit[j] - mx) / z;
      for (std::size_t d = 0; d < dh; ++d) out[h * dh + d] += w * v(j, g * dh + d);
    }
  }
  return out;
}

SelfTestCheck check(const std::string& name, const std::function<std::string()>& body) {
  SelfTestCheck c{name, false, {}};
  try {
    c.detail = body();
    c.passed = c.detail.empty();
  } catch (const std::exception& e) {
    c.detail = std::string("exception: ") + e.what();
  }
  return c;
}

std::string over(const char* what, double value, double tol) {
  if (value <= tol) return {};
  std::ostringstream s;
  s << what << " " << value << " exceeds " << tol;
  return s.str();
}

std::string attention_reference() {
  HeadLayout layout{4, 2, 8};
  Rng rng(101);
  const std::size_t n = 24;
  const Matrix q = random_normal(n, layout.d_model(), 1.0, rng);
  const Matrix k = random_normal(n, layout.kv_width(), 1.0, rng);
  const Matrix v = random_normal(n, layout.kv_width(), 1.0, rng);
  const Matrix o = attention_full(q, k, v, layout);
  double worst = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<bool> mask(n, false);
    for (std::size_t t = 0; t <= s; ++t) mask[t] = true;
    worst = std::max(worst, max_abs_diff(o.row(s), naive_attend(q.row(s), k, v, mask, layout)));
  }
  return over("max deviation", worst, 1e-10);
}

std::string decode_matches_forward() {
  const TeacherModel teacher(small_teacher());
  Rng rng(7);
  const std::size_t n = 12;
  const std::size_t prompt = 6;
  const Matrix x0 = random_normal(n, teacher.config().d_model, 1.0, rng);
  const auto traces = teacher.forward(x0);
  const Matrix& full = traces.back().out;
  EvictionConfig ev;
  ev.policy.kind = PolicyKind::kKnorm;
  DecodeSession session(teacher, ev, nullptr, nullptr, MemoryConfig{}, false);
  std::vector<std::size_t> rows(prompt);
  for (std::size_t i = 0; i < prompt; ++i) rows[i] = i;
  const Matrix pre = session.prefill(x0.gather_rows(rows));
  double worst = 0.0;
  for (std::size_t s = 0; s < prompt; ++s) worst = std::max(worst, max_abs_diff(pre.row(s), full.row(s)));
  for (std::size_t s = prompt; s < n; ++s) {
    const Vector h = session.step(x0.row(s));
    worst = std::max(worst, max_abs_diff(h, full.row(s)));
  }
  return over("max deviation", worst, 1e-9);
}

std::string streaming_kl_blocks() {
  const TeacherModel teacher(small_teacher());
  Rng rng(9);
  const Matrix x0 = random_normal(20, teacher.config().d_model, 1.0, rng);
  const auto traces = teacher.forward(x0);
  const LayerTrace& tr = traces[0];
  Rng prng(10);
  const IndexerParams params =
      IndexerParams::init(IndexerShape::for_layout(teacher.layout(), 2, 2), prng);
  DistillBatch batch{&tr.x, &tr.q_pre, &tr.q, &tr.k, teacher.layout(), 2, {}};
  const double dense = streaming_distill_loss(params, batch, 20, 20).loss;
  double worst = 0.0;
  for (auto [qb, kb] : {std::pair<std::size_t, std::size_t>{1, 1}, {3, 8}}) {
    worst = std::max(worst, std::abs(streaming_distill_loss(params, batch, qb, kb).loss - dense));
  }
  return over("block disagreement", worst, 1e-12);
}

std::string compaction_equals_mask() {
  HeadLayout layout{4, 2, 8};
  Rng rng(13);
  const std::size_t n = 30;
  const Matrix k = random_normal(n, layout.kv_width(), 1.0, rng);
  const Matrix v = random_normal(n, layout.kv_width(), 1.0, rng);
  const Matrix qm = random_normal(1, layout.d_model(), 1.0, rng);
  const Vector q(qm.data().begin(), qm.data().end());
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  LayerCache cache(layout, 2, 4);
  cache.append(k, v, positions);
  CompressionPlan plan;
  plan.ratio = 0.5;
  plan.sink_count = 2;
  plan.local_window = 4;
  const Matrix sm = random_normal(1, n, 1.0, rng);
  const Vector scores(sm.data().begin(), sm.data().end());
  const auto keep = select_by_ratio(scores, positions, plan);
  cache.compact(keep);
  std::vector<bool> mask(n, false);
  for (std::size_t r : keep) mask[r] = true;
  const Vector a = attend(q, cache.keys(), cache.values(), layout);
  return over("max deviation", max_abs_diff(a, naive_attend(q, k, v, mask, layout)), 1e-10);
}

std::string sinks_survive() {
  HeadLayout layout{2, 1, 4};
  Rng rng(17);
  CompressionPlan plan;
  plan.interval = 4;
  plan.budget = 12;
  plan.sink_count = 3;
  plan.local_window = 5;
  LayerCache cache(layout, plan.sink_count, plan.local_window);
  Vector row(layout.kv_width(), 0.0);
  const RowScorer scorer = [&](const LayerCache& c) {
    Vector s(c.size());
    for (double& x : s) x = rng.normal();
    return s;
  };
  const EvictionSink sink = [](std::vector<EvictedRow>&&) {};
  for (std::size_t step = 1; step <= 200; ++step) {
    for (double& x : row) x = rng.normal();
    decode_schedule_step(cache, row, row, step - 1, step, plan, scorer, sink);
    for (std::size_t p = 0; p < plan.sink_count && p < step; ++p) {
      if (cache.positions()[p] != p) return "sink position " + std::to_string(p) + " evicted";
    }
    if (cache.size() > plan.budget + plan.interval) return "budget bound violated";
  }
  return {};
}

std::string memory_one_hot() {
  const std::size_t d = 4;
  MemorySlowWeights slow;
  slow.w_phi = Matrix(d, d, 0.0);
  for (std::size_t i = 0; i < d; ++i) slow.w_phi(i, i) = 1.0;
  slow.phi_bias = Vector(d, 0.0);
  slow.w_g = Vector(d, 0.0);
  slow.bias = 0.0;
  MemoryState state(d, d);
  Matrix key(1, d, 0.0);
  key(0, 1) = 1.0;
  Matrix value(1, d, std::vector<double>{0.5, -1.25, 2.0, 3.0});
  const double eps = 1e-6;
  mem_write(slow, state, key, value, 1.0, 1.0);
  const Vector m = mem_read(slow, state, key.row(0), eps);
  double worst = 0.0;
  for (std::size_t c = 0; c < d; ++c) worst = std::max(worst, std::abs(m[c] - value(0, c) / (1.0 + eps)));
  return over("readout deviation", worst, 1e-9);
}

std::string entropy_bounds() {
  const Vector uniform(16, 1.0 / 16.0);
  Vector one_hot(16, 0.0);
  one_hot[3] = 1.0;
  const double hu = normalized_entropy(uniform);
  const double ho = normalized_entropy(one_hot);
  if (std::abs(hu - 1.0) > 1e-9) return "uniform entropy " + std::to_string(hu);
  if (std::abs(ho) > 1e-9) return "one-hot entropy " + std::to_string(ho);
  return {};
}

std::string weights_round_trip() {
  Rng rng(21);
  std::vector<IndexerParams> idx;
  idx.push_back(IndexerParams::init(IndexerShape::for_layout(HeadLayout{}), rng));
  std::vector<MemorySlowWeights> mem;
  mem.push_back(MemorySlowWeights::init(64, 8, rng));
  WeightsContainer box;
  store_indexer(box, idx);
  store_memory(box, mem);
  const std::string bytes = box.serialize();
  if (WeightsContainer::deserialize(bytes).serialize() != bytes) return "bytes changed on reload";
  return {};
}

std::string config_round_trip() {
  const ExperimentConfig c = parse_config(R"({"version": 1})");
  const ExperimentConfig again = parse_config(canonical_json(c));
  if (config_hash(c) != config_hash(again)) return "hash changed after round trip";
  return {};
}

}  // namespace

std::vector<SelfTestCheck> selftest_checks() {
  return {
      check("attention_reference", attention_reference),
      check("decode_matches_forward", decode_matches_forward),
      check("streaming_kl_blocks", streaming_kl_blocks),
      check("compaction_equals_mask", compaction_equals_mask),
      check("sinks_survive", sinks_survive),
      check("memory_one_hot", memory_one_hot),
      check("entropy_bounds", entropy_bounds),
      check("weights_round_trip", weights_round_trip),
      check("config_round_trip", config_round_trip),
  };
}

bool run_selftest(std::ostream& out) {
  bool ok = true;
  for (const SelfTestCheck& c : selftest_checks()) {
    if (c.passed) {
      out << "PASS " << c.name << "\n";
    } else {
      out << "FAIL " << c.name << ": " << c.detail << "\n";
      ok = false;
    }
  }
  return ok;
}

}  // namespace kvgate

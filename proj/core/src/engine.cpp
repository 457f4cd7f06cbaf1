// SPDX-License-Identifier: Apache-2.0
#include "kvgate/engine.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "kvgate/numeric.hpp"

namespace kvgate {

namespace {

std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

Matrix head_rows(const Matrix& m, std::size_t n) {
  if (n == m.rows()) return m;
  if (n > m.rows()) throw std::out_of_range("prefix longer than trace");
  return m.gather_rows(iota_rows(n));
}

QueryWindow window_of(const Matrix& q, std::size_t begin, std::size_t end) {
  QueryWindow w;
  w.q = Matrix(0, q.cols());
  for (std::size_t s = begin; s < end; ++s) {
    w.q.append_row(q.row(s));
    w.positions.push_back(s);
  }
  return w;
}

void write_evicted(const MemorySlowWeights& slow, MemoryState& state,
                   const std::vector<EvictedRow>& rows, const HeadLayout& layout,
                   const MemoryConfig& config) {
  Matrix keys(0, layout.d_model());
  Matrix values(0, layout.d_model());
  for (const EvictedRow& r : rows) {
    keys.append_row(expand_key_row(r.key, layout));
    values.append_row(expand_value_row(r.value, layout, config.values));
  }
  mem_write(slow, state, keys, values, config.decay, config.write_scale);
}

}  // namespace

void EvictionConfig::validate() const {
  policy.validate();
  plan.validate();
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("aggregation: gamma must lie in [0, 1]");
  if (prob.mode == ProbMode::kSoftmax && !(prob.temperature > 0.0)) {
    throw std::invalid_argument("aggregation: temperature must be positive");
  }
  if (reuse_group == 0) throw std::invalid_argument("reuse: group size must be positive");
}

KeepPlan plan_keep_sets(std::size_t n_layers, const EvictionConfig& config,
                        const LayerScoreFn& score, const LayerSelectFn& select) {
  KeepPlan out;
  out.keep.resize(n_layers);
  out.scores.resize(n_layers);
  if (n_layers == 0) return out;
  const auto sources = index_reuse_plan(n_layers, config.reuse_group);
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (sources[l] != l) continue;
    out.scores[l] = score(l);
    ++out.score_evaluations;
  }
  if (config.aggregation != AggregationMode::kNone) {
    LayerScoreBundle bundle;
    for (std::size_t l = 0; l < n_layers; ++l) {
      if (sources[l] == l) bundle.scores.push_back(out.scores[l]);
    }
    Vector shared;
    if (config.aggregation == AggregationMode::kLayerMean) {
      shared = running_mean(bundle);
    } else {
      const auto dir = config.aggregation == AggregationMode::kEntSkipHigh
                           ? EntropyDirection::kSkipHigh
                           : EntropyDirection::kSkipLow;
      GatedMean gated = entropy_gated_mean(bundle, config.gamma, config.prob, dir);
      out.aggregation_fallback = gated.fallback;
      shared = std::move(gated.scores);
    }
    const auto keep = select(0, shared);
    for (std::size_t l = 0; l < n_layers; ++l) {
      out.keep[l] = keep;
      out.scores[l] = shared;
    }
    return out;
  }
  for (std::size_t l = 0; l < n_layers; ++l) {
    if (sources[l] == l) {
      out.keep[l] = select(l, out.scores[l]);
    } else {
      out.keep[l] = out.keep[sources[l]];
      out.scores[l] = out.scores[sources[l]];
    }
  }
  return out;
}

Vector prefill_scores(const LayerTrace& trace, std::size_t prompt_len, const HeadLayout& layout,
                      const PolicySpec& policy, const IndexerParams* indexer, Rng& rng) {
  if (prompt_len == 0 || prompt_len > trace.x.rows()) {
    throw std::invalid_argument("prefill scores: bad prompt length");
  }
  const Matrix keys = head_rows(trace.k, prompt_len);
  const auto positions = iota_rows(prompt_len);
  switch (policy.kind) {
    case PolicyKind::kSnapKv: {
      const std::size_t w = std::min(policy.window, prompt_len);
      return sum_heads(score_snapkv_heads(window_of(trace.q, prompt_len - w, prompt_len), keys,
                                          positions, layout, policy.pooling));
    }
    case PolicyKind::kTova:
      return score_tova(window_of(trace.q, prompt_len - 1, prompt_len), keys, positions, layout);
    case PolicyKind::kKnorm:
      return score_knorm(keys, layout);
    case PolicyKind::kIndexer: {
      if (indexer == nullptr) throw std::invalid_argument("indexer policy needs indexer weights");
      const Matrix x = head_rows(trace.x, prompt_len);
      const Matrix q_pre = head_rows(trace.q_pre, prompt_len);
      return indexer_importance(*indexer, x, q_pre, {}, prompt_len, 64, 64).imp;
    }
    case PolicyKind::kRandom:
      return score_random(prompt_len, rng);
  }
  throw std::invalid_argument("unknown policy");
}

KeepPlan prefill_keep_plan(const std::vector<LayerTrace>& traces, std::size_t prompt_len,
                           const HeadLayout& layout, const EvictionConfig& config,
                           const std::vector<IndexerParams>* indexer, Rng& rng) {
  if (indexer != nullptr && indexer->size() < traces.size()) {
    throw std::invalid_argument("prefill: fewer indexers than layers");
  }
  const auto positions = iota_rows(prompt_len);
  auto score = [&](std::size_t l) {
    Rng layer_rng = rng.split(l);
    return prefill_scores(traces[l], prompt_len, layout, config.policy,
                          indexer != nullptr ? &(*indexer)[l] : nullptr, layer_rng);
  };
  auto select = [&](std::size_t, const Vector& s) {
    return select_by_ratio(s, positions, config.plan);
  };
  return plan_keep_sets(traces.size(), config, score, select);
}

LayerCache compact_layer(const TeacherModel& teacher, std::size_t layer, const Matrix& x,
                         std::span<const std::size_t> keep_rows, const CompressionPlan& plan,
                         std::vector<EvictedRow>* evicted) {
  LayerCache cache(teacher.layout(), plan.sink_count, plan.local_window);
  for (std::size_t s = 0; s < x.rows(); ++s) {
    const RowProjection p = teacher.project_row(layer, x.row(s), s);
    cache.append_row(p.k, p.v, s);
  }
  auto out = cache.compact(keep_rows);
  if (evicted) *evicted = std::move(out);
  return cache;
}

LayerCache pre_evict_layer(const TeacherModel& teacher, std::size_t layer, const Matrix& x,
                           const IndexerParams& params, const CompressionPlan& plan,
                           std::vector<EvictedRow>* evicted) {
  const HeadLayout layout = teacher.layout();
  // Only the query path is needed to score.
  Matrix q_pre(x.rows(), layout.d_model());
  const TeacherLayer& w = teacher.layer(layer);
  for (std::size_t s = 0; s < x.rows(); ++s) {
    Vector h = rmsnorm(x.row(s));
    for (std::size_t i = 0; i < h.size(); ++i) h[i] *= w.attn_norm[i];
    const Vector q = vecmat(h, w.w_q);
    std::copy(q.begin(), q.end(), q_pre.row(s).begin());
  }
  const auto keep = pre_evict(params, x, q_pre, plan);
  LayerCache cache(layout, plan.sink_count, plan.local_window);
  if (evicted) evicted->clear();
  std::size_t next = 0;
  for (std::size_t s = 0; s < x.rows(); ++s) {
    const RowProjection p = teacher.project_row(layer, x.row(s), s);
    if (next < keep.size() && keep[next] == s) {
      cache.append_row(p.k, p.v, s);
      ++next;
    } else if (evicted) {
      evicted->push_back(EvictedRow{s, p.k, p.v});
    }
  }
  return cache;
}

MemoryEpisode build_episode(const LayerTrace& trace, std::size_t prompt_len,
                            std::span<const std::size_t> keep_rows, const HeadLayout& layout,
                            ValueAggregation values) {
  const std::size_t n = trace.x.rows();
  if (prompt_len > n) throw std::invalid_argument("episode: prompt longer than trace");
  std::vector<char> kept(prompt_len, 0);
  for (std::size_t r : keep_rows) {
    if (r >= prompt_len) throw std::out_of_range("episode: keep row outside prompt");
    kept[r] = 1;
  }
  MemoryEpisode episode;
  MemoryStep step;
  step.keys = Matrix(0, layout.d_model());
  step.values = Matrix(0, layout.d_model());
  Matrix keys(0, layout.kv_width());
  Matrix vals(0, layout.kv_width());
  for (std::size_t t = 0; t < prompt_len; ++t) {
    if (kept[t]) {
      keys.append_row(trace.k.row(t));
      vals.append_row(trace.v.row(t));
    } else {
      step.keys.append_row(expand_key_row(trace.k.row(t), layout));
      step.values.append_row(expand_value_row(trace.v.row(t), layout, values));
    }
  }
  for (std::size_t s = prompt_len; s < n; ++s) {
    keys.append_row(trace.k.row(s));
    vals.append_row(trace.v.row(s));
    const Vector o_attn = attend(trace.q.row(s), keys, vals, layout);
    MemoryRead read;
    read.q.assign(trace.q_pre.row(s).begin(), trace.q_pre.row(s).end());
    read.residual.resize(o_attn.size());
    for (std::size_t c = 0; c < o_attn.size(); ++c) read.residual[c] = trace.o_full(s, c) - o_attn[c];
    step.reads.push_back(std::move(read));
  }
  episode.steps.push_back(std::move(step));
  return episode;
}

double policy_kl(const LayerTrace& trace, std::size_t prompt_len, const HeadLayout& layout,
                 std::span<const double> policy_scores, std::size_t sink_count) {
  if (policy_scores.size() != prompt_len) throw std::invalid_argument("policy kl: length mismatch");
  const Vector teacher = teacher_pooled_importance(head_rows(trace.q, prompt_len),
                                                   head_rows(trace.k, prompt_len), layout, {},
                                                   64, 64);
  return pooled_kl(teacher, policy_scores, sink_count);
}

DecodeSession::DecodeSession(const TeacherModel& teacher, const EvictionConfig& config,
                             const std::vector<IndexerParams>* indexer,
                             const std::vector<MemorySlowWeights>* memory,
                             const MemoryConfig& memory_config, bool compress)
    : teacher_(teacher),
      config_(config),
      indexer_(indexer),
      memory_(memory),
      memory_config_(memory_config),
      compress_(compress),
      layout_(teacher.layout()),
      cache_(teacher.n_layers(), teacher.layout(), config.plan.sink_count,
             config.plan.local_window),
      rng_(config.policy.seed) {
  config_.validate();
  const std::size_t n = teacher.n_layers();
  if (config_.policy.kind == PolicyKind::kIndexer) {
    if (indexer_ == nullptr || indexer_->size() < n) {
      throw std::invalid_argument("decode: indexer policy needs one indexer per layer");
    }
    for (std::size_t l = 0; l < n; ++l) index_keys_.emplace_back((*indexer_)[l].shape.dim);
  }
  if (memory_ != nullptr) {
    if (memory_->size() < n) throw std::invalid_argument("decode: one memory per layer required");
    memory_config_.validate();
    for (std::size_t l = 0; l < n; ++l) {
      states_.emplace_back((*memory_)[l].d_mem(), (*memory_)[l].d_model());
    }
  }
  writes_.assign(n, 0);
  interval_.resize(n);
  for (IntervalQueries& iq : interval_) {
    iq.post_rope.q = Matrix(0, layout_.d_model());
    iq.x = Matrix(0, layout_.d_model());
    iq.q_pre = Matrix(0, layout_.d_model());
  }
}

Matrix DecodeSession::prefill(const Matrix& x0) {
  if (position_ != 0) throw std::logic_error("decode: prefill after tokens were processed");
  const auto traces = teacher_.forward(x0);
  const std::size_t n = x0.rows();
  const auto positions = iota_rows(n);
  for (std::size_t l = 0; l < traces.size(); ++l) {
    const LayerTrace& tr = traces[l];
    cache_.append(l, tr.k, tr.v, positions);
    if (!index_keys_.empty()) {
      for (std::size_t s = 0; s < n; ++s) {
        index_keys_[l].append(indexer_key((*indexer_)[l], tr.x.row(s)), s);
      }
    }
    IntervalQueries& iq = interval_[l];
    for (std::size_t s = 0; s < n; ++s) {
      iq.post_rope.q.append_row(tr.q.row(s));
      iq.post_rope.positions.push_back(s);
      iq.x.append_row(tr.x.row(s));
      iq.q_pre.append_row(tr.q_pre.row(s));
    }
  }
  position_ = n;
  if (compress_) compress();
  return traces.empty() ? x0 : traces.back().out;
}

Vector DecodeSession::step(std::span<const double> x0_row) {
  Vector h(x0_row.begin(), x0_row.end());
  for (std::size_t l = 0; l < teacher_.n_layers(); ++l) {
    const RowProjection p = teacher_.project_row(l, h, position_);
    LayerCache& cache = cache_.layer(l);
    cache.append_row(p.k, p.v, position_);
    if (!index_keys_.empty()) index_keys_[l].append(indexer_key((*indexer_)[l], h), position_);
    IntervalQueries& iq = interval_[l];
    iq.post_rope.q.append_row(p.q);
    iq.post_rope.positions.push_back(position_);
    iq.x.append_row(h);
    iq.q_pre.append_row(p.q_pre);
    Vector attn = attend(p.q, cache.keys(), cache.values(), layout_);
    if (memory_ != nullptr && writes_[l] > 0) {
      attn = fuse(attn, p.q_pre, (*memory_)[l], states_[l], memory_config_.eps);
    }
    h = teacher_.finish_row(l, h, attn);
  }
  ++position_;
  ++steps_;
  last_compressed_ = false;
  if (compress_ && steps_ % config_.plan.interval == 0) compress();
  return h;
}

std::size_t DecodeSession::kept() const {
  std::size_t k = 0;
  for (std::size_t l = 0; l < cache_.n_layers(); ++l) k = std::max(k, cache_.layer(l).size());
  return k;
}

const MemoryState* DecodeSession::memory_state(std::size_t layer) const {
  return states_.empty() ? nullptr : &states_.at(layer);
}

MemoryAccounting DecodeSession::accounting() const {
  MemoryAccounting a;
  a.kv_bytes = cache_.bytes();
  for (const IndexerKeyCache& c : index_keys_) a.indexer_key_bytes += c.bytes();
  for (const MemoryState& s : states_) a.memory_bytes += s.bytes();
  return a;
}

Vector DecodeSession::layer_scores(std::size_t layer) {
  const LayerCache& cache = cache_.layer(layer);
  const IntervalQueries& iq = interval_[layer];
  const auto& positions = cache.positions();
  switch (config_.policy.kind) {
    case PolicyKind::kSnapKv:
      return score_snapkv(iq.post_rope, config_.policy.window, cache.keys(), positions, layout_,
                          config_.policy.pooling);
    case PolicyKind::kTova:
      return score_tova(iq.post_rope, cache.keys(), positions, layout_);
    case PolicyKind::kKnorm:
      return score_knorm(cache.keys(), layout_);
    case PolicyKind::kIndexer: {
      const IndexerParams& params = (*indexer_)[layer];
      const IndexerQueries queries =
          indexer_queries_from_rows(params, iq.x, iq.q_pre, iq.post_rope.positions);
      const Matrix keys = index_keys_[layer].lookup(positions);
      const Matrix a = score_block(params.shape, queries, keys, positions);
      return pooled_importance(a, iota_rows(a.rows()));
    }
    case PolicyKind::kRandom:
      return score_random(cache.size(), rng_);
  }
  throw std::invalid_argument("unknown policy");
}

void DecodeSession::route_evicted(std::size_t layer, std::vector<EvictedRow>&& rows) {
  evicted_total_ += rows.size();
  if (memory_ != nullptr) {
    write_evicted((*memory_)[layer], states_[layer], rows, layout_, memory_config_);
    ++writes_[layer];
  }
}

void DecodeSession::compress() {
  bool over = false;
  for (std::size_t l = 0; l < cache_.n_layers(); ++l) {
    over = over || cache_.layer(l).size() > config_.plan.budget;
  }
  if (!over) return;
  auto score = [this](std::size_t l) { return layer_scores(l); };
  auto select = [this](std::size_t l, const Vector& s) {
    return select_by_budget(s, cache_.layer(l).positions(), config_.plan);
  };
  const KeepPlan plan = plan_keep_sets(cache_.n_layers(), config_, score, select);
  score_evaluations_ += plan.score_evaluations;
  for (std::size_t l = 0; l < cache_.n_layers(); ++l) {
    route_evicted(l, cache_.compact(l, plan.keep[l]));
    IntervalQueries& iq = interval_[l];
    iq.post_rope.q = Matrix(0, layout_.d_model());
    iq.post_rope.positions.clear();
    iq.x = Matrix(0, layout_.d_model());
    iq.q_pre = Matrix(0, layout_.d_model());
  }
  last_compressed_ = true;
}

std::vector<DecodeStepRecord> simulate_decode(const TeacherModel& teacher, const Matrix& prompt,
                                              std::size_t steps, const EvictionConfig& config,
                                              const std::vector<IndexerParams>* indexer,
                                              const std::vector<MemorySlowWeights>* memory,
                                              const MemoryConfig& memory_config,
                                              MemoryAccounting* final_accounting) {
  DecodeSession reference(teacher, config, indexer, nullptr, memory_config, false);
  DecodeSession compressed(teacher, config, indexer, memory, memory_config, true);
  const Matrix ref_out = reference.prefill(prompt);
  compressed.prefill(prompt);
  std::vector<DecodeStepRecord> records;
  records.reserve(steps);
  Vector input = rmsnorm(ref_out.row(ref_out.rows() - 1));
  for (std::size_t i = 0; i < steps; ++i) {
    const Vector h_ref = reference.step(input);
    const Vector h_cmp = compressed.step(input);
    DecodeStepRecord rec;
    rec.step = i + 1;
    rec.kept = compressed.kept();
    rec.compressed = compressed.last_step_compressed();
    rec.evicted_total = compressed.evicted_total();
    rec.error = squared_distance(h_ref, h_cmp) / static_cast<double>(h_ref.size());
    records.push_back(rec);
    input = rmsnorm(h_ref);
  }
  if (final_accounting) *final_accounting = compressed.accounting();
  return records;
}

}  // namespace kvgate

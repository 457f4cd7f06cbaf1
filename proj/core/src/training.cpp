// SPDX-License-Identifier: Apache-2.0
#include "kvgate/training.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "kvgate/errors.hpp"
#include "kvgate/numeric.hpp"

namespace kvgate {

namespace {

void check_finite(double loss, std::size_t step, const char* what) {
  if (!std::isfinite(loss)) {
    throw DivergenceError(std::string(what) + ": non-finite loss at step " + std::to_string(step));
  }
}

template <typename T>
std::vector<std::span<double>> flat_params(std::vector<T>& items) {
  std::vector<std::span<double>> out;
  for (T& item : items) {
    for (auto s : item.tensors()) out.push_back(s);
  }
  return out;
}

template <typename T>
std::vector<std::span<const double>> flat_grads(const std::vector<T>& items) {
  std::vector<std::span<const double>> out;
  for (const T& item : items) {
    for (auto s : item.tensors()) out.push_back(s);
  }
  return out;
}

}  // namespace

double WsdSchedule::lr(std::size_t step) const {
  if (step < warmup) {
    return peak_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (step < warmup + stable) return peak_lr;
  const std::size_t i = step - warmup - stable;
  if (decay == 0 || i >= decay) return final_lr;
  const double frac = static_cast<double>(i + 1) / static_cast<double>(decay);
  return peak_lr + (final_lr - peak_lr) * frac;
}

void WsdSchedule::validate() const {
  if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw std::invalid_argument("schedule: peak lr must be positive");
  if (!(final_lr >= 0.0) || final_lr > peak_lr) {
    throw std::invalid_argument("schedule: final lr must lie in [0, peak]");
  }
}

double global_norm(const std::vector<std::span<const double>>& grads) {
  double sq = 0.0;
  for (auto g : grads) sq += squared_norm(g);
  return std::sqrt(sq);
}

double clipped_sgd_step(const std::vector<std::span<double>>& params,
                        const std::vector<std::span<const double>>& grads, double lr,
                        double max_norm) {
  if (params.size() != grads.size()) throw std::invalid_argument("sgd: tensor count mismatch");
  const double norm = global_norm(grads);
  const double scale = (max_norm > 0.0 && norm > max_norm) ? max_norm / norm : 1.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].size() != grads[i].size()) throw std::invalid_argument("sgd: tensor size mismatch");
    axpy(-lr * scale, grads[i], params[i]);
  }
  return norm;
}

void DataConfig::validate() const {
  if (prompt_len == 0) throw std::invalid_argument("data: prompt length must be positive");
  PlantedConfig p = planted;
  p.length = prompt_len;
  p.validate();
}

Sequence make_sequence(const TeacherModel& teacher, const DataConfig& data, DataSplit split,
                       std::size_t index) {
  PlantedConfig planted = data.planted;
  planted.length = data.prompt_len;
  Rng rng = Rng(data.seed).split((static_cast<std::uint64_t>(split) << 32) + index);
  PlantedSample sample = planted_sample(teacher, planted, rng);
  Sequence seq;
  seq.needles = std::move(sample.needles);
  seq.x0 = std::move(sample.x0);
  const std::size_t dm = teacher.config().d_model;
  for (std::size_t s = 0; s < data.continuation; ++s) {
    Vector row(dm);
    for (double& v : row) v = rng.normal();
    seq.x0.append_row(row);
  }
  return seq;
}

std::vector<std::vector<IndexerSample>> make_indexer_samples(const TeacherModel& teacher,
                                                             const std::vector<Sequence>& data,
                                                             std::size_t prompt_len) {
  std::vector<std::vector<IndexerSample>> out;
  out.reserve(data.size());
  std::vector<std::size_t> rows(prompt_len);
  for (std::size_t i = 0; i < prompt_len; ++i) rows[i] = i;
  for (const Sequence& seq : data) {
    const Matrix prompt = seq.x0.rows() == prompt_len ? seq.x0 : seq.x0.gather_rows(rows);
    const auto traces = teacher.forward(prompt);
    std::vector<IndexerSample> layers;
    for (const LayerTrace& tr : traces) {
      IndexerSample s;
      s.x = tr.x;
      s.q_pre = tr.q_pre;
      s.teacher_imp = teacher_pooled_importance(tr.q, tr.k, teacher.layout(), {}, 64, 64);
      layers.push_back(std::move(s));
    }
    out.push_back(std::move(layers));
  }
  return out;
}

double mean_indexer_loss(const std::vector<IndexerParams>& params,
                         const std::vector<std::vector<IndexerSample>>& samples,
                         std::size_t sink_count) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : samples) {
    for (std::size_t l = 0; l < seq.size(); ++l) {
      const IndexerSample& s = seq[l];
      total += distill_loss_with_teacher(params.at(l), s.x, s.q_pre, s.teacher_imp, sink_count, {})
                   .loss;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

TrainCurve train_indexer(std::vector<IndexerParams>& params,
                         const std::vector<std::vector<IndexerSample>>& samples,
                         const IndexerTrainOptions& options) {
  options.schedule.validate();
  TrainCurve curve;
  const std::size_t steps = options.schedule.total_steps();
  if (steps == 0) return curve;
  if (samples.empty()) throw std::invalid_argument("train indexer: no samples");
  for (std::size_t step = 0; step < steps; ++step) {
    const auto& seq = samples[step % samples.size()];
    if (seq.size() > params.size()) throw std::invalid_argument("train indexer: layer count");
    std::vector<IndexerParams> grads;
    double loss = 0.0;
    for (std::size_t l = 0; l < seq.size(); ++l) {
      double layer_loss = 0.0;
      grads.push_back(distill_gradients(params[l], seq[l].x, seq[l].q_pre, seq[l].teacher_imp,
                                        options.sink_count, {}, &layer_loss));
      loss += layer_loss;
    }
    loss /= static_cast<double>(seq.size());
    check_finite(loss, step, "indexer training");
    const double inv = 1.0 / static_cast<double>(seq.size());
    for (IndexerParams& g : grads) {
      for (auto t : g.tensors()) {
        for (double& v : t) v *= inv;
      }
    }
    const double lr = options.schedule.lr(step);
    const double norm = clipped_sgd_step(flat_params(params), flat_grads(grads), lr, options.clip);
    curve.loss.push_back(loss);
    curve.lr.push_back(lr);
    curve.grad_norm.push_back(norm);
  }
  return curve;
}

std::vector<MemorySample> make_memory_samples(const TeacherModel& teacher,
                                              const std::vector<Sequence>& data,
                                              std::size_t prompt_len) {
  std::vector<MemorySample> out;
  out.reserve(data.size());
  std::vector<std::size_t> rows(prompt_len);
  for (std::size_t i = 0; i < prompt_len; ++i) rows[i] = i;
  for (const Sequence& seq : data) {
    MemorySample sample;
    sample.traces = teacher.forward(seq.x0);
    for (const LayerTrace& tr : sample.traces) {
      IndexerSample s;
      s.x = tr.x.gather_rows(rows);
      s.q_pre = tr.q_pre.gather_rows(rows);
      s.teacher_imp = teacher_pooled_importance(tr.q.gather_rows(rows), tr.k.gather_rows(rows),
                                                teacher.layout(), {}, 64, 64);
      sample.indexer.push_back(std::move(s));
    }
    out.push_back(std::move(sample));
  }
  return out;
}

std::vector<MemoryEpisode> build_episodes(const std::vector<LayerTrace>& traces,
                                          std::size_t prompt_len, const HeadLayout& layout,
                                          const EvictionConfig& eviction,
                                          const std::vector<IndexerParams>* indexer,
                                          ValueAggregation values, std::uint64_t seed) {
  Rng rng(seed);
  const KeepPlan plan = prefill_keep_plan(traces, prompt_len, layout, eviction, indexer, rng);
  std::vector<MemoryEpisode> out;
  out.reserve(traces.size());
  for (std::size_t l = 0; l < traces.size(); ++l) {
    out.push_back(build_episode(traces[l], prompt_len, plan.keep[l], layout, values));
  }
  return out;
}

TrainCurve train_memory(std::vector<MemorySlowWeights>& memory,
                        std::vector<IndexerParams>& indexer,
                        const std::vector<MemorySample>& samples, std::size_t prompt_len,
                        const HeadLayout& layout, const MemoryTrainOptions& options) {
  options.schedule.validate();
  options.memory.validate();
  TrainCurve curve;
  const std::size_t steps = options.schedule.total_steps();
  if (steps == 0) return curve;
  if (samples.empty()) throw std::invalid_argument("train memory: no samples");
  const bool uses_indexer = options.eviction.policy.kind == PolicyKind::kIndexer;
  const bool joint = options.train_indexer && !indexer.empty();
  const bool episodes_fixed = !(joint && uses_indexer);
  const std::vector<IndexerParams>* idx = indexer.empty() ? nullptr : &indexer;

  std::vector<std::vector<MemoryEpisode>> cached;
  if (episodes_fixed) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      cached.push_back(build_episodes(samples[i].traces, prompt_len, layout, options.eviction, idx,
                                      options.memory.values, options.eviction.policy.seed + i));
    }
  }

  for (std::size_t step = 0; step < steps; ++step) {
    const std::size_t i = step % samples.size();
    const MemorySample& sample = samples[i];
    std::vector<MemoryEpisode> fresh;
    if (!episodes_fixed) {
      fresh = build_episodes(sample.traces, prompt_len, layout, options.eviction, idx,
                             options.memory.values, options.eviction.policy.seed + i);
    }
    const std::vector<MemoryEpisode>& episodes = episodes_fixed ? cached[i] : fresh;
    if (episodes.size() > memory.size()) throw std::invalid_argument("train memory: layer count");

    std::vector<MemorySlowWeights> grads;
    double loss = 0.0;
    for (std::size_t l = 0; l < episodes.size(); ++l) {
      double layer_loss = 0.0;
      grads.push_back(memory_gradients(memory[l], episodes[l], options.memory, &layer_loss));
      loss += layer_loss;
    }
    const double inv = 1.0 / static_cast<double>(episodes.size());
    loss *= inv;
    check_finite(loss, step, "memory training");
    for (MemorySlowWeights& g : grads) {
      for (auto t : g.tensors()) {
        for (double& v : t) v *= inv;
      }
    }
    const double lr = options.schedule.lr(step);
    const double norm = clipped_sgd_step(flat_params(memory), flat_grads(grads), lr, options.clip);

    double aux = 0.0;
    if (joint) {
      std::vector<IndexerParams> igrads;
      for (std::size_t l = 0; l < sample.indexer.size(); ++l) {
        const IndexerSample& s = sample.indexer[l];
        double layer_loss = 0.0;
        igrads.push_back(distill_gradients(indexer[l], s.x, s.q_pre, s.teacher_imp,
                                           options.eviction.plan.sink_count, {}, &layer_loss));
        aux += layer_loss;
      }
      const double iinv = 1.0 / static_cast<double>(sample.indexer.size());
      aux *= iinv;
      check_finite(aux, step, "joint indexer training");
      for (IndexerParams& g : igrads) {
        for (auto t : g.tensors()) {
          for (double& v : t) v *= iinv;
        }
      }
      clipped_sgd_step(flat_params(indexer), flat_grads(igrads), lr * options.joint_indexer_lr_scale,
                       options.clip);
    }
    curve.loss.push_back(loss);
    curve.lr.push_back(lr);
    curve.grad_norm.push_back(norm);
    curve.aux.push_back(aux);
  }
  return curve;
}

}  // namespace kvgate

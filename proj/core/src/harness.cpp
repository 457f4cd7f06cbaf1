// SPDX-License-Identifier: Apache-2.0
#include "kvgate/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <iostream>
#include <ostream>
#include <thread>

#include <json.hpp>
#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "kvgate/engine.hpp"
#include "kvgate/metrics.hpp"
#include "kvgate/selftest.hpp"
#include "kvgate/training.hpp"
#include "kvgate/weights_io.hpp"

namespace kvgate {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

constexpr const char* kIndexerCheckpoint = "indexer.kvgw";
constexpr const char* kMemoryCheckpoint = "memory.kvgw";

spdlog::level::level_enum env_level() {
  const char* raw = std::getenv("KVGATE_LOG");
  if (raw == nullptr || *raw == '\0') return spdlog::level::warn;
  const auto level = spdlog::level::from_str(raw);
  // from_str maps unknown names to off; keep the default instead.
  if (level == spdlog::level::off && std::string(raw) != "off") return spdlog::level::warn;
  return level;
}

std::shared_ptr<spdlog::logger> make_logger(const fs::path& out_dir) {
  auto console = std::make_shared<spdlog::sinks::stderr_sink_mt>();
  console->set_level(env_level());
  std::vector<spdlog::sink_ptr> sinks{console};
  if (!out_dir.empty()) {
    auto file =
        std::make_shared<spdlog::sinks::basic_file_sink_mt>((out_dir / "run.log").string(), false);
    file->set_level(std::min(env_level(), spdlog::level::info));
    sinks.push_back(file);
  }
  auto logger = std::make_shared<spdlog::logger>("kvgate", sinks.begin(), sinks.end());
  logger->set_level(spdlog::level::trace);
  logger->flush_on(spdlog::level::info);
  return logger;
}

fs::path prepare_out_dir(const std::string& dir) {
  fs::path out(dir.empty() ? "out" : dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw IoError("cannot create output directory '" + dir + "'");
  return out;
}

struct Context {
  ExperimentConfig config;
  RecordHeader header;
  fs::path out;
  std::shared_ptr<spdlog::logger> log;
  const CommandOptions* options = nullptr;

  MetricsRecord record(const char* kind) const { return MetricsRecord(header, kind); }
  std::string path(const char* name) const { return (out / name).string(); }
};

std::vector<Sequence> make_split(const TeacherModel& teacher, const DataConfig& data,
                                 DataSplit split, std::size_t count) {
  std::vector<Sequence> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_sequence(teacher, data, split, i));
  return out;
}

std::vector<IndexerParams> init_indexer(const ExperimentConfig& c) {
  const Rng root = Rng(c.seed).split(1);
  std::vector<IndexerParams> out;
  for (std::size_t l = 0; l < c.teacher.n_layers; ++l) {
    Rng rng = root.split(l);
    out.push_back(IndexerParams::init(c.indexer_shape(), rng));
  }
  return out;
}

std::vector<MemorySlowWeights> init_memory(const ExperimentConfig& c) {
  const Rng root = Rng(c.seed).split(2);
  const std::size_t dm = c.teacher.d_model;
  std::vector<MemorySlowWeights> out;
  for (std::size_t l = 0; l < c.teacher.n_layers; ++l) {
    Rng rng = root.split(l);
    out.push_back(MemorySlowWeights::init(dm, c.memory.resolved_d_mem(dm), rng));
  }
  return out;
}

struct Checkpoint {
  std::optional<std::vector<IndexerParams>> indexer;
  std::optional<std::vector<MemorySlowWeights>> memory;
};

Checkpoint load_checkpoint(const ExperimentConfig& c, const std::string& path) {
  Checkpoint out;
  if (path.empty()) return out;
  const WeightsContainer box = WeightsContainer::load(path);
  const std::size_t n = c.teacher.n_layers;
  if (has_indexer(box)) out.indexer = load_indexer(box, c.indexer_shape(), n);
  if (has_memory(box)) {
    const std::size_t dm = c.teacher.d_model;
    out.memory = load_memory(box, dm, c.memory.resolved_d_mem(dm), n);
  }
  return out;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int cmd_train_indexer(const Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const TeacherModel teacher(c.teacher);
  const auto train = make_split(teacher, c.data, DataSplit::kTrain, c.data.train_sequences);
  const auto eval = make_split(teacher, c.data, DataSplit::kEval, c.data.eval_sequences);
  const auto train_samples = make_indexer_samples(teacher, train, c.data.prompt_len);
  const auto eval_samples = make_indexer_samples(teacher, eval, c.data.prompt_len);
  ctx.log->info("train-indexer: {} train / {} eval sequences, {} steps", train.size(), eval.size(),
                c.train.indexer_schedule.total_steps());

  std::vector<IndexerParams> params = init_indexer(c);
  const std::size_t sink = c.eviction.plan.sink_count;
  const double eval_init = mean_indexer_loss(params, eval_samples, sink);

  IndexerTrainOptions options;
  options.schedule = c.train.indexer_schedule;
  options.sink_count = sink;
  options.clip = c.train.indexer_clip;
  const TrainCurve curve = train_indexer(params, train_samples, options);
  const double eval_final = mean_indexer_loss(params, eval_samples, sink);

  MetricsWriter loss(ctx.path("indexer_loss.jsonl"));
  for (std::size_t s = 0; s < curve.loss.size(); ++s) {
    loss.write(ctx.record("step")
                   .set("step", s)
                   .set("loss", curve.loss[s])
                   .set("lr", curve.lr[s])
                   .set("grad_norm", curve.grad_norm[s]));
  }
  MetricsWriter summary(ctx.path("indexer_eval.jsonl"));
  summary.write(ctx.record("summary")
                    .set("steps", curve.loss.size())
                    .set("eval_loss_init", eval_init)
                    .set("eval_loss_final", eval_final)
                    .set("eval_sequences", eval.size()));

  WeightsContainer box;
  store_indexer(box, params);
  box.save(ctx.path(kIndexerCheckpoint));
  ctx.log->info("train-indexer: eval loss {:.6f} -> {:.6f}", eval_init, eval_final);
  return 0;
}

int cmd_train_memory(const Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const std::string& ckpt = ctx.options->checkpoint;
  if (ckpt.empty()) throw IoError("train-memory: --checkpoint with indexer weights is required");
  Checkpoint loaded = load_checkpoint(c, ckpt);
  if (!loaded.indexer) throw IoError("train-memory: checkpoint '" + ckpt + "' has no indexer");
  std::vector<IndexerParams> indexer = std::move(*loaded.indexer);

  const TeacherModel teacher(c.teacher);
  const HeadLayout layout = teacher.layout();
  const std::size_t prompt = c.data.prompt_len;
  const auto train = make_split(teacher, c.data, DataSplit::kTrain, c.data.train_sequences);
  const auto eval = make_split(teacher, c.data, DataSplit::kEval, c.data.eval_sequences);
  const auto train_samples = make_memory_samples(teacher, train, prompt);

  std::vector<MemorySlowWeights> memory = init_memory(c);
  const std::vector<MemorySlowWeights> memory_init = memory;

  MemoryTrainOptions options;
  options.schedule = c.train.memory_schedule;
  options.memory = c.memory;
  options.eviction = c.eviction;
  options.train_indexer = c.train.joint_indexer && !ctx.options->freeze_indexer;
  options.joint_indexer_lr_scale = c.train.joint_indexer_lr_scale;
  options.clip = c.train.memory_clip;
  ctx.log->info("train-memory: {} steps, joint indexer {}", options.schedule.total_steps(),
                options.train_indexer);
  const TrainCurve curve = train_memory(memory, indexer, train_samples, prompt, layout, options);

  double init_loss = 0.0;
  double final_loss = 0.0;
  double no_memory = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    const auto traces = teacher.forward(eval[i].x0);
    const auto episodes = build_episodes(traces, prompt, layout, c.eviction, &indexer,
                                         c.memory.values, c.eviction.policy.seed + i);
    for (std::size_t l = 0; l < episodes.size(); ++l) {
      init_loss += memory_loss(memory_init[l], episodes[l], c.memory);
      final_loss += memory_loss(memory[l], episodes[l], c.memory);
      no_memory += residual_energy(episodes[l]);
      ++count;
    }
  }
  if (count > 0) {
    init_loss /= static_cast<double>(count);
    final_loss /= static_cast<double>(count);
    no_memory /= static_cast<double>(count);
  }

  MetricsWriter loss(ctx.path("memory_loss.jsonl"));
  for (std::size_t s = 0; s < curve.loss.size(); ++s) {
    loss.write(ctx.record("step")
                   .set("step", s)
                   .set("loss", curve.loss[s])
                   .set("lr", curve.lr[s])
                   .set("grad_norm", curve.grad_norm[s])
                   .set("indexer_loss", curve.aux[s]));
  }
  MetricsWriter summary(ctx.path("memory_eval.jsonl"));
  summary.write(ctx.record("summary")
                    .set("steps", curve.loss.size())
                    .set("eval_loss_init", init_loss)
                    .set("eval_loss_final", final_loss)
                    .set("eval_loss_no_memory", no_memory)
                    .set("joint_indexer", options.train_indexer)
                    .set("eval_sequences", eval.size()));

  WeightsContainer box;
  store_indexer(box, indexer);
  store_memory(box, memory);
  box.save(ctx.path(kMemoryCheckpoint));
  ctx.log->info("train-memory: eval loss {:.6f} -> {:.6f} (no memory {:.6f})", init_loss,
                final_loss, no_memory);
  return 0;
}

struct SweepPoint {
  PolicyKind policy;
  double ratio;
};

struct SharedEval {
  std::vector<std::vector<LayerTrace>> eval;    // prompt + continuation
  std::vector<std::vector<LayerTrace>> recall;  // prompt only
  std::vector<std::vector<std::size_t>> needles;
};

MetricsRecord sweep_point(const Context& ctx, const TeacherModel& teacher, const SharedEval& data,
                          const Checkpoint& ckpt, const SweepPoint& point, std::size_t index) {
  const ExperimentConfig& c = ctx.config;
  const HeadLayout layout = teacher.layout();
  const std::size_t prompt = c.data.prompt_len;
  const std::size_t n_layers = teacher.n_layers();
  const double width = static_cast<double>(layout.d_model());
  EvictionConfig ev = c.eviction;
  ev.policy.kind = point.policy;
  ev.plan.ratio = point.ratio;
  const std::vector<IndexerParams>* idx = ckpt.indexer ? &*ckpt.indexer : nullptr;
  const Rng point_rng = Rng(c.seed).split(3).split(index);

  double mse_attn = 0.0;
  double mse_fused = 0.0;
  double kl = 0.0;
  std::size_t fused_better = 0;
  std::size_t kv_bytes = 0;
  std::size_t kept_rows = 0;
  std::size_t evaluations = 0;
  for (std::size_t i = 0; i < data.eval.size(); ++i) {
    Rng rng = point_rng.split(i);
    const auto& traces = data.eval[i];
    const KeepPlan plan = prefill_keep_plan(traces, prompt, layout, ev, idx, rng);
    double seq_attn = 0.0;
    double seq_fused = 0.0;
    for (std::size_t l = 0; l < n_layers; ++l) {
      const MemoryEpisode ep = build_episode(traces[l], prompt, plan.keep[l], layout, c.memory.values);
      seq_attn += residual_energy(ep);
      if (ckpt.memory) seq_fused += memory_loss((*ckpt.memory)[l], ep, c.memory);
      kl += policy_kl(traces[l], prompt, layout, plan.scores[l], ev.plan.sink_count);
    }
    seq_attn /= static_cast<double>(n_layers) * width;
    seq_fused /= static_cast<double>(n_layers) * width;
    mse_attn += seq_attn;
    mse_fused += seq_fused;
    if (seq_fused < seq_attn) ++fused_better;
    if (i == 0) {
      for (const auto& keep : plan.keep) kv_bytes += keep.size() * layout.kv_width() * 2 * sizeof(double);
      kept_rows = plan.keep[0].size();
      evaluations = plan.score_evaluations;
    }
  }
  const double n_eval = static_cast<double>(data.eval.size());
  mse_attn /= n_eval;
  mse_fused /= n_eval;
  kl /= n_eval * static_cast<double>(n_layers);

  double recall = 0.0;
  for (std::size_t j = 0; j < data.recall.size(); ++j) {
    Rng rng = point_rng.split(data.eval.size() + j);
    const KeepPlan plan = prefill_keep_plan(data.recall[j], prompt, layout, ev, idx, rng);
    recall += retention_recall(data.needles[j], plan.keep[0]);
  }
  std::optional<double> mean_recall;
  if (!data.recall.empty()) mean_recall = recall / static_cast<double>(data.recall.size());

  std::size_t indexer_bytes = 0;
  if (point.policy == PolicyKind::kIndexer) {
    indexer_bytes = n_layers * prompt * c.indexer_shape().dim * sizeof(double);
  }
  std::size_t memory_bytes = 0;
  if (ckpt.memory) {
    const std::size_t dm = c.teacher.d_model;
    memory_bytes = n_layers * MemoryState(c.memory.resolved_d_mem(dm), dm).bytes();
  }

  MetricsRecord r = ctx.record("point");
  r.set("policy", std::string(to_string(point.policy)))
      .set("ratio", point.ratio)
      .set("mse_attn", mse_attn)
      .set("recall", mean_recall.value_or(0.0))
      .set("policy_kl", kl)
      .set("kept_rows", kept_rows)
      .set("score_evaluations", evaluations)
      .set("kv_bytes", kv_bytes)
      .set("indexer_key_bytes", indexer_bytes)
      .set("memory_bytes", memory_bytes)
      .set("total_bytes", kv_bytes + indexer_bytes + memory_bytes)
      .set("sequences", data.eval.size())
      .set("recall_sequences", data.recall.size());
  if (ckpt.memory) {
    r.set("mse_fused", mse_fused).set("fused_better_fraction", static_cast<double>(fused_better) / n_eval);
  } else {
    r.set("mse_fused", nullptr).set("fused_better_fraction", nullptr);
  }
  if (!mean_recall) r.set("recall", nullptr);
  return r;
}

int cmd_sweep(const Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  const Checkpoint ckpt = load_checkpoint(c, ctx.options->checkpoint);
  const bool needs_indexer = std::find(c.sweep.policies.begin(), c.sweep.policies.end(),
                                       PolicyKind::kIndexer) != c.sweep.policies.end() ||
                             c.eviction.policy.kind == PolicyKind::kIndexer;
  if (needs_indexer && !ckpt.indexer) {
    throw ConfigError("sweep: the indexer policy needs --checkpoint with indexer weights");
  }
  if (c.data.eval_sequences == 0) throw ConfigError("data.eval_sequences: sweep needs at least one");

  const TeacherModel teacher(c.teacher);
  SharedEval data;
  for (std::size_t i = 0; i < c.data.eval_sequences; ++i) {
    data.eval.push_back(teacher.forward(make_sequence(teacher, c.data, DataSplit::kEval, i).x0));
  }
  std::vector<std::size_t> prompt_rows(c.data.prompt_len);
  for (std::size_t i = 0; i < prompt_rows.size(); ++i) prompt_rows[i] = i;
  for (std::size_t j = 0; j < c.sweep.recall_sequences; ++j) {
    Sequence seq = make_sequence(teacher, c.data, DataSplit::kRecall, j);
    data.recall.push_back(teacher.forward(seq.x0.gather_rows(prompt_rows)));
    data.needles.push_back(std::move(seq.needles));
  }

  std::vector<SweepPoint> points;
  for (PolicyKind p : c.sweep.policies) {
    for (double r : c.sweep.ratios) points.push_back({p, r});
  }
  ctx.log->info("sweep: {} points on {} threads", points.size(), ctx.options->threads);

  std::vector<MetricsRecord> results(points.size());
  std::vector<std::exception_ptr> errors(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        const auto t0 = Clock::now();
        results[i] = sweep_point(ctx, teacher, data, ckpt, points[i], i);
        ctx.log->info("sweep: {} r={} done in {:.2f}s", to_string(points[i].policy),
                      points[i].ratio, seconds_since(t0));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(ctx.options->threads, points.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  MetricsWriter writer(ctx.path("sweep.jsonl"));
  for (const MetricsRecord& r : results) writer.write(r);
  return 0;
}

int cmd_decode_sim(const Context& ctx) {
  const ExperimentConfig& c = ctx.config;
  Checkpoint ckpt = load_checkpoint(c, ctx.options->checkpoint);
  if (c.eviction.policy.kind == PolicyKind::kIndexer && !ckpt.indexer) {
    ctx.log->warn("decode-sim: no indexer checkpoint; scoring with initial indexer weights");
    ckpt.indexer = init_indexer(c);
  }
  const TeacherModel teacher(c.teacher);
  std::vector<std::size_t> prompt_rows(c.data.prompt_len);
  for (std::size_t i = 0; i < prompt_rows.size(); ++i) prompt_rows[i] = i;
  const Matrix prompt =
      make_sequence(teacher, c.data, DataSplit::kEval, 0).x0.gather_rows(prompt_rows);
  const std::vector<IndexerParams>* idx = ckpt.indexer ? &*ckpt.indexer : nullptr;
  const std::vector<MemorySlowWeights>* mem = ckpt.memory ? &*ckpt.memory : nullptr;

  MetricsWriter writer(ctx.path("decode.jsonl"));
  for (std::size_t budget : c.decode.budgets) {
    EvictionConfig ev = c.eviction;
    ev.plan.budget = budget;
    const auto t0 = Clock::now();
    MemoryAccounting acc;
    const auto steps = simulate_decode(teacher, prompt, c.decode.steps, ev, idx, mem, c.memory, &acc);
    const std::size_t bound = budget + ev.plan.interval;
    std::size_t max_kept = 0;
    bool bound_ok = true;
    double error_sum = 0.0;
    for (const DecodeStepRecord& s : steps) {
      const bool ok = s.kept <= bound;
      bound_ok = bound_ok && ok;
      max_kept = std::max(max_kept, s.kept);
      error_sum += s.error;
      writer.write(ctx.record("step")
                       .set("policy", std::string(to_string(ev.policy.kind)))
                       .set("budget", budget)
                       .set("step", s.step)
                       .set("kept", s.kept)
                       .set("compressed", s.compressed)
                       .set("evicted_total", s.evicted_total)
                       .set("error", s.error)
                       .set("bound_ok", ok));
    }
    writer.write(ctx.record("summary")
                     .set("policy", std::string(to_string(ev.policy.kind)))
                     .set("budget", budget)
                     .set("interval", ev.plan.interval)
                     .set("steps", steps.size())
                     .set("max_kept", max_kept)
                     .set("bound_ok", bound_ok)
                     .set("mean_error", steps.empty() ? 0.0 : error_sum / static_cast<double>(steps.size()))
                     .set("final_error", steps.empty() ? 0.0 : steps.back().error)
                     .set("evicted_total", steps.empty() ? std::size_t{0} : steps.back().evicted_total)
                     .set("kv_bytes", acc.kv_bytes)
                     .set("indexer_key_bytes", acc.indexer_key_bytes)
                     .set("memory_bytes", acc.memory_bytes)
                     .set("total_bytes", acc.total()));
    ctx.log->info("decode-sim: budget {} max kept {} in {:.2f}s", budget, max_kept, seconds_since(t0));
  }
  return 0;
}

std::string csv_number(const MetricsRecord& r, const std::string& key) {
  const auto v = r.number(key);
  if (!v) return "";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", *v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

json mean_or_null(const std::vector<MetricsRecord>& rows, const std::string& key) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (auto v = r.number(key)) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) return nullptr;
  return sum / static_cast<double>(n);
}

int cmd_report(const CommandOptions& options, const fs::path& out,
               const std::shared_ptr<spdlog::logger>& log) {
  if (options.inputs.empty()) throw ConfigError("report: at least one metrics file is required");
  std::map<std::string, std::vector<MetricsRecord>> sweep;
  std::map<std::string, std::vector<MetricsRecord>> decode;
  std::size_t total = 0;
  for (const std::string& path : options.inputs) {
    for (MetricsRecord& r : read_metrics(path)) {
      ++total;
      const std::string experiment = r.string("experiment");
      const std::string kind = r.string("record");
      if (experiment == "sweep" && kind == "point") {
        sweep[r.string("policy")].push_back(std::move(r));
      } else if (experiment == "decode-sim" && kind == "summary") {
        decode[r.string("policy")].push_back(std::move(r));
      }
    }
  }
  if (sweep.empty() && decode.empty()) {
    throw IoError("report: inputs hold no sweep points or decode summaries");
  }

  static const std::vector<std::string> kSweepMetrics = {
      "mse_attn", "mse_fused", "recall", "policy_kl", "kv_bytes", "total_bytes"};
  json summary;
  summary["schema"] = kMetricsSchema;
  summary["records_read"] = total;
  summary["policies"] = json::object();
  for (auto& [policy, rows] : sweep) {
    std::stable_sort(rows.begin(), rows.end(), [](const MetricsRecord& a, const MetricsRecord& b) {
      return a.number("ratio").value_or(0.0) < b.number("ratio").value_or(0.0);
    });
    for (const std::string& metric : kSweepMetrics) {
      std::string text = "ratio," + metric + ",config_hash\n";
      for (const auto& r : rows) {
        text += csv_number(r, "ratio") + "," + csv_number(r, metric) + "," +
                r.string("config_hash") + "\n";
      }
      write_text(out / (metric + "_" + policy + ".csv"), text);
    }
    json ratios = json::array();
    for (const auto& r : rows) ratios.push_back(r.number("ratio").value_or(0.0));
    summary["policies"][policy] = {{"points", rows.size()},
                                   {"ratios", ratios},
                                   {"mean_mse_attn", mean_or_null(rows, "mse_attn")},
                                   {"mean_mse_fused", mean_or_null(rows, "mse_fused")},
                                   {"mean_recall", mean_or_null(rows, "recall")},
                                   {"mean_policy_kl", mean_or_null(rows, "policy_kl")}};
  }
  summary["decode"] = json::object();
  for (auto& [policy, rows] : decode) {
    std::stable_sort(rows.begin(), rows.end(), [](const MetricsRecord& a, const MetricsRecord& b) {
      return a.number("budget").value_or(0.0) < b.number("budget").value_or(0.0);
    });
    std::string text = "budget,max_kept,mean_error,final_error,total_bytes,config_hash\n";
    bool all_ok = true;
    for (const auto& r : rows) {
      text += csv_number(r, "budget") + "," + csv_number(r, "max_kept") + "," +
              csv_number(r, "mean_error") + "," + csv_number(r, "final_error") + "," +
              csv_number(r, "total_bytes") + "," + r.string("config_hash") + "\n";
      const auto* ok = std::get_if<bool>(&r.get("bound_ok"));
      all_ok = all_ok && ok != nullptr && *ok;
    }
    write_text(out / ("decode_" + policy + ".csv"), text);
    summary["decode"][policy] = {{"budgets", rows.size()},
                                 {"bound_ok", all_ok},
                                 {"mean_error", mean_or_null(rows, "mean_error")}};
  }
  write_text(out / "summary.json", summary.dump(2) + "\n");
  log->info("report: {} records, {} sweep policies, {} decode policies", total, sweep.size(),
            decode.size());
  return 0;
}

}  // namespace

const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"train-indexer", "train-memory", "sweep",
                                                 "decode-sim",    "report",       "selftest"};
  return names;
}

ExperimentConfig resolve_config(const CommandOptions& options) {
  if (options.config_path.empty()) throw ConfigError("--config is required");
  ExperimentConfig c = load_config(options.config_path);
  if (options.seed) c.seed = *options.seed;
  return c;
}

int run_command(const std::string& name, const CommandOptions& options) {
  const auto& names = command_names();
  if (std::find(names.begin(), names.end(), name) == names.end()) {
    throw ConfigError("unknown command '" + name + "'");
  }
  if (options.threads == 0) throw ConfigError("--threads: must be at least 1");
  const auto t0 = Clock::now();
  if (name == "selftest") {
    if (!options.config_path.empty()) resolve_config(options);
    return run_selftest(std::cout) ? 0 : 1;
  }
  if (name == "report") {
    const fs::path out = prepare_out_dir(options.out_dir);
    auto log = make_logger(out);
    const int rc = cmd_report(options, out, log);
    log->info("report finished in {:.3f}s", seconds_since(t0));
    return rc;
  }

  Context ctx;
  ctx.config = resolve_config(options);
  ctx.header = RecordHeader{name, config_hash(ctx.config), ctx.config.seed};
  ctx.out = prepare_out_dir(options.out_dir);
  ctx.log = make_logger(ctx.out);
  ctx.options = &options;
  ctx.log->info("{} started: config hash {} seed {}", name, ctx.header.config_hash,
                ctx.header.seed);
  int rc = 0;
  if (name == "train-indexer") {
    rc = cmd_train_indexer(ctx);
  } else if (name == "train-memory") {
    rc = cmd_train_memory(ctx);
  } else if (name == "sweep") {
    rc = cmd_sweep(ctx);
  } else {
    rc = cmd_decode_sim(ctx);
  }
  ctx.log->info("{} finished in {:.3f}s", name, seconds_since(t0));
  return rc;
}

std::string error_record(const std::string& kind, const std::string& message, int exit_code) {
  json j;
  j["error"] = {{"kind", kind}, {"message", message}, {"exit_code", exit_code}};
  return j.dump();
}

int run_command_guarded(const std::string& name, const CommandOptions& options, std::ostream& err) {
  try {
    return run_command(name, options);
  } catch (const Error& e) {
    err << error_record(e.kind(), e.what(), e.exit_code()) << "\n";
    return e.exit_code();
  } catch (const std::invalid_argument& e) {
    err << error_record("config", e.what(), 2) << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << error_record("internal", e.what(), 1) << "\n";
    return 1;
  }
}

}  // namespace kvgate

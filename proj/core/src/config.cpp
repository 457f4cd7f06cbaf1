// SPDX-License-Identifier: Apache-2.0
#include "kvgate/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "kvgate/errors.hpp"

namespace kvgate {

namespace {

using json = nlohmann::json;

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* raw(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* key, std::size_t& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        throw ConfigError(where(key) + ": expected a non-negative integer");
      }
      out = v->get<std::size_t>();
    }
  }
  void get_u64(const char* key, std::uint64_t& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        throw ConfigError(where(key) + ": expected a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, double& out) {
    if (const json* v = raw(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, bool& out) {
    if (const json* v = raw(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + ": expected a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = raw(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }

  Section child(const char* key) {
    const json* v = raw(key);
    static const json empty = json::object();
    return Section(v ? *v : empty, where(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where(it.key().c_str()) + ": unknown key");
    }
  }

  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
auto wrap(const std::string& where, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
}

void read_schedule(Section& s, WsdSchedule& out, double& clip) {
  s.get("peak_lr", out.peak_lr);
  s.get("final_lr", out.final_lr);
  s.get("warmup", out.warmup);
  s.get("stable", out.stable);
  s.get("decay", out.decay);
  s.get("clip", clip);
}

json schedule_json(const WsdSchedule& s, double clip) {
  return json{{"peak_lr", s.peak_lr}, {"final_lr", s.final_lr}, {"warmup", s.warmup},
              {"stable", s.stable},   {"decay", s.decay},       {"clip", clip}};
}

}  // namespace

IndexerShape ExperimentConfig::indexer_shape() const {
  return IndexerShape::for_layout(teacher.layout(), indexer.heads, indexer.dim);
}

void ExperimentConfig::validate() const {
  wrap("teacher", [&] { teacher.validate(); });
  wrap("memory", [&] { memory.validate(); });
  wrap("eviction", [&] { eviction.validate(); });
  wrap("train.indexer", [&] { train.indexer_schedule.validate(); });
  wrap("train.memory", [&] { train.memory_schedule.validate(); });
  wrap("data", [&] { data.validate(); });
  if (!(train.joint_indexer_lr_scale >= 0.0)) {
    throw ConfigError("train.memory.joint_indexer_lr_scale: must be non-negative");
  }
  if (teacher.n_layers == 0) throw ConfigError("teacher.n_layers: must be positive");
  if (data.prompt_len <= eviction.plan.sink_count) {
    throw ConfigError("data.prompt_len: must exceed plan.sink_count");
  }
  if (sweep.ratios.empty()) throw ConfigError("sweep.ratios: must not be empty");
  if (sweep.policies.empty()) throw ConfigError("sweep.policies: must not be empty");
  for (double r : sweep.ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("sweep.ratios: entries must lie in [0, 1]");
  }
  if (decode.budgets.empty()) throw ConfigError("decode.budgets: must not be empty");
  for (std::size_t b : decode.budgets) {
    if (b < eviction.plan.sink_count + eviction.plan.local_window) {
      throw ConfigError("decode.budgets: budget must cover sinks and the local window");
    }
  }
}

ExperimentConfig parse_config(std::string_view json_text) {
  json root;
  try {
    root = json::parse(json_text.begin(), json_text.end());
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what());
  }
  ExperimentConfig c;
  Section top(root, "");
  const json* version = top.raw("version");
  if (version == nullptr) throw ConfigError("version: missing");
  if (!version->is_number_integer() || version->get<long long>() != kConfigVersion) {
    throw ConfigError("version: unsupported (expected " + std::to_string(kConfigVersion) + ")");
  }
  top.get_u64("seed", c.seed);

  {
    Section s = top.child("teacher");
    s.get("n_layers", c.teacher.n_layers);
    s.get("d_model", c.teacher.d_model);
    s.get("n_heads", c.teacher.n_heads);
    s.get("n_kv_heads", c.teacher.n_kv_heads);
    s.get("d_ffn", c.teacher.d_ffn);
    s.get("vocab_size", c.teacher.vocab_size);
    s.get("rope_base", c.teacher.rope_base);
    s.get_u64("seed", c.teacher.seed);
    s.finish();
  }
  {
    Section s = top.child("indexer");
    s.get("heads", c.indexer.heads);
    s.get("dim", c.indexer.dim);
    s.finish();
  }
  {
    Section s = top.child("memory");
    s.get("d_mem", c.memory.d_mem);
    s.get("decay", c.memory.decay);
    s.get("write_scale", c.memory.write_scale);
    s.get("eps", c.memory.eps);
    std::string values = std::string(to_string(c.memory.values));
    s.get("values", values);
    c.memory.values = wrap("memory.values", [&] { return parse_value_aggregation(values); });
    s.get("stop_gradient", c.memory.stop_gradient);
    s.finish();
  }
  {
    Section s = top.child("plan");
    CompressionPlan& p = c.eviction.plan;
    s.get("ratio", p.ratio);
    s.get("interval", p.interval);
    if (const json* b = s.raw("budget")) {
      if (b->is_null()) {
        p.budget = kUnlimitedBudget;
      } else if (b->is_number_unsigned() || (b->is_number_integer() && b->get<long long>() >= 0)) {
        p.budget = b->get<std::size_t>();
      } else {
        throw ConfigError("plan.budget: expected a non-negative integer or null");
      }
    }
    s.get("sink_count", p.sink_count);
    s.get("local_window", p.local_window);
    s.finish();
  }
  {
    Section s = top.child("policy");
    std::string name = std::string(to_string(c.eviction.policy.kind));
    s.get("name", name);
    c.eviction.policy.kind = wrap("policy.name", [&] { return parse_policy(name); });
    s.get("window", c.eviction.policy.window);
    s.get_u64("seed", c.eviction.policy.seed);
    std::string pooling = c.eviction.policy.pooling == HeadPooling::kMean ? "mean" : "max";
    s.get("pooling", pooling);
    c.eviction.policy.pooling = wrap("policy.pooling", [&] { return parse_pooling(pooling); });
    s.finish();
  }
  {
    Section s = top.child("agg");
    std::string mode = std::string(to_string(c.eviction.aggregation));
    s.get("mode", mode);
    c.eviction.aggregation = wrap("agg.mode", [&] { return parse_aggregation(mode); });
    s.get("gamma", c.eviction.gamma);
    std::string prob = std::string(to_string(c.eviction.prob.mode));
    s.get("prob", prob);
    c.eviction.prob.mode = wrap("agg.prob", [&] { return parse_prob_mode(prob); });
    s.get("temperature", c.eviction.prob.temperature);
    s.finish();
  }
  {
    Section s = top.child("reuse");
    s.get("group_size", c.eviction.reuse_group);
    s.finish();
  }
  {
    Section s = top.child("train");
    {
      Section i = s.child("indexer");
      read_schedule(i, c.train.indexer_schedule, c.train.indexer_clip);
      i.finish();
    }
    {
      Section m = s.child("memory");
      read_schedule(m, c.train.memory_schedule, c.train.memory_clip);
      m.get("joint_indexer", c.train.joint_indexer);
      m.get("joint_indexer_lr_scale", c.train.joint_indexer_lr_scale);
      m.finish();
    }
    s.finish();
  }
  {
    Section s = top.child("data");
    DataConfig& d = c.data;
    s.get("train_sequences", d.train_sequences);
    s.get("eval_sequences", d.eval_sequences);
    s.get("prompt_len", d.prompt_len);
    s.get("continuation", d.continuation);
    s.get("needles", d.planted.needles);
    s.get("tail", d.planted.tail);
    s.get("needle_cosine", d.planted.needle_cosine);
    s.get("tail_noise", d.planted.tail_noise);
    s.get_u64("seed", d.seed);
    s.finish();
  }
  {
    Section s = top.child("decode");
    s.get("steps", c.decode.steps);
    if (const json* b = s.raw("budgets")) {
      if (!b->is_array()) throw ConfigError("decode.budgets: expected an array");
      c.decode.budgets.clear();
      for (const json& v : *b) {
        if (!v.is_number_unsigned()) throw ConfigError("decode.budgets: expected integers");
        c.decode.budgets.push_back(v.get<std::size_t>());
      }
    }
    s.finish();
  }
  {
    Section s = top.child("sweep");
    if (const json* p = s.raw("policies")) {
      if (!p->is_array()) throw ConfigError("sweep.policies: expected an array");
      c.sweep.policies.clear();
      for (const json& v : *p) {
        if (!v.is_string()) throw ConfigError("sweep.policies: expected strings");
        c.sweep.policies.push_back(
            wrap("sweep.policies", [&] { return parse_policy(v.get<std::string>()); }));
      }
    }
    if (const json* r = s.raw("ratios")) {
      if (!r->is_array()) throw ConfigError("sweep.ratios: expected an array");
      c.sweep.ratios.clear();
      for (const json& v : *r) {
        if (!v.is_number()) throw ConfigError("sweep.ratios: expected numbers");
        c.sweep.ratios.push_back(v.get<double>());
      }
    }
    s.get("recall_sequences", c.sweep.recall_sequences);
    s.finish();
  }
  top.finish();
  c.data.planted.length = c.data.prompt_len;
  c.data.planted.sink_count = c.eviction.plan.sink_count;
  c.data.planted.local_window = c.eviction.plan.local_window;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string canonical_json(const ExperimentConfig& c) {
  json j;
  j["version"] = kConfigVersion;
  j["seed"] = c.seed;
  j["teacher"] = {{"n_layers", c.teacher.n_layers},     {"d_model", c.teacher.d_model},
                  {"n_heads", c.teacher.n_heads},       {"n_kv_heads", c.teacher.n_kv_heads},
                  {"d_ffn", c.teacher.d_ffn},           {"vocab_size", c.teacher.vocab_size},
                  {"rope_base", c.teacher.rope_base},   {"seed", c.teacher.seed}};
  j["indexer"] = {{"heads", c.indexer.heads}, {"dim", c.indexer.dim}};
  j["memory"] = {{"d_mem", c.memory.d_mem},
                 {"decay", c.memory.decay},
                 {"write_scale", c.memory.write_scale},
                 {"eps", c.memory.eps},
                 {"values", std::string(to_string(c.memory.values))},
                 {"stop_gradient", c.memory.stop_gradient}};
  const CompressionPlan& p = c.eviction.plan;
  j["plan"] = {{"ratio", p.ratio},
               {"interval", p.interval},
               {"budget", p.budget == kUnlimitedBudget ? json(nullptr) : json(p.budget)},
               {"sink_count", p.sink_count},
               {"local_window", p.local_window}};
  j["policy"] = {{"name", std::string(to_string(c.eviction.policy.kind))},
                 {"window", c.eviction.policy.window},
                 {"seed", c.eviction.policy.seed},
                 {"pooling", c.eviction.policy.pooling == HeadPooling::kMean ? "mean" : "max"}};
  j["agg"] = {{"mode", std::string(to_string(c.eviction.aggregation))},
              {"gamma", c.eviction.gamma},
              {"prob", std::string(to_string(c.eviction.prob.mode))},
              {"temperature", c.eviction.prob.temperature}};
  j["reuse"] = {{"group_size", c.eviction.reuse_group}};
  json mem = schedule_json(c.train.memory_schedule, c.train.memory_clip);
  mem["joint_indexer"] = c.train.joint_indexer;
  mem["joint_indexer_lr_scale"] = c.train.joint_indexer_lr_scale;
  j["train"] = {{"indexer", schedule_json(c.train.indexer_schedule, c.train.indexer_clip)},
                {"memory", mem}};
  j["data"] = {{"train_sequences", c.data.train_sequences},
               {"eval_sequences", c.data.eval_sequences},
               {"prompt_len", c.data.prompt_len},
               {"continuation", c.data.continuation},
               {"needles", c.data.planted.needles},
               {"tail", c.data.planted.tail},
               {"needle_cosine", c.data.planted.needle_cosine},
               {"tail_noise", c.data.planted.tail_noise},
               {"seed", c.data.seed}};
  j["decode"] = {{"steps", c.decode.steps}, {"budgets", c.decode.budgets}};
  json policies = json::array();
  for (PolicyKind k : c.sweep.policies) policies.push_back(std::string(to_string(k)));
  j["sweep"] = {{"policies", policies},
                {"ratios", c.sweep.ratios},
                {"recall_sequences", c.sweep.recall_sequences}};
  return j.dump();
}

std::string config_hash(const ExperimentConfig& config) {
  const std::string text = canonical_json(config);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace kvgate

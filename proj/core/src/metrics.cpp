// SPDX-License-Identifier: Apache-2.0
#include "kvgate/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include <json.hpp>

#include "kvgate/errors.hpp"

namespace kvgate {

namespace {

using json = nlohmann::json;

json to_json_value(const MetricValue& v) {
  return std::visit(
      [](const auto& x) -> json {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::nullptr_t>) {
          return nullptr;
        } else if constexpr (std::is_same_v<T, double>) {
          if (!std::isfinite(x)) return nullptr;
          return x;
        } else {
          return x;
        }
      },
      v);
}

MetricValue from_json_value(const json& j) {
  switch (j.type()) {
    case json::value_t::null:
      return nullptr;
    case json::value_t::boolean:
      return j.get<bool>();
    case json::value_t::number_integer:
      return j.get<std::int64_t>();
    case json::value_t::number_unsigned:
      return j.get<std::uint64_t>();
    case json::value_t::number_float:
      return j.get<double>();
    case json::value_t::string:
      return j.get<std::string>();
    default:
      return j.dump();
  }
}

}  // namespace

MetricsRecord::MetricsRecord(const RecordHeader& header, std::string kind) {
  set("schema", kMetricsSchema);
  set("experiment", MetricValue(header.experiment));
  set("config_hash", MetricValue(header.config_hash));
  set("seed", MetricValue(header.seed));
  set("record", MetricValue(std::move(kind)));
}

MetricsRecord& MetricsRecord::set(const std::string& key, MetricValue value) {
  fields_[key] = std::move(value);
  return *this;
}

MetricsRecord& MetricsRecord::set_optional(const std::string& key, std::optional<double> value) {
  if (value) return set(key, MetricValue(*value));
  return set(key, MetricValue(nullptr));
}

const MetricValue& MetricsRecord::get(const std::string& key) const {
  auto it = fields_.find(key);
  if (it == fields_.end()) throw std::out_of_range("metrics: missing field '" + key + "'");
  return it->second;
}

std::optional<double> MetricsRecord::number(const std::string& key) const {
  auto it = fields_.find(key);
  if (it == fields_.end()) return std::nullopt;
  return std::visit(
      [](const auto& x) -> std::optional<double> {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, double> || std::is_same_v<T, std::int64_t> ||
                      std::is_same_v<T, std::uint64_t>) {
          return static_cast<double>(x);
        } else {
          return std::nullopt;
        }
      },
      it->second);
}

std::string MetricsRecord::string(const std::string& key) const {
  auto it = fields_.find(key);
  if (it == fields_.end()) return {};
  if (const auto* s = std::get_if<std::string>(&it->second)) return *s;
  return {};
}

std::string MetricsRecord::to_json() const {
  json j = json::object();
  for (const auto& [k, v] : fields_) j[k] = to_json_value(v);
  return j.dump();
}

MetricsRecord MetricsRecord::from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw IoError(std::string("metrics: malformed record: ") + e.what());
  }
  if (!j.is_object()) throw IoError("metrics: record is not an object");
  auto schema = j.find("schema");
  if (schema == j.end() || !schema->is_number_integer() || schema->get<int>() != kMetricsSchema) {
    throw IoError("metrics: schema version mismatch (expected " +
                  std::to_string(kMetricsSchema) + ")");
  }
  MetricsRecord r;
  for (auto it = j.begin(); it != j.end(); ++it) r.fields_[it.key()] = from_json_value(it.value());
  return r;
}

MetricsWriter::MetricsWriter(const std::string& path)
    : out_(path, std::ios::binary | std::ios::trunc), path_(path) {
  if (!out_) throw IoError("cannot write '" + path + "'");
}

void MetricsWriter::write(const MetricsRecord& record) {
  const std::string line = record.to_json() + "\n";
  std::lock_guard<std::mutex> lock(mutex_);
  out_.write(line.data(), static_cast<std::streamsize>(line.size()));
  out_.flush();
  if (!out_) throw IoError("short write to '" + path_ + "'");
  ++count_;
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(MetricsRecord::from_json(line));
  }
  return out;
}

}  // namespace kvgate

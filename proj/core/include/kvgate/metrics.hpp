// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

namespace kvgate {

inline constexpr int kMetricsSchema = 1;

using MetricValue = std::variant<std::nullptr_t, bool, std::int64_t, std::uint64_t, double,
                                 std::string>;

/// Identifies the run every record belongs to.
struct RecordHeader {
  std::string experiment;
  std::string config_hash;
  std::uint64_t seed = 0;
};

/// One JSON-lines record. Keys serialize in sorted order; non-finite doubles
/// become null.
class MetricsRecord {
 public:
  MetricsRecord() = default;
  MetricsRecord(const RecordHeader& header, std::string kind);

  MetricsRecord& set(const std::string& key, MetricValue value);
  template <typename T>
  MetricsRecord& set(const std::string& key, T value) {
    if constexpr (std::is_same_v<T, bool> || std::is_same_v<T, std::nullptr_t>) {
      return set(key, MetricValue(value));
    } else if constexpr (std::is_integral_v<T> && std::is_signed_v<T>) {
      return set(key, MetricValue(static_cast<std::int64_t>(value)));
    } else if constexpr (std::is_integral_v<T>) {
      return set(key, MetricValue(static_cast<std::uint64_t>(value)));
    } else if constexpr (std::is_floating_point_v<T>) {
      return set(key, MetricValue(static_cast<double>(value)));
    } else {
      return set(key, MetricValue(std::string(value)));
    }
  }
  MetricsRecord& set_optional(const std::string& key, std::optional<double> value);

  bool has(const std::string& key) const { return fields_.count(key) != 0; }
  const MetricValue& get(const std::string& key) const;
  /// Numeric field as double; nullopt for null or missing.
  std::optional<double> number(const std::string& key) const;
  std::string string(const std::string& key) const;
  const std::map<std::string, MetricValue>& fields() const { return fields_; }

  std::string to_json() const;
  /// Throws IoError on malformed JSON or a schema other than kMetricsSchema.
  static MetricsRecord from_json(const std::string& line);

 private:
  std::map<std::string, MetricValue> fields_;
};

/// Append-only JSON-lines file; writes from several threads are serialized.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);
  void write(const MetricsRecord& record);
  std::size_t count() const { return count_; }

 private:
  std::mutex mutex_;
  std::ofstream out_;
  std::string path_;
  std::size_t count_ = 0;
};

std::vector<MetricsRecord> read_metrics(const std::string& path);

}  // namespace kvgate

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kvgate/indexer.hpp"
#include "kvgate/memory.hpp"
#include "kvgate/tensor.hpp"

namespace kvgate {

inline constexpr std::uint32_t kWeightsFormatVersion = 1;

struct TensorRecord {
  std::vector<std::size_t> shape;
  Vector data;
};

/// Named f64 tensors. On disk: "KVGW", u32 format version, u64 manifest
/// length, JSON manifest (name -> dtype, shape, offset, bytes), then the
/// little-endian payload. Tensors are stored in name order.
class WeightsContainer {
 public:
  void put(const std::string& name, std::vector<std::size_t> shape, Vector data);
  void put(const std::string& name, const Matrix& m);
  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  const TensorRecord& get(const std::string& name) const;
  Matrix matrix(const std::string& name) const;
  std::vector<std::string> names() const;
  std::size_t size() const { return tensors_.size(); }

  std::string serialize() const;
  static WeightsContainer deserialize(const std::string& bytes);
  void save(const std::string& path) const;
  static WeightsContainer load(const std::string& path);

  bool operator==(const WeightsContainer& other) const;

 private:
  std::map<std::string, TensorRecord> tensors_;
};

void store_indexer(WeightsContainer& box, const std::vector<IndexerParams>& params);
/// Reads idx.{l}.* for every layer; throws IoError on missing or misshaped tensors.
std::vector<IndexerParams> load_indexer(const WeightsContainer& box, const IndexerShape& shape,
                                        std::size_t n_layers);
bool has_indexer(const WeightsContainer& box);

void store_memory(WeightsContainer& box, const std::vector<MemorySlowWeights>& memory);
std::vector<MemorySlowWeights> load_memory(const WeightsContainer& box, std::size_t d_model,
                                           std::size_t d_mem, std::size_t n_layers);
bool has_memory(const WeightsContainer& box);

}  // namespace kvgate

// SPDX-License-Identifier: Apache-2.0
#include "kvgate/weights_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "kvgate/errors.hpp"

namespace kvgate {

namespace {

using json = nlohmann::json;

constexpr char kMagic[4] = {'K', 'V', 'G', 'W'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
  }
}

template <typename T>
T get_le(const std::string& in, std::size_t offset) {
  if (offset + sizeof(T) > in.size()) throw IoError("weights: truncated header");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  }
  return value;
}

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string idx_name(std::size_t l, const char* part) {
  return "idx." + std::to_string(l) + "." + part;
}

std::string mem_name(std::size_t l, const char* part) {
  return "mem." + std::to_string(l) + "." + part;
}

Matrix expect_matrix(const WeightsContainer& box, const std::string& name, std::size_t rows,
                     std::size_t cols) {
  if (!box.has(name)) throw IoError("weights: missing tensor '" + name + "'");
  const TensorRecord& t = box.get(name);
  if (t.shape != std::vector<std::size_t>{rows, cols}) {
    throw IoError("weights: tensor '" + name + "' has unexpected shape");
  }
  return Matrix(rows, cols, t.data);
}

}  // namespace

void WeightsContainer::put(const std::string& name, std::vector<std::size_t> shape, Vector data) {
  if (element_count(shape) != data.size()) {
    throw std::invalid_argument("weights: shape does not match data for '" + name + "'");
  }
  tensors_[name] = TensorRecord{std::move(shape), std::move(data)};
}

void WeightsContainer::put(const std::string& name, const Matrix& m) {
  put(name, {m.rows(), m.cols()}, Vector(m.data().begin(), m.data().end()));
}

const TensorRecord& WeightsContainer::get(const std::string& name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw IoError("weights: missing tensor '" + name + "'");
  return it->second;
}

Matrix WeightsContainer::matrix(const std::string& name) const {
  const TensorRecord& t = get(name);
  if (t.shape.size() != 2) throw IoError("weights: tensor '" + name + "' is not a matrix");
  return Matrix(t.shape[0], t.shape[1], t.data);
}

std::vector<std::string> WeightsContainer::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : tensors_) out.push_back(name);
  return out;
}

std::string WeightsContainer::serialize() const {
  json manifest;
  manifest["format_version"] = kWeightsFormatVersion;
  json entries = json::array();
  std::string payload;
  for (const auto& [name, t] : tensors_) {
    entries.push_back({{"name", name},
                       {"dtype", "f64"},
                       {"shape", t.shape},
                       {"offset", payload.size()},
                       {"bytes", t.data.size() * 8}});
    for (double v : t.data) put_le<std::uint64_t>(payload, std::bit_cast<std::uint64_t>(v));
  }
  manifest["tensors"] = entries;
  const std::string text = manifest.dump();
  std::string out(kMagic, 4);
  put_le<std::uint32_t>(out, kWeightsFormatVersion);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  out += payload;
  return out;
}

WeightsContainer WeightsContainer::deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IoError("weights: bad magic");
  }
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kWeightsFormatVersion) throw IoError("weights: unsupported format version");
  const auto manifest_len = get_le<std::uint64_t>(bytes, 8);
  if (16 + manifest_len > bytes.size()) throw IoError("weights: truncated manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(16, manifest_len));
  } catch (const json::exception& e) {
    throw IoError(std::string("weights: malformed manifest: ") + e.what());
  }
  const std::size_t base = 16 + manifest_len;
  const std::size_t payload = bytes.size() - base;
  WeightsContainer box;
  std::size_t expected_offset = 0;
  try {
    if (manifest.at("format_version").get<std::uint32_t>() != kWeightsFormatVersion) {
      throw IoError("weights: manifest version mismatch");
    }
    for (const json& e : manifest.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      if (e.at("dtype").get<std::string>() != "f64") throw IoError("weights: unsupported dtype");
      const auto shape = e.at("shape").get<std::vector<std::size_t>>();
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("bytes").get<std::size_t>();
      if (offset != expected_offset || nbytes != element_count(shape) * 8 ||
          offset + nbytes > payload) {
        throw IoError("weights: inconsistent offsets for '" + name + "'");
      }
      Vector data(element_count(shape));
      for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = std::bit_cast<double>(get_le<std::uint64_t>(bytes, base + offset + 8 * i));
      }
      box.put(name, shape, std::move(data));
      expected_offset = offset + nbytes;
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("weights: malformed manifest: ") + e.what());
  }
  if (expected_offset != payload) throw IoError("weights: payload length mismatch");
  return box;
}

void WeightsContainer::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path + "'");
  const std::string bytes = serialize();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

WeightsContainer WeightsContainer::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

bool WeightsContainer::operator==(const WeightsContainer& other) const {
  return serialize() == other.serialize();
}

void store_indexer(WeightsContainer& box, const std::vector<IndexerParams>& params) {
  for (std::size_t l = 0; l < params.size(); ++l) {
    box.put(idx_name(l, "u_q"), params[l].u_q);
    box.put(idx_name(l, "u_k"), params[l].u_k);
    box.put(idx_name(l, "g"), params[l].g);
  }
}

std::vector<IndexerParams> load_indexer(const WeightsContainer& box, const IndexerShape& shape,
                                        std::size_t n_layers) {
  std::vector<IndexerParams> out;
  for (std::size_t l = 0; l < n_layers; ++l) {
    IndexerParams p;
    p.shape = shape;
    p.u_q = expect_matrix(box, idx_name(l, "u_q"), shape.heads * shape.dim, shape.query_width);
    p.u_k = expect_matrix(box, idx_name(l, "u_k"), shape.dim, shape.d_model);
    p.g = expect_matrix(box, idx_name(l, "g"), shape.heads, shape.d_model);
    out.push_back(std::move(p));
  }
  return out;
}

bool has_indexer(const WeightsContainer& box) { return box.has(idx_name(0, "u_q")); }

void store_memory(WeightsContainer& box, const std::vector<MemorySlowWeights>& memory) {
  for (std::size_t l = 0; l < memory.size(); ++l) {
    box.put(mem_name(l, "w_phi"), memory[l].w_phi);
    box.put(mem_name(l, "phi_bias"), {memory[l].phi_bias.size()}, memory[l].phi_bias);
    box.put(mem_name(l, "w_g"), {memory[l].w_g.size()}, memory[l].w_g);
    box.put(mem_name(l, "bias"), {1}, Vector{memory[l].bias});
  }
}

std::vector<MemorySlowWeights> load_memory(const WeightsContainer& box, std::size_t d_model,
                                           std::size_t d_mem, std::size_t n_layers) {
  std::vector<MemorySlowWeights> out;
  for (std::size_t l = 0; l < n_layers; ++l) {
    MemorySlowWeights w;
    w.w_phi = expect_matrix(box, mem_name(l, "w_phi"), d_mem, d_model);
    const TensorRecord& pb = box.get(mem_name(l, "phi_bias"));
    if (pb.shape != std::vector<std::size_t>{d_mem}) throw IoError("weights: bad feature bias shape");
    w.phi_bias = pb.data;
    const TensorRecord& g = box.get(mem_name(l, "w_g"));
    if (g.shape != std::vector<std::size_t>{d_model}) throw IoError("weights: bad gate shape");
    w.w_g = g.data;
    const TensorRecord& b = box.get(mem_name(l, "bias"));
    if (b.shape != std::vector<std::size_t>{1}) throw IoError("weights: bad gate bias shape");
    w.bias = b.data[0];
    out.push_back(std::move(w));
  }
  return out;
}

bool has_memory(const WeightsContainer& box) { return box.has(mem_name(0, "w_phi")); }

}  // namespace kvgate

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "kvgate/tensor.hpp"
#include "kvgate/teacher.hpp"

namespace kvgate {

/// How per-kv-head values become one d_model memory value.
enum class ValueAggregation {
  kConcat,  // repeat-interleave each kv head over its query group
  kSum,     // sum over kv heads, tiled across all H head slots
};

ValueAggregation parse_value_aggregation(std::string_view name);
std::string_view to_string(ValueAggregation mode);

struct MemoryConfig {
  std::size_t d_mem = 0;  // 0 selects d_model / 8
  double decay = 0.95;    // lambda
  double write_scale = 1.0;  // eta
  double eps = 1e-6;
  ValueAggregation values = ValueAggregation::kConcat;
  bool stop_gradient = false;

  std::size_t resolved_d_mem(std::size_t d_model) const;
  void validate() const;
};

/// Trainable part: feature map phi(x) = W_phi x + phi_bias and the scalar gate.
struct MemorySlowWeights {
  Matrix w_phi;     // d_mem x d_model
  Vector phi_bias;  // d_mem
  Vector w_g;       // d_model
  double bias = 0.0;

  static MemorySlowWeights init(std::size_t d_model, std::size_t d_mem, Rng& rng);
  static MemorySlowWeights zeros_like(const MemorySlowWeights& other);
  std::size_t d_model() const { return w_phi.cols(); }
  std::size_t d_mem() const { return w_phi.rows(); }
  std::size_t parameter_count() const { return w_phi.size() + phi_bias.size() + w_g.size() + 1; }
  /// Flat views in the order w_phi, phi_bias, w_g, bias.
  std::vector<std::span<double>> tensors();
  std::vector<std::span<const double>> tensors() const;
};

/// Runtime fast weights of one layer; never checkpointed.
struct MemoryState {
  Matrix m;  // d_mem x d_model
  Vector b;  // d_mem

  MemoryState() = default;
  MemoryState(std::size_t d_mem, std::size_t d_model);
  void reset();
  /// d_mem * (d_model + 1) doubles, independent of sequence length.
  std::size_t bytes() const { return (m.size() + b.size()) * sizeof(double); }
};

Vector mem_features(const MemorySlowWeights& slow, std::span<const double> x);

/// phi(q)^T M / (phi(q)^2 . b + eps).
Vector mem_read(const MemorySlowWeights& slow, const MemoryState& state, std::span<const double> q,
                double eps = 1e-6);

/// M <- lambda M + eta sum phi(k_i) v_i^T ; b <- lambda b + eta sum phi(k_i)^2.
/// Rows of `keys` and `values` are d_model token vectors.
void mem_write(const MemorySlowWeights& slow, MemoryState& state, const Matrix& keys,
               const Matrix& values, double decay, double write_scale);

double mem_gate(const MemorySlowWeights& slow, std::span<const double> q);

/// o_attn + g(q) m(q).
Vector fuse(std::span<const double> o_attn, std::span<const double> q,
            const MemorySlowWeights& slow, const MemoryState& state, double eps = 1e-6);

/// Expands one cached row (all kv heads, head-major) into a d_model token
/// vector by repeating each kv head over its query group.
Vector expand_key_row(std::span<const double> kv_row, const HeadLayout& layout);
Vector expand_value_row(std::span<const double> kv_row, const HeadLayout& layout,
                        ValueAggregation mode);

/// One read to be scored: query and the residual the memory should supply.
struct MemoryRead {
  Vector q;
  Vector residual;  // o_full - o_attn
};

/// Writes followed by reads, replayed in order. A step with `write` false
/// only reads.
struct MemoryStep {
  bool write = true;
  Matrix keys;    // n x d_model
  Matrix values;  // n x d_model
  std::vector<MemoryRead> reads;
};

struct MemoryEpisode {
  std::vector<MemoryStep> steps;
  std::size_t read_count() const;
};

/// Mean over reads of ||residual - g(q) m(q)||^2, evaluated by running the
/// real write/read path.
double memory_loss(const MemorySlowWeights& slow, const MemoryEpisode& episode,
                   const MemoryConfig& config);

/// Mean squared residual with no memory at all (the reference the memory
/// must beat).
double residual_energy(const MemoryEpisode& episode);

/// Mean gate value over every read of the episode.
double mean_gate(const MemorySlowWeights& slow, const MemoryEpisode& episode);

/// Analytic gradient of memory_loss. The write history is replayed
/// symbolically: M = W_phi S and b_j = w_j^T C w_j with S, C the decayed sums
/// of k v^T and k k^T. With config.stop_gradient only the path through
/// phi(q) is kept.
MemorySlowWeights memory_gradients(const MemorySlowWeights& slow, const MemoryEpisode& episode,
                                   const MemoryConfig& config, double* loss_out = nullptr);

}  // namespace kvgate

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "kvgate/tensor.hpp"

namespace kvgate {

/// Query/key/value head geometry shared by the teacher, caches and scorers.
struct HeadLayout {
  std::size_t n_heads = 8;
  std::size_t n_kv_heads = 2;
  std::size_t d_head = 8;

  std::size_t d_model() const { return n_heads * d_head; }
  std::size_t kv_width() const { return n_kv_heads * d_head; }
  std::size_t group_size() const { return n_heads / n_kv_heads; }
  /// Query head h reads kv head floor(h * H_kv / H).
  std::size_t kv_head_of(std::size_t h) const { return h * n_kv_heads / n_heads; }
  /// Softmax scale 1/sqrt(d_model) used by every attention in the engine.
  double logit_scale() const;
};

struct TeacherConfig {
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_heads = 8;
  std::size_t n_kv_heads = 2;
  std::size_t d_ffn = 128;
  std::size_t vocab_size = 256;
  double rope_base = 10000.0;
  std::uint64_t seed = 7;

  std::size_t d_head() const { return n_heads == 0 ? 0 : d_model / n_heads; }
  HeadLayout layout() const { return {n_heads, n_kv_heads, d_head()}; }
  /// Throws std::invalid_argument on broken divisibility or zero sizes.
  void validate() const;
};

/// Weights of one frozen block. Projections are (in x out): Q = X W_q.
struct TeacherLayer {
  Matrix w_q;     // d_model x (H * d_head)
  Matrix w_k;     // d_model x (H_kv * d_head)
  Matrix w_v;     // d_model x (H_kv * d_head)
  Matrix w_o;     // (H * d_head) x d_model
  Matrix w_up;    // d_model x d_ffn
  Matrix w_down;  // d_ffn x d_model
  Vector attn_norm;
  Vector ffn_norm;
};

/// Everything a downstream module needs from one layer of a forward pass.
/// Query and key/value matrices are (L x heads*d_head), head-major columns.
struct LayerTrace {
  Matrix x;       // layer input hidden states, L x d_model
  Matrix q_pre;   // pre-RoPE queries
  Matrix q;       // post-RoPE queries
  Matrix k;       // post-RoPE keys
  Matrix v;
  Matrix o_full;  // concatenated head outputs before W_o, L x d_model
  Matrix out;     // block output, L x d_model
};

/// Per-token projections for incremental decoding.
struct RowProjection {
  Vector q_pre;
  Vector q;
  Vector k;
  Vector v;
};

/// In-place rotary embedding of one head vector at a sequence position.
/// Pairs (2i, 2i+1) rotate by pos * base^(-2i/d_head).
void rope_apply(std::span<double> head, std::size_t position, double base);
/// Rotates every head block of a head-major row.
void rope_apply_row(std::span<double> row, std::size_t d_head, std::size_t position, double base);
/// Inverse rotation (transpose of rope_apply).
void rope_unapply(std::span<double> head, std::size_t position, double base);

/// Attention output of one query row over an explicit set of cached rows.
/// No masking beyond the given rows; output is the head-major concatenation.
Vector attend(std::span<const double> q_row, const Matrix& keys, const Matrix& values,
              const HeadLayout& layout);

/// Causal softmax(QK^T / sqrt(d_model) + mask) V with GQA expansion.
Matrix attention_full(const Matrix& q, const Matrix& k, const Matrix& v, const HeadLayout& layout);

class TeacherModel {
 public:
  explicit TeacherModel(const TeacherConfig& config);

  const TeacherConfig& config() const { return config_; }
  HeadLayout layout() const { return config_.layout(); }
  const TeacherLayer& layer(std::size_t i) const { return layers_.at(i); }
  std::size_t n_layers() const { return layers_.size(); }

  /// Fixed random embedding lookup.
  Matrix embed(std::span<const std::size_t> tokens) const;

  /// Full causal forward; one trace per layer. The final hidden states are
  /// the last trace's `out` (or x0 itself when there are no layers).
  std::vector<LayerTrace> forward(const Matrix& x0) const;

  RowProjection project_row(std::size_t layer, std::span<const double> x,
                            std::size_t position) const;
  /// x + attn_out W_o followed by the FFN residual block.
  Vector finish_row(std::size_t layer, std::span<const double> x,
                    std::span<const double> attn_out) const;

  std::uint64_t checksum() const;

 private:
  TeacherConfig config_;
  Matrix embedding_;
  std::vector<TeacherLayer> layers_;
};

}  // namespace kvgate

// SPDX-License-Identifier: Apache-2.0
#include "kvgate/teacher.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "kvgate/numeric.hpp"

namespace kvgate {

double HeadLayout::logit_scale() const {
  return 1.0 / std::sqrt(static_cast<double>(d_model()));
}

void TeacherConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || n_kv_heads == 0 || d_ffn == 0) {
    throw std::invalid_argument("teacher: sizes must be positive");
  }
  if (n_heads % n_kv_heads != 0) {
    throw std::invalid_argument("teacher: n_heads must be divisible by n_kv_heads");
  }
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("teacher: d_model must be divisible by n_heads");
  }
  if (d_head() % 2 != 0) {
    throw std::invalid_argument("teacher: d_head must be even for rotary embeddings");
  }
  if (!(rope_base > 1.0)) throw std::invalid_argument("teacher: rope_base must exceed 1");
  if (vocab_size == 0) throw std::invalid_argument("teacher: vocab_size must be positive");
}

namespace {

void rotate(std::span<double> head, std::size_t position, double base, double sign) {
  const std::size_t d = head.size();
  if (d % 2 != 0) throw std::invalid_argument("rope: odd head dimension");
  if (position == 0) return;
  for (std::size_t i = 0; i < d / 2; ++i) {
    const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
    const double angle = static_cast<double>(position) * freq;
    const double c = std::cos(angle);
    const double s = sign * std::sin(angle);
    const double a = head[2 * i];
    const double b = head[2 * i + 1];
    head[2 * i] = a * c - b * s;
    head[2 * i + 1] = a * s + b * c;
  }
}

Vector scaled_rmsnorm(std::span<const double> x, const Vector& gain) {
  Vector h = rmsnorm(x);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] *= gain[i];
  return h;
}

}  // namespace

void rope_apply(std::span<double> head, std::size_t position, double base) {
  rotate(head, position, base, 1.0);
}

void rope_unapply(std::span<double> head, std::size_t position, double base) {
  rotate(head, position, base, -1.0);
}

void rope_apply_row(std::span<double> row, std::size_t d_head, std::size_t position,
                    double base) {
  for (std::size_t off = 0; off < row.size(); off += d_head) {
    rope_apply(row.subspan(off, d_head), position, base);
  }
}

Vector attend(std::span<const double> q_row, const Matrix& keys, const Matrix& values,
              const HeadLayout& layout) {
  const std::size_t n = keys.rows();
  const std::size_t dh = layout.d_head;
  if (q_row.size() != layout.d_model() || keys.cols() != layout.kv_width() ||
      values.cols() != layout.kv_width() || values.rows() != n) {
    throw std::invalid_argument("attend: shape mismatch");
  }
  if (n == 0) throw std::invalid_argument("attend: no cached rows");
  const double scale = layout.logit_scale();
  Vector out(layout.d_model(), 0.0);
  Vector logits(n);
  for (std::size_t h = 0; h < layout.n_heads; ++h) {
    const std::size_t g = layout.kv_head_of(h);
    auto qh = q_row.subspan(h * dh, dh);
    for (std::size_t j = 0; j < n; ++j) {
      logits[j] = dot(qh, keys.row(j).subspan(g * dh, dh)) * scale;
    }
    const Vector w = softmax_stable(logits);
    auto oh = std::span<double>(out).subspan(h * dh, dh);
    for (std::size_t j = 0; j < n; ++j) axpy(w[j], values.row(j).subspan(g * dh, dh), oh);
  }
  return out;
}

Matrix attention_full(const Matrix& q, const Matrix& k, const Matrix& v,
                      const HeadLayout& layout) {
  if (q.rows() != k.rows() || k.rows() != v.rows()) {
    throw std::invalid_argument("attention_full: row counts differ");
  }
  if (q.cols() != layout.d_model() || k.cols() != layout.kv_width() ||
      v.cols() != layout.kv_width()) {
    throw std::invalid_argument("attention_full: width mismatch");
  }
  const std::size_t n = q.rows();
  const std::size_t dh = layout.d_head;
  const double scale = layout.logit_scale();
  Matrix out(n, layout.d_model());
  Vector logits;
  logits.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t h = 0; h < layout.n_heads; ++h) {
      const std::size_t g = layout.kv_head_of(h);
      auto qh = q.row(s).subspan(h * dh, dh);
      logits.assign(s + 1, 0.0);
      for (std::size_t t = 0; t <= s; ++t) {
        logits[t] = dot(qh, k.row(t).subspan(g * dh, dh)) * scale;
      }
      const Vector w = softmax_stable(logits);
      auto oh = out.row(s).subspan(h * dh, dh);
      for (std::size_t t = 0; t <= s; ++t) axpy(w[t], v.row(t).subspan(g * dh, dh), oh);
    }
  }
  return out;
}

TeacherModel::TeacherModel(const TeacherConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t dm = config_.d_model;
  const std::size_t kvw = config_.layout().kv_width();
  const double std_in = 1.0 / std::sqrt(static_cast<double>(dm));
  Rng embed_rng = rng.split(0);
  embedding_ = random_normal(config_.vocab_size, dm, 1.0, embed_rng);
  layers_.reserve(config_.n_layers);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Rng lr = rng.split(1 + l);
    TeacherLayer layer;
    layer.w_q = random_normal(dm, dm, std_in, lr);
    layer.w_k = random_normal(dm, kvw, std_in, lr);
    layer.w_v = random_normal(dm, kvw, std_in, lr);
    layer.w_o = random_normal(dm, dm, std_in, lr);
    layer.w_up = random_normal(dm, config_.d_ffn, std_in, lr);
    layer.w_down = random_normal(config_.d_ffn, dm, std_in, lr);
    layer.attn_norm.assign(dm, 1.0);
    layer.ffn_norm.assign(dm, 1.0);
    layers_.push_back(std::move(layer));
  }
}

Matrix TeacherModel::embed(std::span<const std::size_t> tokens) const {
  for (std::size_t t : tokens) {
    if (t >= config_.vocab_size) throw std::out_of_range("embed: token id out of range");
  }
  return embedding_.gather_rows(tokens);
}

RowProjection TeacherModel::project_row(std::size_t layer, std::span<const double> x,
                                        std::size_t position) const {
  const TeacherLayer& w = layers_.at(layer);
  const Vector h = scaled_rmsnorm(x, w.attn_norm);
  RowProjection p;
  p.q_pre = vecmat(h, w.w_q);
  p.q = p.q_pre;
  rope_apply_row(p.q, config_.d_head(), position, config_.rope_base);
  p.k = vecmat(h, w.w_k);
  rope_apply_row(p.k, config_.d_head(), position, config_.rope_base);
  p.v = vecmat(h, w.w_v);
  return p;
}

Vector TeacherModel::finish_row(std::size_t layer, std::span<const double> x,
                                std::span<const double> attn_out) const {
  const TeacherLayer& w = layers_.at(layer);
  Vector mid(x.begin(), x.end());
  const Vector proj = vecmat(attn_out, w.w_o);
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i] += proj[i];
  Vector up = vecmat(scaled_rmsnorm(mid, w.ffn_norm), w.w_up);
  for (double& u : up) u = silu(u);
  const Vector down = vecmat(up, w.w_down);
  for (std::size_t i = 0; i < mid.size(); ++i) mid[i] += down[i];
  return mid;
}

std::vector<LayerTrace> TeacherModel::forward(const Matrix& x0) const {
  if (x0.rows() == 0) throw std::invalid_argument("forward: empty sequence");
  if (x0.cols() != config_.d_model) throw std::invalid_argument("forward: width mismatch");
  const std::size_t n = x0.rows();
  const HeadLayout lay = layout();
  std::vector<LayerTrace> traces;
  traces.reserve(layers_.size());
  Matrix x = x0;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    LayerTrace tr;
    tr.x = x;
    tr.q_pre = Matrix(n, lay.d_model());
    tr.q = Matrix(n, lay.d_model());
    tr.k = Matrix(n, lay.kv_width());
    tr.v = Matrix(n, lay.kv_width());
    for (std::size_t s = 0; s < n; ++s) {
      RowProjection p = project_row(l, x.row(s), s);
      std::copy(p.q_pre.begin(), p.q_pre.end(), tr.q_pre.row(s).begin());
      std::copy(p.q.begin(), p.q.end(), tr.q.row(s).begin());
      std::copy(p.k.begin(), p.k.end(), tr.k.row(s).begin());
      std::copy(p.v.begin(), p.v.end(), tr.v.row(s).begin());
    }
    tr.o_full = attention_full(tr.q, tr.k, tr.v, lay);
    tr.out = Matrix(n, lay.d_model());
    for (std::size_t s = 0; s < n; ++s) {
      const Vector y = finish_row(l, x.row(s), tr.o_full.row(s));
      std::copy(y.begin(), y.end(), tr.out.row(s).begin());
    }
    x = tr.out;
    traces.push_back(std::move(tr));
  }
  return traces;
}

std::uint64_t TeacherModel::checksum() const {
  std::uint64_t h = kvgate::checksum(embedding_.data());
  for (const TeacherLayer& l : layers_) {
    for (const Matrix* m : {&l.w_q, &l.w_k, &l.w_v, &l.w_o, &l.w_up, &l.w_down}) {
      h = kvgate::checksum(m->data(), h);
    }
    h = kvgate::checksum(l.attn_norm, h);
    h = kvgate::checksum(l.ffn_norm, h);
  }
  return h;
}

}  // namespace kvgate

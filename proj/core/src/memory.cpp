// SPDX-License-Identifier: Apache-2.0
#include "kvgate/memory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "kvgate/numeric.hpp"

namespace kvgate {

ValueAggregation parse_value_aggregation(std::string_view name) {
  if (name == "concat") return ValueAggregation::kConcat;
  if (name == "sum") return ValueAggregation::kSum;
  throw std::invalid_argument("unknown value aggregation '" + std::string(name) + "'");
}

std::string_view to_string(ValueAggregation mode) {
  return mode == ValueAggregation::kConcat ? "concat" : "sum";
}

std::size_t MemoryConfig::resolved_d_mem(std::size_t d_model) const {
  return d_mem != 0 ? d_mem : std::max<std::size_t>(1, d_model / 8);
}

void MemoryConfig::validate() const {
  if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("memory: decay must lie in (0, 1]");
  if (!(write_scale > 0.0)) throw std::invalid_argument("memory: write scale must be positive");
  if (!(eps > 0.0)) throw std::invalid_argument("memory: eps must be positive");
}

MemorySlowWeights MemorySlowWeights::init(std::size_t d_model, std::size_t d_mem, Rng& rng) {
  if (d_model == 0 || d_mem == 0) throw std::invalid_argument("memory: zero-sized weights");
  MemorySlowWeights w;
  w.w_phi = random_normal(d_mem, d_model, 1.0 / std::sqrt(static_cast<double>(d_model)), rng);
  w.phi_bias.assign(d_mem, 0.0);
  w.w_g.assign(d_model, 0.0);
  w.bias = 0.0;
  return w;
}

MemorySlowWeights MemorySlowWeights::zeros_like(const MemorySlowWeights& other) {
  MemorySlowWeights w;
  w.w_phi = Matrix(other.w_phi.rows(), other.w_phi.cols());
  w.phi_bias.assign(other.phi_bias.size(), 0.0);
  w.w_g.assign(other.w_g.size(), 0.0);
  return w;
}

std::vector<std::span<double>> MemorySlowWeights::tensors() {
  return {w_phi.data(), std::span<double>(phi_bias), std::span<double>(w_g),
          std::span<double>(&bias, 1)};
}

std::vector<std::span<const double>> MemorySlowWeights::tensors() const {
  return {w_phi.data(), std::span<const double>(phi_bias), std::span<const double>(w_g),
          std::span<const double>(&bias, 1)};
}

MemoryState::MemoryState(std::size_t d_mem, std::size_t d_model)
    : m(d_mem, d_model, 0.0), b(d_mem, 0.0) {}

void MemoryState::reset() {
  m.fill(0.0);
  std::fill(b.begin(), b.end(), 0.0);
}

Vector mem_features(const MemorySlowWeights& slow, std::span<const double> x) {
  if (x.size() != slow.d_model()) throw std::invalid_argument("memory: input width mismatch");
  if (slow.phi_bias.size() != slow.d_mem()) throw std::invalid_argument("memory: feature bias width mismatch");
  Vector phi = matvec(slow.w_phi, x);
  for (std::size_t j = 0; j < phi.size(); ++j) phi[j] += slow.phi_bias[j];
  return phi;
}

Vector mem_read(const MemorySlowWeights& slow, const MemoryState& state, std::span<const double> q,
                double eps) {
  const Vector phi = mem_features(slow, q);
  double denom = eps;
  for (std::size_t j = 0; j < phi.size(); ++j) denom += phi[j] * phi[j] * state.b[j];
  Vector out = vecmat(phi, state.m);
  for (double& v : out) v /= denom;
  return out;
}

void mem_write(const MemorySlowWeights& slow, MemoryState& state, const Matrix& keys,
               const Matrix& values, double decay, double write_scale) {
  if (!(decay > 0.0 && decay <= 1.0)) throw std::invalid_argument("memory: decay must lie in (0, 1]");
  if (!(write_scale > 0.0)) throw std::invalid_argument("memory: write scale must be positive");
  if (keys.rows() != values.rows()) throw std::invalid_argument("memory: key/value count mismatch");
  for (double& v : state.m.data()) v *= decay;
  for (double& v : state.b) v *= decay;
  for (std::size_t i = 0; i < keys.rows(); ++i) {
    const Vector phi = mem_features(slow, keys.row(i));
    for (std::size_t j = 0; j < phi.size(); ++j) {
      axpy(write_scale * phi[j], values.row(i), state.m.row(j));
      state.b[j] += write_scale * phi[j] * phi[j];
    }
  }
}

double mem_gate(const MemorySlowWeights& slow, std::span<const double> q) {
  return sigmoid(dot(slow.w_g, q) + slow.bias);
}

Vector fuse(std::span<const double> o_attn, std::span<const double> q,
            const MemorySlowWeights& slow, const MemoryState& state, double eps) {
  const Vector m = mem_read(slow, state, q, eps);
  if (m.size() != o_attn.size()) throw std::invalid_argument("fuse: width mismatch");
  Vector out(o_attn.begin(), o_attn.end());
  axpy(mem_gate(slow, q), m, out);
  return out;
}

Vector expand_key_row(std::span<const double> kv_row, const HeadLayout& layout) {
  return expand_value_row(kv_row, layout, ValueAggregation::kConcat);
}

Vector expand_value_row(std::span<const double> kv_row, const HeadLayout& layout,
                        ValueAggregation mode) {
  if (kv_row.size() != layout.kv_width()) throw std::invalid_argument("expand: row width mismatch");
  const std::size_t dh = layout.d_head;
  Vector out(layout.d_model(), 0.0);
  if (mode == ValueAggregation::kConcat) {
    for (std::size_t h = 0; h < layout.n_heads; ++h) {
      const auto src = kv_row.subspan(layout.kv_head_of(h) * dh, dh);
      std::copy(src.begin(), src.end(), out.begin() + h * dh);
    }
    return out;
  }
  Vector summed(dh, 0.0);
  for (std::size_t g = 0; g < layout.n_kv_heads; ++g) axpy(1.0, kv_row.subspan(g * dh, dh), summed);
  for (std::size_t h = 0; h < layout.n_heads; ++h) {
    std::copy(summed.begin(), summed.end(), out.begin() + h * dh);
  }
  return out;
}

std::size_t MemoryEpisode::read_count() const {
  std::size_t n = 0;
  for (const MemoryStep& s : steps) n += s.reads.size();
  return n;
}

double memory_loss(const MemorySlowWeights& slow, const MemoryEpisode& episode,
                   const MemoryConfig& config) {
  const std::size_t reads = episode.read_count();
  if (reads == 0) return 0.0;
  MemoryState state(slow.d_mem(), slow.d_model());
  double total = 0.0;
  for (const MemoryStep& step : episode.steps) {
    if (step.write) mem_write(slow, state, step.keys, step.values, config.decay, config.write_scale);
    for (const MemoryRead& r : step.reads) {
      const Vector m = mem_read(slow, state, r.q, config.eps);
      const double g = mem_gate(slow, r.q);
      double sq = 0.0;
      for (std::size_t c = 0; c < m.size(); ++c) {
        const double e = r.residual[c] - g * m[c];
        sq += e * e;
      }
      total += sq;
    }
  }
  return total / static_cast<double>(reads);
}

double residual_energy(const MemoryEpisode& episode) {
  const std::size_t reads = episode.read_count();
  if (reads == 0) return 0.0;
  double total = 0.0;
  for (const MemoryStep& step : episode.steps) {
    for (const MemoryRead& r : step.reads) total += squared_norm(r.residual);
  }
  return total / static_cast<double>(reads);
}

double mean_gate(const MemorySlowWeights& slow, const MemoryEpisode& episode) {
  const std::size_t reads = episode.read_count();
  if (reads == 0) return 0.0;
  double total = 0.0;
  for (const MemoryStep& step : episode.steps) {
    for (const MemoryRead& r : step.reads) total += mem_gate(slow, r.q);
  }
  return total / static_cast<double>(reads);
}

MemorySlowWeights memory_gradients(const MemorySlowWeights& slow, const MemoryEpisode& episode,
                                   const MemoryConfig& config, double* loss_out) {
  const std::size_t d = slow.d_model();
  const std::size_t dm = slow.d_mem();
  MemorySlowWeights grad = MemorySlowWeights::zeros_like(slow);
  const std::size_t reads = episode.read_count();
  if (loss_out) *loss_out = 0.0;
  if (reads == 0) return grad;
  const double inv_reads = 1.0 / static_cast<double>(reads);

  // The feature bias is the last column of an augmented map acting on [x; 1].
  const std::size_t da = d + 1;
  Matrix w_aug(dm, da);
  for (std::size_t j = 0; j < dm; ++j) {
    std::copy(slow.w_phi.row(j).begin(), slow.w_phi.row(j).end(), w_aug.row(j).begin());
    w_aug(j, d) = slow.phi_bias[j];
  }
  Matrix g_aug(dm, da);
  auto augment = [da](std::span<const double> x) {
    Vector out(da, 1.0);
    std::copy(x.begin(), x.end(), out.begin());
    return out;
  };

  Matrix s_acc(da, d);   // sum c_i k_i v_i^T
  Matrix c_acc(da, da);  // sum c_i k_i k_i^T
  double total = 0.0;
  for (const MemoryStep& step : episode.steps) {
    if (step.write) {
      if (step.keys.rows() != step.values.rows()) {
        throw std::invalid_argument("memory: key/value count mismatch");
      }
      for (double& v : s_acc.data()) v *= config.decay;
      for (double& v : c_acc.data()) v *= config.decay;
      for (std::size_t i = 0; i < step.keys.rows(); ++i) {
        const Vector k = augment(step.keys.row(i));
        const auto v = step.values.row(i);
        for (std::size_t a = 0; a < da; ++a) {
          if (k[a] == 0.0) continue;
          axpy(config.write_scale * k[a], v, s_acc.row(a));
          axpy(config.write_scale * k[a], k, c_acc.row(a));
        }
      }
    }
    if (step.reads.empty()) continue;
    // Per-feature rows of the current state: ws_j = S^T w_j, wc_j = C w_j.
    Matrix ws(dm, d);
    Matrix wc(dm, da);
    Vector beta(dm);
    for (std::size_t j = 0; j < dm; ++j) {
      const Vector sj = vecmat(w_aug.row(j), s_acc);
      const Vector cj = matvec(c_acc, w_aug.row(j));
      std::copy(sj.begin(), sj.end(), ws.row(j).begin());
      std::copy(cj.begin(), cj.end(), wc.row(j).begin());
      beta[j] = dot(w_aug.row(j), cj);
    }
    for (const MemoryRead& r : step.reads) {
      const Vector qa = augment(r.q);
      const Vector phi = matvec(w_aug, qa);
      double denom = config.eps;
      for (std::size_t j = 0; j < dm; ++j) denom += phi[j] * phi[j] * beta[j];
      Vector m = vecmat(phi, ws);
      for (double& x : m) x /= denom;
      const double g = mem_gate(slow, r.q);
      Vector err(d);
      double sq = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        err[c] = r.residual[c] - g * m[c];
        sq += err[c] * err[c];
      }
      total += sq;

      // dl/dm = -2 g err ; dl/dg = -2 err.m
      Vector u(d);
      for (std::size_t c = 0; c < d; ++c) u[c] = -2.0 * g * err[c] * inv_reads;
      const double dg = -2.0 * dot(err, m) * inv_reads;
      const double dz = dg * g * (1.0 - g);
      axpy(dz, r.q, grad.w_g);
      grad.bias += dz;

      const double um = dot(u, m);
      const Vector su = config.stop_gradient ? Vector{} : matvec(s_acc, u);
      for (std::size_t j = 0; j < dm; ++j) {
        const double u_ws = dot(u, ws.row(j));
        // Paths through phi(q): numerator coefficient and denominator.
        const double coef_q = u_ws / denom - um / denom * 2.0 * phi[j] * beta[j];
        auto gw = g_aug.row(j);
        axpy(coef_q, qa, gw);
        if (config.stop_gradient) continue;
        // Paths through the written state: M_j = w_j^T S and beta_j = w_j^T C w_j.
        axpy(phi[j] / denom, su, gw);
        axpy(-um / denom * 2.0 * phi[j] * phi[j], wc.row(j), gw);
      }
    }
  }
  for (std::size_t j = 0; j < dm; ++j) {
    std::copy(g_aug.row(j).begin(), g_aug.row(j).begin() + static_cast<std::ptrdiff_t>(d),
              grad.w_phi.row(j).begin());
    grad.phi_bias[j] = g_aug(j, d);
  }
  if (loss_out) *loss_out = total * inv_reads;
  return grad;
}

}  // namespace kvgate

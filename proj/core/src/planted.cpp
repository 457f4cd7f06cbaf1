// SPDX-License-Identifier: Apache-2.0
#include "kvgate/planted.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "kvgate/numeric.hpp"

namespace kvgate {

namespace {

Vector normalized(Vector v) {
  const double n = std::sqrt(squared_norm(v));
  if (n == 0.0) throw std::invalid_argument("planted: zero direction");
  for (double& x : v) x /= n;
  return v;
}

Vector gaussian(std::size_t n, Rng& rng) {
  Vector v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

// Leading left singular vector of w (in x out) by power iteration on w w^T.
Vector top_input_direction(const Matrix& w) {
  Vector u(w.rows());
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  u = normalized(std::move(u));
  for (int it = 0; it < 200; ++it) {
    const Vector t = vecmat(u, w);      // u^T W
    u = normalized(matvec(w, t));       // W (W^T u)
  }
  return u;
}

// Solves (a) x = b for symmetric positive definite a by Cholesky.
Vector cholesky_solve(const Matrix& a, const Vector& b) {
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double sum = a(i, j);
      for (std::size_t k = 0; k < j; ++k) sum -= l(i, k) * l(j, k);
      if (i == j) {
        if (!(sum > 0.0)) throw std::runtime_error("planted: key projection is rank deficient");
        l(i, i) = std::sqrt(sum);
      } else {
        l(i, j) = sum / l(j, j);
      }
    }
  }
  Vector y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sum = b[i];
    for (std::size_t k = 0; k < i; ++k) sum -= l(i, k) * y[k];
    y[i] = sum / l(i, i);
  }
  Vector x(n);
  for (std::size_t i = n; i-- > 0;) {
    double sum = y[i];
    for (std::size_t k = i + 1; k < n; ++k) sum -= l(k, i) * x[k];
    x[i] = sum / l(i, i);
  }
  return x;
}

double median(Vector v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void PlantedConfig::validate() const {
  if (length == 0) throw std::invalid_argument("planted: length must be positive");
  if (tail == 0 || tail >= length) throw std::invalid_argument("planted: tail must be in [1, length)");
  if (!(needle_cosine > 0.0 && needle_cosine <= 1.0)) {
    throw std::invalid_argument("planted: needle cosine must lie in (0, 1]");
  }
  if (!(tail_noise >= 0.0)) throw std::invalid_argument("planted: tail noise must be non-negative");
  if (needles > 0 && needle_end() <= needle_begin()) {
    throw std::invalid_argument("planted: no room for needles");
  }
  if (needle_end() > needle_begin() && needles > needle_end() - needle_begin()) {
    throw std::invalid_argument("planted: more needles than eligible positions");
  }
}

std::size_t PlantedConfig::needle_end() const {
  const std::size_t guard = std::max(tail, local_window);
  return length > guard ? length - guard : 0;
}

std::vector<std::size_t> draw_needle_positions(const PlantedConfig& config, Rng& rng) {
  config.validate();
  std::vector<std::size_t> pool;
  for (std::size_t p = config.needle_begin(); p < config.needle_end(); ++p) pool.push_back(p);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < config.needles; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(pool.size() - i));
    std::swap(pool[i], pool[j]);
    out.push_back(pool[i]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

PlantedSample planted_retrieval(const TeacherModel& teacher, const PlantedConfig& config,
                                std::span<const std::size_t> needle_positions, Rng& rng) {
  config.validate();
  if (teacher.n_layers() == 0) throw std::invalid_argument("planted: teacher has no layers");
  const std::size_t n = config.length;
  const std::size_t tail_begin = n - config.tail;
  for (std::size_t p : needle_positions) {
    if (p >= tail_begin) {
      throw std::invalid_argument("planted: needle at " + std::to_string(p) +
                                  " overlaps the query tail");
    }
  }
  const TeacherLayer& w = teacher.layer(0);
  const HeadLayout layout = teacher.layout();
  const std::size_t dm = layout.d_model();
  const std::size_t dh = layout.d_head;
  const double rms_norm_target = std::sqrt(static_cast<double>(dm));

  PlantedSample sample;
  sample.x0 = random_normal(n, dm, 1.0, rng);
  sample.needles.assign(needle_positions.begin(), needle_positions.end());
  std::sort(sample.needles.begin(), sample.needles.end());

  // Tail rows: large, mutually aligned queries.
  const Vector u_top = top_input_direction(w.w_q);
  for (std::size_t s = tail_begin; s < n; ++s) {
    Vector row = gaussian(dm, rng);
    for (std::size_t i = 0; i < dm; ++i) row[i] = u_top[i] + config.tail_noise * row[i] / rms_norm_target;
    row = normalized(std::move(row));
    for (std::size_t i = 0; i < dm; ++i) sample.x0(s, i) = rms_norm_target * row[i];
  }
  if (sample.needles.empty()) return sample;

  std::vector<RowProjection> tail_proj;
  for (std::size_t s = tail_begin; s < n; ++s) {
    tail_proj.push_back(teacher.project_row(0, sample.x0.row(s), s));
  }
  std::size_t best_head = 0;
  double best_norm = -1.0;
  for (std::size_t h = 0; h < layout.n_heads; ++h) {
    double total = 0.0;
    for (const RowProjection& p : tail_proj) {
      total += std::sqrt(squared_norm(std::span<const double>(p.q).subspan(h * dh, dh)));
    }
    if (total > best_norm) {
      best_norm = total;
      best_head = h;
    }
  }
  Vector pooled_query(dh, 0.0);
  for (const RowProjection& p : tail_proj) {
    axpy(1.0, std::span<const double>(p.q).subspan(best_head * dh, dh), pooled_query);
  }
  pooled_query = normalized(std::move(pooled_query));
  const std::size_t group = layout.kv_head_of(best_head);

  // Knorm-neutral magnitude: median summed key norm over filler rows.
  Vector filler_norms;
  std::vector<char> is_needle(n, 0);
  for (std::size_t p : sample.needles) is_needle[p] = 1;
  for (std::size_t t = 0; t < tail_begin; ++t) {
    if (is_needle[t]) continue;
    const RowProjection p = teacher.project_row(0, sample.x0.row(t), t);
    double total = 0.0;
    for (std::size_t g = 0; g < layout.n_kv_heads; ++g) {
      total += std::sqrt(squared_norm(std::span<const double>(p.k).subspan(g * dh, dh)));
    }
    filler_norms.push_back(total);
  }
  const double key_norm = filler_norms.empty() ? 1.0 : median(filler_norms);

  // Gram matrix of the key projection, for least-norm row solves.
  const std::size_t kvw = layout.kv_width();
  Matrix gram(kvw, kvw);
  for (std::size_t a = 0; a < kvw; ++a) {
    for (std::size_t b = 0; b < kvw; ++b) {
      double sum = 0.0;
      for (std::size_t i = 0; i < dm; ++i) sum += w.w_k(i, a) * w.w_k(i, b);
      gram(a, b) = sum;
    }
  }
  const double sin_part = std::sqrt(std::max(0.0, 1.0 - config.needle_cosine * config.needle_cosine));

  for (std::size_t p : sample.needles) {
    // Post-RoPE direction with the requested cosine to the pooled tail query.
    Vector noise = gaussian(dh, rng);
    const double along = dot(noise, pooled_query);
    axpy(-along, pooled_query, noise);
    noise = normalized(std::move(noise));
    Vector dir(dh);
    for (std::size_t i = 0; i < dh; ++i) {
      dir[i] = config.needle_cosine * pooled_query[i] + sin_part * noise[i];
    }
    rope_unapply(dir, p, teacher.config().rope_base);

    Vector target(kvw, 0.0);
    for (std::size_t i = 0; i < dh; ++i) target[group * dh + i] = key_norm * dir[i];

    // Normalised row h with h W_k = target and ||h|| = sqrt(d_model).
    double scale = 1.0;
    Vector h_row;
    for (int attempt = 0; attempt < 8; ++attempt) {
      Vector t_scaled = target;
      for (double& v : t_scaled) v *= scale;
      const Vector coeff = cholesky_solve(gram, t_scaled);
      h_row = matvec(w.w_k, coeff);
      if (squared_norm(h_row) < 0.98 * static_cast<double>(dm)) break;
      scale *= 0.8;
    }
    Vector null = gaussian(dm, rng);
    const Vector proj = cholesky_solve(gram, vecmat(null, w.w_k));
    axpy(-1.0, matvec(w.w_k, proj), null);
    const double have = squared_norm(h_row);
    const double room = static_cast<double>(dm) - have;
    const double null_norm = std::sqrt(squared_norm(null));
    if (room > 0.0 && null_norm > 0.0) axpy(std::sqrt(room) / null_norm, null, h_row);
    // Undo the attention pre-norm gain so that the normalised row is h_row.
    for (std::size_t i = 0; i < dm; ++i) {
      sample.x0(p, i) = w.attn_norm[i] != 0.0 ? h_row[i] / w.attn_norm[i] : h_row[i];
    }
  }
  return sample;
}

PlantedSample planted_sample(const TeacherModel& teacher, const PlantedConfig& config, Rng& rng) {
  const auto positions = draw_needle_positions(config, rng);
  return planted_retrieval(teacher, config, positions, rng);
}

double retention_recall(std::span<const std::size_t> needles,
                        std::span<const std::size_t> kept_positions) {
  if (needles.empty()) return 1.0;
  std::size_t hit = 0;
  for (std::size_t p : needles) {
    if (std::find(kept_positions.begin(), kept_positions.end(), p) != kept_positions.end()) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(needles.size());
}

}  // namespace kvgate

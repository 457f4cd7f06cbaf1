// SPDX-License-Identifier: Apache-2.0
#include "kvgate/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace kvgate {

namespace {

double finite_max(std::span<const double> logits) {
  double m = kNegInf;
  for (double x : logits) {
    if (std::isnan(x)) throw std::invalid_argument("softmax: NaN logit");
    if (x == std::numeric_limits<double>::infinity()) {
      throw std::invalid_argument("softmax: +inf logit");
    }
    m = std::max(m, x);
  }
  if (m == kNegInf) throw std::invalid_argument("empty support");
  return m;
}

}  // namespace

Vector softmax_stable(std::span<const double> logits) {
  const double m = finite_max(logits);
  Vector out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] == kNegInf ? 0.0 : std::exp(logits[i] - m);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

Vector log_softmax(std::span<const double> logits) {
  const double m = finite_max(logits);
  double total = 0.0;
  for (double x : logits) {
    if (x != kNegInf) total += std::exp(x - m);
  }
  const double log_z = m + std::log(total);
  Vector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] == kNegInf ? kNegInf : logits[i] - log_z;
  }
  return out;
}

Vector rmsnorm(std::span<const double> x, double eps) {
  if (x.empty()) throw std::invalid_argument("rmsnorm: empty input");
  const double inv = 1.0 / std::sqrt(squared_norm(x) / static_cast<double>(x.size()) + eps);
  Vector out(x.begin(), x.end());
  for (double& v : out) v *= inv;
  return out;
}

Vector rmsnorm_backward(std::span<const double> x, std::span<const double> grad_out, double eps) {
  const double n = static_cast<double>(x.size());
  const double r = std::sqrt(squared_norm(x) / n + eps);
  const double proj = dot(grad_out, x) / (n * r * r * r);
  Vector out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = grad_out[i] / r - x[i] * proj;
  return out;
}

std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
  if (k > scores.size()) {
    throw std::invalid_argument("topk: k=" + std::to_string(k) + " exceeds length " +
                                std::to_string(scores.size()));
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

double kl_divergence(std::span<const double> target_logits,
                     std::span<const double> student_logits) {
  if (target_logits.size() != student_logits.size()) {
    throw std::invalid_argument("kl_divergence: length mismatch");
  }
  for (std::size_t i = 0; i < target_logits.size(); ++i) {
    if ((target_logits[i] == kNegInf) != (student_logits[i] == kNegInf)) {
      throw std::invalid_argument("kl_divergence: mismatched mask supports");
    }
  }
  const Vector log_p = log_softmax(target_logits);
  const Vector log_q = log_softmax(student_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < log_p.size(); ++i) {
    if (log_p[i] == kNegInf) continue;
    kl += std::exp(log_p[i]) * (log_p[i] - log_q[i]);
  }
  return std::max(kl, 0.0);
}

double normalized_entropy(std::span<const double> p, double eps) {
  if (p.size() < 2) throw std::invalid_argument("normalized_entropy: needs T >= 2");
  double h = 0.0;
  for (double v : p) h -= v * std::log(v + eps);
  return h / std::log(static_cast<double>(p.size()));
}

ProbMode parse_prob_mode(std::string_view name) {
  if (name == "softmax") return ProbMode::kSoftmax;
  if (name == "negonly") return ProbMode::kNegOnly;
  throw std::invalid_argument("unknown probability mapping '" + std::string(name) + "'");
}

std::string_view to_string(ProbMode mode) {
  return mode == ProbMode::kSoftmax ? "softmax" : "negonly";
}

Vector score_to_prob(std::span<const double> scores, const ProbMapping& mapping) {
  if (mapping.mode == ProbMode::kSoftmax) {
    if (!(mapping.temperature > 0.0)) {
      throw std::invalid_argument("score_to_prob: temperature must be > 0");
    }
    Vector scaled(scores.begin(), scores.end());
    for (double& v : scaled) v /= mapping.temperature;
    return softmax_stable(scaled);
  }
  if (scores.empty()) throw std::invalid_argument("score_to_prob: empty scores");
  const double lo = *std::min_element(scores.begin(), scores.end());
  Vector shifted(scores.begin(), scores.end());
  if (lo < 0.0) {
    for (double& v : shifted) v -= lo;
  }
  const double total = std::accumulate(shifted.begin(), shifted.end(), 0.0);
  if (total == 0.0) {
    return Vector(scores.size(), 1.0 / static_cast<double>(scores.size()));
  }
  for (double& v : shifted) v /= total + kDivisionGuard;
  return shifted;
}

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double silu(double x) { return x * sigmoid(x); }

}  // namespace kvgate

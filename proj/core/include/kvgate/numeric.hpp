// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "kvgate/tensor.hpp"

namespace kvgate {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();
inline constexpr double kRmsEps = 1e-6;
inline constexpr double kEntropyEps = 1e-12;
inline constexpr double kDivisionGuard = 1e-12;

/// Softmax over finite or -inf (masked) logits. Throws on an all-masked input.
Vector softmax_stable(std::span<const double> logits);
Vector log_softmax(std::span<const double> logits);

/// x / sqrt(mean(x^2) + eps); no learnable scale.
Vector rmsnorm(std::span<const double> x, double eps = kRmsEps);
/// Gradient of rmsnorm w.r.t. x given upstream gradient on the output.
Vector rmsnorm_backward(std::span<const double> x, std::span<const double> grad_out,
                        double eps = kRmsEps);

/// Indices of the k largest entries in ascending index order. Ties go to the
/// lower index.
std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k);

/// KL(softmax(target) || softmax(student)). Masked (-inf) entries must coincide.
double kl_divergence(std::span<const double> target_logits,
                     std::span<const double> student_logits);

/// -(1/log T) * sum p log(p + eps); requires T >= 2.
double normalized_entropy(std::span<const double> p, double eps = kEntropyEps);

enum class ProbMode { kSoftmax, kNegOnly };

struct ProbMapping {
  ProbMode mode = ProbMode::kSoftmax;
  double temperature = 1.0;
};

ProbMode parse_prob_mode(std::string_view name);
std::string_view to_string(ProbMode mode);

/// Maps raw scores to a probability vector (tempered softmax, or L1 after a
/// min-shift applied only when some score is negative).
Vector score_to_prob(std::span<const double> scores, const ProbMapping& mapping);

double sigmoid(double x);
double silu(double x);

}  // namespace kvgate

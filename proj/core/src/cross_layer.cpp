// SPDX-License-Identifier: Apache-2.0
#include "kvgate/cross_layer.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace kvgate {

AggregationMode parse_aggregation(std::string_view name) {
  if (name == "none") return AggregationMode::kNone;
  if (name == "layer_mean") return AggregationMode::kLayerMean;
  if (name == "ent_skip_high") return AggregationMode::kEntSkipHigh;
  if (name == "ent_skip_low") return AggregationMode::kEntSkipLow;
  throw std::invalid_argument("unknown aggregation mode '" + std::string(name) + "'");
}

std::string_view to_string(AggregationMode mode) {
  switch (mode) {
    case AggregationMode::kNone: return "none";
    case AggregationMode::kLayerMean: return "layer_mean";
    case AggregationMode::kEntSkipHigh: return "ent_skip_high";
    case AggregationMode::kEntSkipLow: return "ent_skip_low";
  }
  return "unknown";
}

void LayerScoreBundle::validate() const {
  if (scores.empty()) throw std::invalid_argument("aggregation: empty bundle");
  for (const Vector& s : scores) {
    if (s.size() != scores.front().size()) {
      throw std::invalid_argument("aggregation: score vectors differ in length");
    }
  }
}

Vector layer_entropies(const LayerScoreBundle& bundle, const ProbMapping& mapping) {
  bundle.validate();
  Vector out;
  out.reserve(bundle.n_layers());
  for (const Vector& s : bundle.scores) out.push_back(normalized_entropy(score_to_prob(s, mapping)));
  return out;
}

Vector running_mean(const LayerScoreBundle& bundle) {
  bundle.validate();
  Vector out(bundle.length(), 0.0);
  for (const Vector& s : bundle.scores) axpy(1.0, s, out);
  const double n = static_cast<double>(bundle.n_layers());
  for (double& v : out) v /= n;
  return out;
}

void RunningMean::add(std::span<const double> scores) {
  if (count_ == 0) {
    mean_.assign(scores.begin(), scores.end());
    count_ = 1;
    return;
  }
  if (scores.size() != mean_.size()) throw std::invalid_argument("running mean: length mismatch");
  ++count_;
  const double inv = 1.0 / static_cast<double>(count_);
  for (std::size_t i = 0; i < mean_.size(); ++i) mean_[i] += (scores[i] - mean_[i]) * inv;
}

GatedMean entropy_gated_mean(const LayerScoreBundle& bundle, double gamma,
                             const ProbMapping& mapping, EntropyDirection direction) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("aggregation: gamma must lie in [0, 1]");
  const Vector entropies = layer_entropies(bundle, mapping);
  GatedMean out;
  out.included.assign(bundle.n_layers(), 0);
  out.scores.assign(bundle.length(), 0.0);
  double weight = 0.0;
  for (std::size_t l = 0; l < bundle.n_layers(); ++l) {
    const bool pass = direction == EntropyDirection::kSkipHigh ? entropies[l] <= gamma
                                                               : entropies[l] >= gamma;
    if (!pass) continue;
    out.included[l] = 1;
    weight += 1.0;
    axpy(1.0, bundle.scores[l], out.scores);
  }
  if (weight == 0.0) {
    out.fallback = true;
    out.scores = running_mean(bundle);
    return out;
  }
  // weight >= 1 here, so no guard term is needed in the denominator.
  for (double& v : out.scores) v /= weight;
  return out;
}

Vector aggregate_scores(const LayerScoreBundle& bundle, AggregationMode mode, double gamma,
                        const ProbMapping& mapping) {
  switch (mode) {
    case AggregationMode::kLayerMean: return running_mean(bundle);
    case AggregationMode::kEntSkipHigh:
      return entropy_gated_mean(bundle, gamma, mapping, EntropyDirection::kSkipHigh).scores;
    case AggregationMode::kEntSkipLow:
      return entropy_gated_mean(bundle, gamma, mapping, EntropyDirection::kSkipLow).scores;
    case AggregationMode::kNone: break;
  }
  throw std::invalid_argument("aggregation: mode 'none' has no shared score");
}

std::vector<std::size_t> index_reuse_plan(std::size_t n_layers, std::size_t group_size) {
  if (group_size == 0) throw std::invalid_argument("reuse: group size must be positive");
  std::vector<std::size_t> plan(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) plan[l] = (l / group_size) * group_size;
  return plan;
}

Matrix overlap_metric(const std::vector<std::vector<std::size_t>>& keep_sets) {
  const std::size_t n = keep_sets.size();
  std::vector<std::vector<std::size_t>> sorted = keep_sets;
  for (auto& s : sorted) std::sort(s.begin(), s.end());
  Matrix out(n, n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      if (a == b) {
        out(a, b) = 1.0;
        continue;
      }
      std::vector<std::size_t> inter;
      std::set_intersection(sorted[a].begin(), sorted[a].end(), sorted[b].begin(),
                            sorted[b].end(), std::back_inserter(inter));
      const std::size_t uni = sorted[a].size() + sorted[b].size() - inter.size();
      out(a, b) = uni == 0 ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni);
    }
  }
  return out;
}

double adjacent_overlap(const Matrix& jaccard) {
  if (jaccard.rows() < 2) return 1.0;
  double total = 0.0;
  for (std::size_t l = 0; l + 1 < jaccard.rows(); ++l) total += jaccard(l, l + 1);
  return total / static_cast<double>(jaccard.rows() - 1);
}

}  // namespace kvgate

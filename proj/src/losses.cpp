#include "adp/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_map>

namespace adp {

namespace {

bool g_chebyshev_fault = false;

void require_features(const char* name, const Tensor& f) {
  if (f.rank() != 2) {
    throw std::invalid_argument(std::string(name) + ": expected (N,d) features, got " +
                                shape_str(f.shape));
  }
}

std::unordered_map<int, int> label_counts(const std::vector<int>& labels) {
  std::unordered_map<int, int> counts;
  for (int y : labels) ++counts[y];
  return counts;
}

}  // namespace

void inject_chebyshev_fault(bool enabled) { g_chebyshev_fault = enabled; }
bool chebyshev_fault_injected() { return g_chebyshev_fault; }

double chebyshev_distance(const Tensor& x, const Tensor& y) {
  if (x.rank() != 1 || y.rank() != 1 || x.shape[0] != y.shape[0]) {
    throw std::invalid_argument("chebyshev_distance: extents differ, " + shape_str(x.shape) +
                                " vs " + shape_str(y.shape));
  }
  double best = 0.0;
  for (size_t i = 0; i < x.values.size(); ++i) {
    best = std::max(best, std::fabs(x.values[i] - y.values[i]));
  }
  if (g_chebyshev_fault) best += 1e-3;
  return best;
}

Tensor dcml_loss(const std::vector<Tensor>& branch_features, DcmlMetric metric) {
  const size_t k = branch_features.size();
  if (k < 2) {
    throw std::invalid_argument("dcml_loss: needs at least 2 branches, got " + std::to_string(k));
  }
  for (const auto& f : branch_features) {
    require_features("dcml_loss", f);
    if (f.shape != branch_features[0].shape) {
      throw std::invalid_argument("dcml_loss: branch shapes differ, " +
                                  shape_str(branch_features[0].shape) + " vs " +
                                  shape_str(f.shape));
    }
  }

  Tensor acc;  // scalar accumulator over pairs
  bool first = true;
  for (size_t i = 0; i < k; ++i) {
    for (size_t j = i + 1; j < k; ++j) {
      const Tensor diff = abs(sub(branch_features[i], branch_features[j]));
      Tensor per_sample;  // (N,)
      switch (metric) {
        case DcmlMetric::kChebyshev:
          per_sample = reduce_rows_max(diff);
          break;
        case DcmlMetric::kManhattan:
          per_sample = reduce_rows_sum(diff);
          break;
        case DcmlMetric::kEuclidean:
          per_sample = rows_norm(diff);
          break;
      }
      Tensor pair_mean = reduce_mean_all(per_sample);
      acc = first ? std::move(pair_mean) : add(acc, pair_mean);
      first = false;
    }
  }
  const double pairs = static_cast<double>(k) * static_cast<double>(k - 1) / 2.0;
  Tensor out = div(acc, pairs);
  if (g_chebyshev_fault && metric == DcmlMetric::kChebyshev) out = add(out, 1e-3);
  return out;
}

Tensor cross_entropy_branch(const Tensor& features, const std::vector<int>& labels,
                            const Tensor& classifier) {
  require_features("cross_entropy_branch", features);
  if (classifier.rank() != 2 || classifier.shape[1] != features.shape[1]) {
    throw std::invalid_argument("cross_entropy_branch: classifier " + shape_str(classifier.shape) +
                                " does not match features " + shape_str(features.shape));
  }
  const Tensor logits = matmul(features, transpose(classifier));
  return softmax_cross_entropy(logits, labels);
}

Tensor batch_hard_triplet(const Tensor& features, const std::vector<int>& labels,
                          const TripletConfig& config) {
  require_features("batch_hard_triplet", features);
  if (config.margin < 0.0) {
    throw std::invalid_argument("batch_hard_triplet: margin must be nonnegative");
  }
  const int64_t n = features.shape[0], d = features.shape[1];
  if (static_cast<int64_t>(labels.size()) != n) {
    throw std::invalid_argument("batch_hard_triplet: got " + std::to_string(labels.size()) +
                                " labels for a batch of " + std::to_string(n));
  }
  const auto counts = label_counts(labels);
  if (counts.size() < 2) {
    throw std::invalid_argument("batch_hard_triplet: batch holds a single label class");
  }
  for (const auto& [label, count] : counts) {
    if (count < 2) {
      throw std::invalid_argument("batch_hard_triplet: label " + std::to_string(label) +
                                  " has a single instance");
    }
  }

  // Mining runs on forward values only; the chosen indices are constants.
  std::vector<double> dist(static_cast<size_t>(n * n), 0.0);
  for (int64_t a = 0; a < n; ++a) {
    for (int64_t b = a + 1; b < n; ++b) {
      double s = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        const double diff = features.values[static_cast<size_t>(a * d + c)] -
                            features.values[static_cast<size_t>(b * d + c)];
        s += diff * diff;
      }
      const double e = std::sqrt(s);
      dist[static_cast<size_t>(a * n + b)] = e;
      dist[static_cast<size_t>(b * n + a)] = e;
    }
  }
  std::vector<int> hardest_pos(static_cast<size_t>(n), -1);
  std::vector<int> hardest_neg(static_cast<size_t>(n), -1);
  for (int64_t a = 0; a < n; ++a) {
    double worst_pos = -1.0, best_neg = 0.0;
    for (int64_t b = 0; b < n; ++b) {
      if (b == a) continue;
      const double e = dist[static_cast<size_t>(a * n + b)];
      if (labels[static_cast<size_t>(b)] == labels[static_cast<size_t>(a)]) {
        if (e > worst_pos) {
          worst_pos = e;
          hardest_pos[static_cast<size_t>(a)] = static_cast<int>(b);
        }
      } else if (hardest_neg[static_cast<size_t>(a)] < 0 || e < best_neg) {
        best_neg = e;
        hardest_neg[static_cast<size_t>(a)] = static_cast<int>(b);
      }
    }
  }

  const Tensor positives = index_rows(features, hardest_pos);
  const Tensor negatives = index_rows(features, hardest_neg);
  const Tensor d_ap = rows_norm(sub(features, positives));
  const Tensor d_an = rows_norm(sub(features, negatives));
  return reduce_mean_all(relu(add(sub(d_ap, d_an), config.margin)));
}

TotalLossBreakdown total_loss(const std::vector<Tensor>& branch_features,
                              const std::vector<Tensor>& branch_classifiers,
                              const std::vector<int>& labels, const LossWeights& weights,
                              const TripletConfig& triplet_config, DcmlMetric metric) {
  const size_t k = branch_features.size();
  if (k < 1) throw std::invalid_argument("total_loss: needs at least one branch");
  if (branch_classifiers.size() != k) {
    throw std::invalid_argument("total_loss: " + std::to_string(k) + " branches but " +
                                std::to_string(branch_classifiers.size()) + " classifiers");
  }
  if (weights.w1 < 0.0 || weights.w2 < 0.0 || weights.w3 < 0.0) {
    throw std::invalid_argument("total_loss: weights must be nonnegative");
  }

  TotalLossBreakdown out;
  Tensor acc = Tensor::scalar(0.0);
  for (size_t b = 0; b < k; ++b) {
    const Tensor ce = cross_entropy_branch(branch_features[b], labels, branch_classifiers[b]);
    const Tensor tri = batch_hard_triplet(branch_features[b], labels, triplet_config);
    out.ce += ce.item();
    out.triplet += tri.item();
    acc = add(acc, add(mul(ce, weights.w1), mul(tri, weights.w2)));
  }
  if (k >= 2 && weights.w3 != 0.0) {
    const Tensor dcml = dcml_loss(branch_features, metric);
    out.dcml = dcml.item();
    acc = add(acc, mul(dcml, weights.w3));
  }
  out.total = std::move(acc);
  return out;
}

}  // namespace adp

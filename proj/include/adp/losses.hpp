#pragma once

#include <vector>

#include "adp/tensor.hpp"

namespace adp {

// Weights of the three loss terms: total = sum_b (w1 CE_b + w2 Tri_b) + w3 DCML.
struct LossWeights {
  double w1 = 1.0;
  double w2 = 1.0;
  double w3 = 0.01;
};

struct TripletConfig {
  double margin = 0.3;  // Euclidean mining distance
};

// Distance used by the branch-alignment loss. Chebyshev is the default; the
// dense variants exist for ablation comparisons.
enum class DcmlMetric { kChebyshev, kManhattan, kEuclidean };

// Testing hook: perturbs the Chebyshev computations so the self-test suite
// can prove its oracle comparisons catch a broken implementation.
void inject_chebyshev_fault(bool enabled);
bool chebyshev_fault_injected();

// max_i |x_i - y_i| for two vectors of equal extent.
double chebyshev_distance(const Tensor& x, const Tensor& y);

// Mean over samples and branch pairs of the per-sample distance between
// branch features: (1/N) sum_n (1/C(k,2)) sum_{i<j} D(f_i[n], f_j[n]).
// Requires k >= 2 equal-shaped (N,d) feature tensors.
Tensor dcml_loss(const std::vector<Tensor>& branch_features,
                 DcmlMetric metric = DcmlMetric::kChebyshev);

// Batch-mean cross entropy of logits = features * classifier^T over identity
// labels. classifier is (C,d) with no bias.
Tensor cross_entropy_branch(const Tensor& features, const std::vector<int>& labels,
                            const Tensor& classifier);

// Hardest-positive / hardest-negative triplet loss: per anchor, the farthest
// same-label and nearest different-label batchmates (selection is a constant
// of the forward pass), hinged at the margin, averaged over anchors. Every
// label must appear at least twice and the batch must hold >= 2 labels.
Tensor batch_hard_triplet(const Tensor& features, const std::vector<int>& labels,
                          const TripletConfig& config = {});

struct TotalLossBreakdown {
  Tensor total;
  double ce = 0.0;       // sum over branches
  double triplet = 0.0;  // sum over branches
  double dcml = 0.0;     // 0 when k < 2
};

// Weighted sum over branches plus the alignment term (included only when
// k >= 2). One classifier per branch.
TotalLossBreakdown total_loss(const std::vector<Tensor>& branch_features,
                              const std::vector<Tensor>& branch_classifiers,
                              const std::vector<int>& labels, const LossWeights& weights,
                              const TripletConfig& triplet_config = {},
                              DcmlMetric metric = DcmlMetric::kChebyshev);

}  // namespace adp

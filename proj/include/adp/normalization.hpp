#pragma once

#include <vector>

#include "adp/tensor.hpp"

namespace adp {

inline constexpr double kDefaultNormEps = 1e-5;

// Per-instance channel statistics of a (N,L,d) feature map over its location
// axis. sigma = sqrt(var + eps), so sigma >= sqrt(eps) > 0.
struct ChannelStats {
  Tensor mu;     // (N,d)
  Tensor sigma;  // (N,d)
  double eps = kDefaultNormEps;
};

ChannelStats compute_channel_stats(const Tensor& x, double eps = kDefaultNormEps);

// Style-donor assignment: sample i is paired with the batchmate whose channel
// mean vector is farthest (Euclidean), ties broken by lowest index. A batch
// of one pairs with itself.
struct MatchAssignment {
  std::vector<int> indices;
};

MatchAssignment max_deviance_match(const Tensor& mu);

// Learnable per-channel parameters of one normalization module.
struct DyMainParams {
  Tensor gamma;  // (d), init 1
  Tensor beta;   // (d), init 0
  Tensor alpha;  // (d), init 0.5, unconstrained
  double eps = kDefaultNormEps;

  static DyMainParams init(int64_t channels);
};

// Mix-in variant switch: the printed formula divides the normalized content
// by the donor sigma; the classical AdaIN form multiplies by it instead.
struct NormalizationOptions {
  bool adain_multiply = false;
};

// (x - mu) / sigma per instance and channel over locations.
Tensor instance_norm(const Tensor& x, double eps = kDefaultNormEps);

// (xbar / sigma[M[i]] + mu[M[i]]) * gamma + beta, with the donor index a
// constant of the forward pass. Gradients flow through both the content row
// and the donor row of the statistics.
Tensor main_normalize(const Tensor& x, const ChannelStats& stats, const MatchAssignment& match,
                      const DyMainParams& params, const NormalizationOptions& opts = {});

// Per-channel blend alpha*MAIN + (1-alpha)*IN, where the plain-IN term shares
// the same gamma/beta affine as the MAIN term.
Tensor dymain_forward(const Tensor& x, const DyMainParams& params,
                      const NormalizationOptions& opts = {});

}  // namespace adp

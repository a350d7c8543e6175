#include "adp/normalization.hpp"

#include <cmath>
#include <stdexcept>

namespace adp {

namespace {

void require_feature_map(const char* name, const Tensor& x) {
  if (x.rank() != 3) {
    throw std::invalid_argument(std::string(name) + ": expected a (N,L,d) feature map, got " +
                                shape_str(x.shape));
  }
}

// (x - mu)/sigma with stats expanded over the location axis.
Tensor standardize(const Tensor& x, const ChannelStats& stats) {
  const int64_t l = x.shape[1];
  return div(sub(x, expand_locations(stats.mu, l)), expand_locations(stats.sigma, l));
}

}  // namespace

ChannelStats compute_channel_stats(const Tensor& x, double eps) {
  require_feature_map("compute_channel_stats", x);
  if (eps < 0.0) throw std::invalid_argument("compute_channel_stats: eps must be nonnegative");
  LocationStats st = reduce_stats(x);
  ChannelStats out;
  out.mu = std::move(st.mean);
  out.sigma = sqrt(add(st.var, eps));
  out.eps = eps;
  return out;
}

MatchAssignment max_deviance_match(const Tensor& mu) {
  if (mu.rank() != 2) {
    throw std::invalid_argument("max_deviance_match: expected (N,d) means, got " +
                                shape_str(mu.shape));
  }
  const int64_t n = mu.shape[0], d = mu.shape[1];
  for (double v : mu.values) {
    if (!std::isfinite(v)) {
      throw std::runtime_error("max_deviance_match: non-finite channel means");
    }
  }
  MatchAssignment match;
  match.indices.assign(static_cast<size_t>(n), 0);
  if (n == 1) return match;

  for (int64_t i = 0; i < n; ++i) {
    double best = -1.0;
    int best_j = -1;
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double dist2 = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        const double diff = mu.values[static_cast<size_t>(i * d + c)] -
                            mu.values[static_cast<size_t>(j * d + c)];
        dist2 += diff * diff;
      }
      if (dist2 > best) {
        best = dist2;
        best_j = static_cast<int>(j);
      }
    }
    match.indices[static_cast<size_t>(i)] = best_j;
  }
  return match;
}

DyMainParams DyMainParams::init(int64_t channels) {
  DyMainParams p;
  p.gamma = Tensor::full({channels}, 1.0);
  p.beta = Tensor::zeros({channels});
  p.alpha = Tensor::full({channels}, 0.5);
  return p;
}

Tensor instance_norm(const Tensor& x, double eps) {
  require_feature_map("instance_norm", x);
  return standardize(x, compute_channel_stats(x, eps));
}

Tensor main_normalize(const Tensor& x, const ChannelStats& stats, const MatchAssignment& match,
                      const DyMainParams& params, const NormalizationOptions& opts) {
  require_feature_map("main_normalize", x);
  const int64_t n = x.shape[0], l = x.shape[1];
  if (static_cast<int64_t>(match.indices.size()) != n) {
    throw std::invalid_argument("main_normalize: match assignment covers " +
                                std::to_string(match.indices.size()) + " samples, batch has " +
                                std::to_string(n));
  }
  const Tensor xbar = standardize(x, stats);
  const Tensor sigma_style = expand_locations(index_rows(stats.sigma, match.indices), l);
  const Tensor mu_style = expand_locations(index_rows(stats.mu, match.indices), l);
  const Tensor mixed = opts.adain_multiply ? mul(xbar, sigma_style) : div(xbar, sigma_style);
  return add(mul(add(mixed, mu_style), params.gamma), params.beta);
}

Tensor dymain_forward(const Tensor& x, const DyMainParams& params,
                      const NormalizationOptions& opts) {
  require_feature_map("dymain_forward", x);
  const ChannelStats stats = compute_channel_stats(x, params.eps);
  const MatchAssignment match = max_deviance_match(stats.mu);

  const Tensor main_term = main_normalize(x, stats, match, params, opts);
  const Tensor in_term = add(mul(standardize(x, stats), params.gamma), params.beta);
  return add(mul(main_term, params.alpha), mul(in_term, sub(1.0, params.alpha)));
}

}  // namespace adp

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "adp/gradcheck.hpp"
#include "adp/normalization.hpp"
#include "adp/tensor.hpp"

using namespace adp;

namespace {

Tensor random_map(std::mt19937_64& rng, int64_t n, int64_t l, int64_t d, double sigma = 1.0) {
  std::normal_distribution<double> gauss(0.0, sigma);
  Tensor x = Tensor::zeros({n, l, d});
  for (auto& v : x.values) v = gauss(rng);
  return x;
}

// Independent pairing oracle: explicit scan over every ordered pair.
std::vector<int> brute_force_match(const Tensor& mu) {
  const int64_t n = mu.shape[0], d = mu.shape[1];
  std::vector<int> match(static_cast<size_t>(n), 0);
  if (n == 1) return match;
  for (int64_t i = 0; i < n; ++i) {
    double best = -1.0;
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double dist = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        const double diff = mu.at({i, c}) - mu.at({j, c});
        dist += diff * diff;
      }
      dist = std::sqrt(dist);
      if (dist > best) {
        best = dist;
        match[static_cast<size_t>(i)] = static_cast<int>(j);
      }
    }
  }
  return match;
}

}  // namespace

TEST_CASE("instance norm standardizes a two-point sequence") {
  const Tensor x = Tensor::from({1, 2, 1}, {1, 3});
  const Tensor out = instance_norm(x, 0.0);
  CHECK(out.values[0] == doctest::Approx(-1).epsilon(1e-12));
  CHECK(out.values[1] == doctest::Approx(1).epsilon(1e-12));
}

TEST_CASE("instance norm of constant input is zero") {
  const Tensor x = Tensor::full({2, 3, 2}, 4.0);
  const Tensor out = instance_norm(x);
  for (double v : out.values) CHECK(v == 0.0);
}

TEST_CASE("instance norm three-point values") {
  const Tensor x = Tensor::from({1, 3, 1}, {0, 2, 4});
  const Tensor out = instance_norm(x, 0.0);
  CHECK(out.values[0] == doctest::Approx(-1.2247).epsilon(1e-4));
  CHECK(out.values[1] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(out.values[2] == doctest::Approx(1.2247).epsilon(1e-4));
}

TEST_CASE("instance norm output has zero location mean") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_map(rng, 3, 5, 4, 2.0);
    const Tensor out = instance_norm(x);
    for (int64_t i = 0; i < 3; ++i) {
      for (int64_t c = 0; c < 4; ++c) {
        double m = 0.0;
        for (int64_t l = 0; l < 5; ++l) m += out.at({i, l, c});
        CHECK(std::fabs(m / 5.0) < 1e-10);
      }
    }
  }
}

TEST_CASE("channel stats sigma respects the eps floor") {
  const Tensor x = Tensor::full({2, 3, 2}, 1.0);
  const ChannelStats st = compute_channel_stats(x, 1e-5);
  for (double s : st.sigma.values) CHECK(s >= std::sqrt(1e-5) - 1e-15);
}

TEST_CASE("max deviance match on a line of means") {
  const Tensor mu = Tensor::from({3, 1}, {0, 1, 5});
  const MatchAssignment m = max_deviance_match(mu);
  CHECK(m.indices == std::vector<int>{2, 2, 0});
}

TEST_CASE("max deviance match degenerate batch of one") {
  const MatchAssignment m = max_deviance_match(Tensor::from({1, 2}, {3, 4}));
  CHECK(m.indices == std::vector<int>{0});
}

TEST_CASE("max deviance match ties break to the lowest index") {
  const Tensor mu = Tensor::from({3, 1}, {0, 0, 0});
  const MatchAssignment m = max_deviance_match(mu);
  CHECK(m.indices == std::vector<int>{1, 0, 0});
}

TEST_CASE("max deviance match agrees with the brute-force oracle") {
  std::mt19937_64 rng(37);
  std::uniform_int_distribution<int64_t> pick_n(1, 16), pick_d(1, 8);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t n = pick_n(rng), d = pick_d(rng);
    Tensor mu = Tensor::zeros({n, d});
    for (auto& v : mu.values) v = gauss(rng);
    CHECK(max_deviance_match(mu).indices == brute_force_match(mu));
  }
}

TEST_CASE("main normalize with a self match restores shifted stats") {
  // N=1: style donor is the sample itself; xbar=[-1,1], sigma=1, mu=2.
  const Tensor x = Tensor::from({1, 2, 1}, {1, 3});
  const ChannelStats st = compute_channel_stats(x, 0.0);
  const MatchAssignment match = max_deviance_match(st.mu);
  const DyMainParams p = DyMainParams::init(1);
  const Tensor out = main_normalize(x, st, match, p);
  CHECK(out.values[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(out.values[1] == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("main normalize collapses to beta when gamma is zero") {
  std::mt19937_64 rng(41);
  const Tensor x = random_map(rng, 2, 3, 2);
  const ChannelStats st = compute_channel_stats(x, 1e-5);
  const MatchAssignment match = max_deviance_match(st.mu);
  DyMainParams p = DyMainParams::init(2);
  p.gamma = Tensor::zeros({2});
  p.beta = Tensor::full({2}, 7.0);
  const Tensor out = main_normalize(x, st, match, p);
  for (double v : out.values) CHECK(v == doctest::Approx(7.0).epsilon(1e-12));
}

TEST_CASE("main normalize hand evaluation with crossed styles") {
  // x1 locations {0,2}: mu=1 sigma=1; x2 locations {10,14}: mu=12 sigma=2.
  const Tensor x = Tensor::from({2, 2, 1}, {0, 2, 10, 14});
  const ChannelStats st = compute_channel_stats(x, 0.0);
  const MatchAssignment match = max_deviance_match(st.mu);
  CHECK(match.indices == std::vector<int>{1, 0});
  const DyMainParams p = DyMainParams::init(1);
  const Tensor out = main_normalize(x, st, match, p);
  CHECK(out.at({0, 0, 0}) == doctest::Approx(11.5).epsilon(1e-12));
  CHECK(out.at({0, 1, 0}) == doctest::Approx(12.5).epsilon(1e-12));
  CHECK(out.at({1, 0, 0}) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(out.at({1, 1, 0}) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("adain_multiply variant scales instead of dividing") {
  const Tensor x = Tensor::from({2, 2, 1}, {0, 2, 10, 14});
  const ChannelStats st = compute_channel_stats(x, 0.0);
  const MatchAssignment match = max_deviance_match(st.mu);
  const DyMainParams p = DyMainParams::init(1);
  const Tensor out = main_normalize(x, st, match, p, {.adain_multiply = true});
  // xbar1 = [-1,1] scaled by sigma2=2 shifted by mu2=12.
  CHECK(out.at({0, 0, 0}) == doctest::Approx(10.0).epsilon(1e-12));
  CHECK(out.at({0, 1, 0}) == doctest::Approx(14.0).epsilon(1e-12));
}

TEST_CASE("dymain blend endpoints reduce to their constituents") {
  std::mt19937_64 rng(43);
  const Tensor x = random_map(rng, 3, 4, 2);

  DyMainParams p0 = DyMainParams::init(2);
  p0.alpha = Tensor::zeros({2});
  const Tensor at0 = dymain_forward(x, p0);
  const Tensor in = instance_norm(x, p0.eps);
  for (size_t i = 0; i < at0.values.size(); ++i) {
    CHECK(std::fabs(at0.values[i] - in.values[i]) <= 1e-12);
  }

  DyMainParams p1 = DyMainParams::init(2);
  p1.alpha = Tensor::full({2}, 1.0);
  const Tensor at1 = dymain_forward(x, p1);
  const ChannelStats st = compute_channel_stats(x, p1.eps);
  const Tensor main_out = main_normalize(x, st, max_deviance_match(st.mu), p1);
  for (size_t i = 0; i < at1.values.size(); ++i) {
    CHECK(std::fabs(at1.values[i] - main_out.values[i]) <= 1e-12);
  }
}

TEST_CASE("dymain blend is linear in alpha") {
  std::mt19937_64 rng(47);
  std::uniform_real_distribution<double> uni(-0.5, 1.5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_map(rng, 4, 3, 3);
    DyMainParams p = DyMainParams::init(3);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& v : p.gamma.values) v = 1.0 + 0.1 * gauss(rng);
    for (auto& v : p.beta.values) v = 0.1 * gauss(rng);

    DyMainParams p0 = p;
    p0.alpha = Tensor::zeros({3});
    DyMainParams p1 = p;
    p1.alpha = Tensor::full({3}, 1.0);
    const Tensor out0 = dymain_forward(x, p0);
    const Tensor out1 = dymain_forward(x, p1);

    DyMainParams pa = p;
    for (auto& v : pa.alpha.values) v = uni(rng);
    const Tensor blended = dymain_forward(x, pa);
    for (int64_t i = 0; i < 4; ++i) {
      for (int64_t l = 0; l < 3; ++l) {
        for (int64_t c = 0; c < 3; ++c) {
          const double a = pa.alpha.values[static_cast<size_t>(c)];
          const double expected = a * out1.at({i, l, c}) + (1.0 - a) * out0.at({i, l, c});
          CHECK(std::fabs(blended.at({i, l, c}) - expected) <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("half blend of the crossed-style example is the endpoint mean") {
  const Tensor x = Tensor::from({2, 2, 1}, {0, 2, 10, 14});
  DyMainParams p = DyMainParams::init(1);
  p.eps = 0.0;
  DyMainParams p0 = p;
  p0.alpha = Tensor::zeros({1});
  DyMainParams p1 = p;
  p1.alpha = Tensor::full({1}, 1.0);
  const Tensor out0 = dymain_forward(x, p0);
  const Tensor out1 = dymain_forward(x, p1);
  const Tensor half = dymain_forward(x, p);  // alpha = 0.5
  for (size_t i = 0; i < half.values.size(); ++i) {
    CHECK(half.values[i] == doctest::Approx(0.5 * (out0.values[i] + out1.values[i]))
                                .epsilon(1e-12));
  }
}

TEST_CASE("batch permutation permutes dymain output identically") {
  std::mt19937_64 rng(53);
  for (int trial = 0; trial < 10; ++trial) {
    const int64_t n = 5, l = 3, d = 2;
    const Tensor x = random_map(rng, n, l, d, 2.0);
    DyMainParams p = DyMainParams::init(d);
    const Tensor out = dymain_forward(x, p);

    std::vector<int> perm = {3, 0, 4, 1, 2};
    Tensor xp = Tensor::zeros({n, l, d});
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < l; ++j) {
        for (int64_t c = 0; c < d; ++c) {
          xp.at({i, j, c}) = x.at({perm[static_cast<size_t>(i)], j, c});
        }
      }
    }
    const Tensor outp = dymain_forward(xp, p);
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = 0; j < l; ++j) {
        for (int64_t c = 0; c < d; ++c) {
          CHECK(outp.at({i, j, c}) ==
                doctest::Approx(out.at({perm[static_cast<size_t>(i)], j, c})).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("dymain gradients match finite differences") {
  std::mt19937_64 rng(59);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    const int64_t n = 3, l = 3, d = 2;
    Tensor x = random_map(rng, n, l, d, 2.0);
    DyMainParams p = DyMainParams::init(d);
    for (auto& v : p.gamma.values) v = 1.0 + 0.2 * gauss(rng);
    for (auto& v : p.beta.values) v = 0.2 * gauss(rng);
    for (auto& v : p.alpha.values) v = 0.3 + 0.4 * gauss(rng);
    Tensor target = random_map(rng, n, l, d);

    auto loss_fn = [&](const std::vector<Tensor>& leaves) {
      DyMainParams q;
      q.gamma = leaves[1];
      q.beta = leaves[2];
      q.alpha = leaves[3];
      q.eps = p.eps;
      const Tensor err = sub(dymain_forward(leaves[0], q), target);
      return reduce_mean_all(mul(err, err));
    };
    CHECK(gradcheck_max_rel_error(loss_fn, {x, p.gamma, p.beta, p.alpha}) < 1e-4);
  }
}

#include "adp/selftest.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <sstream>

#include "adp/checkpoint.hpp"
#include "adp/data_eval.hpp"
#include "adp/gradcheck.hpp"
#include "adp/losses.hpp"
#include "adp/model.hpp"
#include "adp/normalization.hpp"
#include "adp/schedules.hpp"

namespace adp {

namespace {

// Tiny assertion collector: remembers the first failing condition.
struct Check {
  bool ok = true;
  std::string detail;
  int count = 0;

  void expect(bool condition, const std::string& what) {
    ++count;
    if (ok && !condition) {
      ok = false;
      detail = what;
    }
  }
  SelfTestResult result(const std::string& name) const {
    return {name, ok, ok ? std::to_string(count) + " assertions" : detail};
  }
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

Tensor random_tensor(std::mt19937_64& rng, Shape shape, double sigma = 1.0) {
  std::normal_distribution<double> gauss(0.0, sigma);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values) v = gauss(rng);
  return t;
}

// ---- tie-margin guards: gradient checks only run on instances whose
// discrete selections are decided by at least this much ----

constexpr double kTieMargin = 1e-3;

double pairing_margin(const Tensor& mu) {
  const int64_t n = mu.shape[0], d = mu.shape[1];
  if (n <= 2) return 1.0;
  double worst = 1e300;
  for (int64_t i = 0; i < n; ++i) {
    double best = -1.0, second = -1.0;
    for (int64_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double dist = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        const double diff = mu.at({i, c}) - mu.at({j, c});
        dist += diff * diff;
      }
      dist = std::sqrt(dist);
      if (dist > best) {
        second = best;
        best = dist;
      } else if (dist > second) {
        second = dist;
      }
    }
    worst = std::min(worst, best - second);
  }
  return worst;
}

double dcml_margin(const std::vector<Tensor>& feats) {
  double worst = 1e300;
  for (size_t i = 0; i < feats.size(); ++i) {
    for (size_t j = i + 1; j < feats.size(); ++j) {
      const int64_t n = feats[i].shape[0], d = feats[i].shape[1];
      for (int64_t s = 0; s < n; ++s) {
        double best = -1.0, second = -1.0;
        for (int64_t c = 0; c < d; ++c) {
          const double v = std::fabs(feats[i].at({s, c}) - feats[j].at({s, c}));
          if (v > best) {
            second = best;
            best = v;
          } else if (v > second) {
            second = v;
          }
        }
        worst = std::min(worst, d > 1 ? best - second : best);
        worst = std::min(worst, best);  // away from the |.| kink as well
      }
    }
  }
  return worst;
}

double triplet_margin_guard(const Tensor& f, const std::vector<int>& labels, double margin) {
  const int64_t n = f.shape[0], d = f.shape[1];
  auto dist = [&](int64_t a, int64_t b) {
    double s = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      const double diff = f.at({a, c}) - f.at({b, c});
      s += diff * diff;
    }
    return std::sqrt(s);
  };
  double worst = 1e300;
  for (int64_t a = 0; a < n; ++a) {
    std::vector<double> pos, neg;
    for (int64_t b = 0; b < n; ++b) {
      if (b == a) continue;
      (labels[static_cast<size_t>(b)] == labels[static_cast<size_t>(a)] ? pos : neg)
          .push_back(dist(a, b));
    }
    std::sort(pos.begin(), pos.end());
    std::sort(neg.begin(), neg.end());
    const double dap = pos.back(), dan = neg.front();
    if (pos.size() > 1) worst = std::min(worst, dap - pos[pos.size() - 2]);
    if (neg.size() > 1) worst = std::min(worst, neg[1] - dan);
    worst = std::min(worst, std::fabs(dap - dan + margin));  // relu kink
    worst = std::min(worst, dap);                            // sqrt kink
    worst = std::min(worst, dan);
  }
  return worst;
}

}  // namespace

SelfTestResult check_schedule_closed_forms() {
  Check c;
  const std::vector<int> periods = {120, 60, 30, 24, 20, 15, 12};
  const std::vector<int> expected_cycles = {1, 2, 4, 5, 6, 8, 10};
  double max_base = 0.0, prev_base = 0.0;
  for (size_t i = 0; i < periods.size(); ++i) {
    const BranchScheduleSpec spec{.total_epochs = 120, .period = periods[i]};
    const BranchScheduleDerived d = derive_branch_schedule(spec);
    c.expect(d.cycles == expected_cycles[i],
             "cycle count for period " + std::to_string(periods[i]) + " is " +
                 std::to_string(d.cycles));
    c.expect(std::fabs(std::pow(d.per_cycle_decay, d.cycles) - 0.5) < 1e-12,
             "per-cycle decay does not compose to lambda for period " +
                 std::to_string(periods[i]));
    c.expect(d.eta_base > prev_base, "base rates are not monotone in cycle count");
    prev_base = d.eta_base;
    max_base = std::max(max_base, d.eta_base);

    for (int q = 1; q < d.cycles; ++q) {
      for (int t = 0; t < periods[i]; t += std::max(1, periods[i] / 5)) {
        const double lhs = pmoc_lr_at(spec, q * periods[i] + t);
        const double rhs = pmoc_lr_at(spec, t) * std::pow(d.per_cycle_decay, q);
        c.expect(std::fabs(lhs - rhs) < 1e-12, "cyclic structure broken at epoch " +
                                                   std::to_string(q * periods[i] + t));
      }
    }
  }
  c.expect(std::fabs(max_base - 0.2559) < 0.001,
           "peak base rate " + fmt(max_base) + " misses 0.2559 +- 0.001");

  const MainScheduleSpec m;
  c.expect(std::fabs(main_lr_at(m, 0) - 0.01 * m.eta) < 1e-15, "warmup start is not 0.01 eta");
  const double at_boundary = main_lr_at(m, m.warmup_epochs);
  c.expect(std::fabs(at_boundary - m.eta) < 1e-12, "warmup boundary misses eta");
  for (int e = m.warmup_epochs + 1; e < m.total_epochs; ++e) {
    c.expect(main_lr_at(m, e) <= main_lr_at(m, e - 1) + 1e-15,
             "main schedule not nonincreasing at epoch " + std::to_string(e));
  }
  return c.result("schedule closed forms");
}

SelfTestResult check_normalization_reductions() {
  Check c;
  std::mt19937_64 rng(1001);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = random_tensor(rng, {4, 3, 3}, 2.0);
    DyMainParams p = DyMainParams::init(3);
    std::normal_distribution<double> gauss(0.0, 0.3);
    for (auto& v : p.gamma.values) v = 1.0 + gauss(rng);
    for (auto& v : p.beta.values) v = gauss(rng);

    DyMainParams p0 = p;
    p0.gamma = Tensor::full({3}, 1.0);
    p0.beta = Tensor::zeros({3});
    p0.alpha = Tensor::zeros({3});
    const Tensor at0 = dymain_forward(x, p0);
    const Tensor in = instance_norm(x, p.eps);
    for (size_t i = 0; i < at0.values.size(); ++i) {
      c.expect(std::fabs(at0.values[i] - in.values[i]) <= 1e-12,
               "alpha=0 with identity affine does not reduce to instance norm");
    }

    DyMainParams p1 = p;
    p1.alpha = Tensor::full({3}, 1.0);
    const Tensor at1 = dymain_forward(x, p1);
    const ChannelStats st = compute_channel_stats(x, p.eps);
    const Tensor main_out = main_normalize(x, st, max_deviance_match(st.mu), p1);
    for (size_t i = 0; i < at1.values.size(); ++i) {
      c.expect(std::fabs(at1.values[i] - main_out.values[i]) <= 1e-12,
               "alpha=1 does not reduce to the style-mixed normalization");
    }

    DyMainParams pa = p;
    std::uniform_real_distribution<double> uni(-0.5, 1.5);
    for (auto& v : pa.alpha.values) v = uni(rng);
    DyMainParams pz = p;
    pz.alpha = Tensor::zeros({3});
    DyMainParams po = p;
    po.alpha = Tensor::full({3}, 1.0);
    const Tensor blend = dymain_forward(x, pa);
    const Tensor end0 = dymain_forward(x, pz);
    const Tensor end1 = dymain_forward(x, po);
    for (int64_t i = 0; i < 4; ++i) {
      for (int64_t l = 0; l < 3; ++l) {
        for (int64_t ch = 0; ch < 3; ++ch) {
          const double a = pa.alpha.values[static_cast<size_t>(ch)];
          const double want = a * end1.at({i, l, ch}) + (1.0 - a) * end0.at({i, l, ch});
          c.expect(std::fabs(blend.at({i, l, ch}) - want) <= 1e-12,
                   "blend is not linear in alpha");
        }
      }
    }
  }
  return c.result("normalization reductions");
}

SelfTestResult check_pairing_brute_force() {
  Check c;
  std::mt19937_64 rng(1003);
  std::uniform_int_distribution<int64_t> pick_n(1, 16), pick_d(1, 8);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t n = pick_n(rng), d = pick_d(rng);
    const Tensor mu = random_tensor(rng, {n, d});
    const MatchAssignment got = max_deviance_match(mu);

    std::vector<int> want(static_cast<size_t>(n), 0);
    if (n > 1) {
      for (int64_t i = 0; i < n; ++i) {
        double best = -1.0;
        for (int64_t j = 0; j < n; ++j) {
          if (j == i) continue;
          double dist = 0.0;
          for (int64_t ch = 0; ch < d; ++ch) {
            const double diff = mu.at({i, ch}) - mu.at({j, ch});
            dist += diff * diff;
          }
          if (dist > best) {
            best = dist;
            want[static_cast<size_t>(i)] = static_cast<int>(j);
          }
        }
      }
    }
    c.expect(got.indices == want, "pairing disagrees with brute force on trial " +
                                      std::to_string(trial));
  }
  return c.result("max-deviance pairing vs brute force");
}

SelfTestResult check_dcml_brute_force() {
  Check c;
  std::mt19937_64 rng(1005);
  std::uniform_int_distribution<int64_t> pick_k(2, 5), pick_n(1, 8), pick_d(1, 16);
  for (int trial = 0; trial < 100; ++trial) {
    const int64_t k = pick_k(rng), n = pick_n(rng), d = pick_d(rng);
    std::vector<Tensor> feats;
    for (int64_t b = 0; b < k; ++b) feats.push_back(random_tensor(rng, {n, d}));

    double total = 0.0;
    for (int64_t i = 0; i < k; ++i) {
      for (int64_t j = i + 1; j < k; ++j) {
        for (int64_t s = 0; s < n; ++s) {
          double cheb = 0.0;
          for (int64_t ch = 0; ch < d; ++ch) {
            cheb = std::max(cheb, std::fabs(feats[static_cast<size_t>(i)].at({s, ch}) -
                                            feats[static_cast<size_t>(j)].at({s, ch})));
          }
          total += cheb;
        }
      }
    }
    const double pairs = static_cast<double>(k * (k - 1) / 2);
    const double want = total / pairs / static_cast<double>(n);
    const double got = dcml_loss(feats).item();
    c.expect(std::fabs(got - want) < 1e-12, "alignment loss " + fmt(got) +
                                                " disagrees with double-loop oracle " +
                                                fmt(want));
  }
  return c.result("alignment loss vs double-loop oracle");
}

SelfTestResult check_triplet_exhaustive() {
  Check c;
  std::mt19937_64 rng(1007);
  std::uniform_int_distribution<int> pick_pairs(2, 4), pick_d(1, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const int pairs = pick_pairs(rng);
    const int64_t n = 2 * pairs;
    const Tensor f = random_tensor(rng, {n, pick_d(rng)});
    std::vector<int> labels;
    for (int p = 0; p < pairs; ++p) {
      labels.push_back(p);
      labels.push_back(p);
    }

    const int64_t d = f.shape[1];
    auto dist = [&](int64_t a, int64_t b) {
      double s = 0.0;
      for (int64_t ch = 0; ch < d; ++ch) {
        const double diff = f.at({a, ch}) - f.at({b, ch});
        s += diff * diff;
      }
      return std::sqrt(s);
    };
    double want = 0.0;
    for (int64_t a = 0; a < n; ++a) {
      double dap = -1.0, dan = 1e300;
      for (int64_t b = 0; b < n; ++b) {
        if (b == a) continue;
        if (labels[static_cast<size_t>(b)] == labels[static_cast<size_t>(a)]) {
          dap = std::max(dap, dist(a, b));
        } else {
          dan = std::min(dan, dist(a, b));
        }
      }
      want += std::max(0.0, dap - dan + 0.3);
    }
    want /= static_cast<double>(n);
    const double got = batch_hard_triplet(f, labels, {.margin = 0.3}).item();
    c.expect(std::fabs(got - want) < 1e-12,
             "triplet loss disagrees with exhaustive enumeration on trial " +
                 std::to_string(trial));
  }
  return c.result("batch-hard triplet vs exhaustive enumeration");
}

SelfTestResult check_retrieval_ap_oracle() {
  Check c;
  std::mt19937_64 rng(1009);
  std::uniform_int_distribution<int64_t> pick_g(4, 20), pick_d(2, 6);
  std::uniform_int_distribution<int> pick_ids(2, 4);
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t ng = pick_g(rng), d = pick_d(rng), nq = 3;
    const int nids = pick_ids(rng);
    const Tensor q = random_tensor(rng, {nq, d});
    const Tensor g = random_tensor(rng, {ng, d});
    std::uniform_int_distribution<int> pick_label(0, nids - 1);
    std::vector<int> qid, gid;
    const std::vector<int> qdom(static_cast<size_t>(nq), 0);
    const std::vector<int> gdom(static_cast<size_t>(ng), 1);
    for (int64_t i = 0; i < nq; ++i) qid.push_back(pick_label(rng));
    for (int64_t j = 0; j < ng; ++j) gid.push_back(pick_label(rng));
    for (int64_t i = 0; i < nq; ++i) gid[static_cast<size_t>(i)] = qid[static_cast<size_t>(i)];

    const RetrievalMetrics m = evaluate_retrieval(q, qid, qdom, g, gid, gdom);

    auto unit_row = [&](const Tensor& t, int64_t r) {
      std::vector<double> row(static_cast<size_t>(d));
      double norm = 0.0;
      for (int64_t ch = 0; ch < d; ++ch) norm += t.at({r, ch}) * t.at({r, ch});
      norm = std::sqrt(norm);
      for (int64_t ch = 0; ch < d; ++ch) row[static_cast<size_t>(ch)] = t.at({r, ch}) / norm;
      return row;
    };
    double want = 0.0;
    for (int64_t i = 0; i < nq; ++i) {
      const auto qrow = unit_row(q, i);
      std::vector<std::pair<double, int64_t>> order;
      for (int64_t j = 0; j < ng; ++j) {
        const auto grow = unit_row(g, j);
        double dist = 0.0;
        for (int64_t ch = 0; ch < d; ++ch) {
          dist += (qrow[static_cast<size_t>(ch)] - grow[static_cast<size_t>(ch)]) *
                  (qrow[static_cast<size_t>(ch)] - grow[static_cast<size_t>(ch)]);
        }
        order.emplace_back(dist, j);
      }
      std::sort(order.begin(), order.end());
      std::vector<int> relevance;
      for (const auto& [dist, j] : order) {
        relevance.push_back(gid[static_cast<size_t>(j)] == qid[static_cast<size_t>(i)] ? 1 : 0);
      }
      want += average_precision_oracle(relevance);
    }
    want /= static_cast<double>(nq);
    c.expect(std::fabs(m.mAP - want) < 1e-12, "mAP " + fmt(m.mAP) +
                                                  " disagrees with oracle composition " +
                                                  fmt(want));
  }
  return c.result("retrieval mAP vs AP oracle");
}

SelfTestResult check_gradient_fidelity() {
  Check c;
  for (int instance = 0; instance < 20; ++instance) {
    const int kind = instance % 4;
    bool accepted = false;
    for (int attempt = 0; attempt < 50 && !accepted; ++attempt) {
      std::mt19937_64 rng(2000 + 13 * instance + 1009 * attempt);
      double err = -1.0;

      if (kind == 0) {
        // Style-mixed normalization feeding the alignment loss.
        const Tensor x = random_tensor(rng, {4, 3, 4}, 1.5);
        std::vector<Tensor> leaves = {x};
        for (int b = 0; b < 2; ++b) {
          DyMainParams p = DyMainParams::init(4);
          std::normal_distribution<double> gauss(0.0, 0.4);
          for (auto& v : p.gamma.values) v = 1.0 + gauss(rng);
          for (auto& v : p.beta.values) v = gauss(rng);
          for (auto& v : p.alpha.values) v = 0.5 + gauss(rng);
          leaves.push_back(p.gamma);
          leaves.push_back(p.beta);
          leaves.push_back(p.alpha);
        }
        auto features_of = [](const std::vector<Tensor>& ls) {
          std::vector<Tensor> feats;
          for (int b = 0; b < 2; ++b) {
            DyMainParams p;
            p.gamma = ls[static_cast<size_t>(1 + 3 * b)];
            p.beta = ls[static_cast<size_t>(2 + 3 * b)];
            p.alpha = ls[static_cast<size_t>(3 + 3 * b)];
            feats.push_back(take_location(dymain_forward(ls[0], p), 0));
          }
          return feats;
        };
        const ChannelStats st = compute_channel_stats(x, kDefaultNormEps);
        if (pairing_margin(st.mu) < kTieMargin) continue;
        if (dcml_margin(features_of(leaves)) < kTieMargin) continue;
        err = gradcheck_max_rel_error(
            [&](const std::vector<Tensor>& ls) { return dcml_loss(features_of(ls)); }, leaves);
      } else if (kind == 1) {
        Tensor f = random_tensor(rng, {5, 6});
        Tensor w = random_tensor(rng, {4, 6});
        const std::vector<int> labels = {0, 3, 1, 2, 1};
        err = gradcheck_max_rel_error(
            [&labels](const std::vector<Tensor>& ls) {
              return cross_entropy_branch(ls[0], labels, ls[1]);
            },
            {f, w});
      } else if (kind == 2) {
        Tensor f = random_tensor(rng, {6, 5}, 1.5);
        const std::vector<int> labels = {0, 0, 1, 1, 2, 2};
        if (triplet_margin_guard(f, labels, 0.3) < kTieMargin) continue;
        err = gradcheck_max_rel_error(
            [&labels](const std::vector<Tensor>& ls) {
              return batch_hard_triplet(ls[0], labels, {.margin = 0.3});
            },
            {f});
      } else {
        // Full weighted objective through two style-mixed branches.
        const Tensor x = random_tensor(rng, {4, 3, 4}, 1.5);
        std::vector<Tensor> leaves = {x};
        for (int b = 0; b < 2; ++b) {
          DyMainParams p = DyMainParams::init(4);
          std::normal_distribution<double> gauss(0.0, 0.4);
          for (auto& v : p.gamma.values) v = 1.0 + gauss(rng);
          for (auto& v : p.beta.values) v = gauss(rng);
          for (auto& v : p.alpha.values) v = 0.5 + gauss(rng);
          leaves.push_back(p.gamma);
          leaves.push_back(p.beta);
          leaves.push_back(p.alpha);
        }
        leaves.push_back(random_tensor(rng, {3, 4}));  // classifiers
        leaves.push_back(random_tensor(rng, {3, 4}));
        const std::vector<int> labels = {0, 0, 1, 1};
        auto features_of = [](const std::vector<Tensor>& ls) {
          std::vector<Tensor> feats;
          for (int b = 0; b < 2; ++b) {
            DyMainParams p;
            p.gamma = ls[static_cast<size_t>(1 + 3 * b)];
            p.beta = ls[static_cast<size_t>(2 + 3 * b)];
            p.alpha = ls[static_cast<size_t>(3 + 3 * b)];
            feats.push_back(take_location(dymain_forward(ls[0], p), 0));
          }
          return feats;
        };
        const ChannelStats st = compute_channel_stats(x, kDefaultNormEps);
        if (pairing_margin(st.mu) < kTieMargin) continue;
        const auto feats = features_of(leaves);
        if (dcml_margin(feats) < kTieMargin) continue;
        bool tied = false;
        for (const auto& f : feats) {
          if (triplet_margin_guard(f, labels, 0.3) < kTieMargin) tied = true;
        }
        if (tied) continue;
        err = gradcheck_max_rel_error(
            [&](const std::vector<Tensor>& ls) {
              const auto feats2 = features_of(ls);
              return total_loss(feats2, {ls[7], ls[8]}, labels,
                                {.w1 = 1.0, .w2 = 1.0, .w3 = 0.01})
                  .total;
            },
            leaves);
      }

      accepted = true;
      c.expect(err >= 0.0 && err < 1e-4, "instance " + std::to_string(instance) +
                                             " relative error " + fmt(err) + " >= 1e-4");
    }
    c.expect(accepted, "instance " + std::to_string(instance) +
                           " found no tie-free sample in 50 attempts");
  }
  return c.result("gradient fidelity vs finite differences");
}

SelfTestResult check_clone_symmetry() {
  Check c;
  std::mt19937_64 rng(1013);
  ModelConfig mc;
  mc.trunk_blocks = 3;
  mc.clone_depth = 2;
  mc.branches = 3;
  mc.width = 6;
  mc.input_channels = 4;
  mc.input_tokens = 3;
  mc.num_classes = 4;
  mc.dymain_blocks = 2;
  mc.seed = 17;
  const BranchedModel model = build_branched_model(mc);
  const Tensor batch = random_tensor(rng, {5, 3, 4});
  const ForwardOutput out = forward_all_branches(model, batch, RunMode::kEval);
  for (size_t b = 1; b < out.features.size(); ++b) {
    c.expect(out.features[b].values == out.features[0].values,
             "branch " + std::to_string(b) + " features differ from branch 0 at build time");
  }
  c.expect(dcml_loss(out.features).item() == 0.0, "alignment loss nonzero on a fresh model");
  return c.result("clone symmetry at initialization");
}

SelfTestResult check_checkpoint_roundtrip() {
  Check c;
  ModelConfig mc;
  mc.trunk_blocks = 2;
  mc.clone_depth = 1;
  mc.branches = 2;
  mc.width = 4;
  mc.input_channels = 3;
  mc.input_tokens = 2;
  mc.num_classes = 3;
  mc.dymain_blocks = 1;
  mc.seed = 23;
  BranchedModel model = build_branched_model(mc);
  std::mt19937_64 rng(1017);
  std::normal_distribution<double> gauss(0.0, 0.5);
  for (auto& p : model.named_parameters()) {
    for (auto& v : p.tensor->values) v += gauss(rng);
  }
  const std::string path = "selftest_checkpoint.adp";
  save_checkpoint(path, model);
  BranchedModel restored = build_branched_model(mc);
  load_checkpoint(path, restored);
  auto pa = model.named_parameters();
  auto pb = restored.named_parameters();
  for (size_t i = 0; i < pa.size(); ++i) {
    c.expect(pa[i].tensor->values == pb[i].tensor->values,
             "tensor '" + pa[i].name + "' not restored bit-exactly");
  }
  std::remove(path.c_str());
  return c.result("checkpoint round-trip");
}

std::vector<SelfTestResult> run_selftests() {
  return {
      check_schedule_closed_forms(),   check_normalization_reductions(),
      check_pairing_brute_force(),     check_dcml_brute_force(),
      check_triplet_exhaustive(),      check_retrieval_ap_oracle(),
      check_gradient_fidelity(),       check_clone_symmetry(),
      check_checkpoint_roundtrip(),
  };
}

}  // namespace adp

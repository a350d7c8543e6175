#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <vector>

#include "adp/data_eval.hpp"

using namespace adp;

namespace {

SyntheticSpec toy_spec() {
  SyntheticSpec s;
  s.num_ids = 6;
  s.num_domains = 3;
  s.samples_per_id_per_domain = 4;
  s.latent_dim = 5;
  s.tokens = 3;
  s.channels = 4;
  s.seed = 11;
  return s;
}

double sample_distance(const LabeledSample& a, const LabeledSample& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.tokens.values.size(); ++i) {
    const double diff = a.tokens.values[i] - b.tokens.values[i];
    s += diff * diff;
  }
  return std::sqrt(s);
}

Tensor random_features(std::mt19937_64& rng, int64_t n, int64_t d) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Tensor f = Tensor::zeros({n, d});
  for (auto& v : f.values) v = gauss(rng);
  return f;
}

}  // namespace

TEST_CASE("degenerate generation: no noise, no style") {
  SyntheticSpec s = toy_spec();
  s.noise_sigma = 0.0;
  s.style_strength = 0.0;
  const SyntheticDataset ds = generate_dataset(s, 2);
  for (const auto& a : ds.samples) {
    for (const auto& b : ds.samples) {
      if (a.id_label == b.id_label) {
        CHECK(a.tokens.values == b.tokens.values);
      }
    }
  }
}

TEST_CASE("generation is deterministic per seed") {
  const SyntheticDataset a = generate_dataset(toy_spec(), 2);
  const SyntheticDataset b = generate_dataset(toy_spec(), 2);
  REQUIRE(a.samples.size() == b.samples.size());
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].tokens.values == b.samples[i].tokens.values);
    CHECK(a.samples[i].id_label == b.samples[i].id_label);
    CHECK(a.samples[i].domain_label == b.samples[i].domain_label);
  }
}

TEST_CASE("strong style dominates identity differences") {
  SyntheticSpec s = toy_spec();
  s.style_strength = 2.0;
  s.noise_sigma = 0.02;
  const SyntheticDataset ds = generate_dataset(s, 2);

  double intra_domain_inter_id = 0.0;
  int n1 = 0;
  double intra_id_inter_domain = 0.0;
  int n2 = 0;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    for (size_t j = i + 1; j < ds.samples.size(); ++j) {
      const auto& a = ds.samples[i];
      const auto& b = ds.samples[j];
      if (a.domain_label == b.domain_label && a.id_label != b.id_label) {
        intra_domain_inter_id += sample_distance(a, b);
        ++n1;
      } else if (a.id_label == b.id_label && a.domain_label != b.domain_label) {
        intra_id_inter_domain += sample_distance(a, b);
        ++n2;
      }
    }
  }
  CHECK(intra_domain_inter_id / n1 < intra_id_inter_domain / n2);
}

TEST_CASE("split withholds the designated domain and carves a test partition") {
  const SyntheticDataset ds = generate_dataset(toy_spec(), 1);
  CHECK(!ds.train_indices.empty());
  CHECK(!ds.heldin_test_indices.empty());
  for (int idx : ds.train_indices) {
    CHECK(ds.samples[static_cast<size_t>(idx)].domain_label != 1);
  }
  for (int idx : ds.heldin_test_indices) {
    CHECK(ds.samples[static_cast<size_t>(idx)].domain_label != 1);
  }
  for (int idx : ds.heldout_indices) {
    CHECK(ds.samples[static_cast<size_t>(idx)].domain_label == 1);
  }
  CHECK(ds.train_indices.size() + ds.heldin_test_indices.size() + ds.heldout_indices.size() ==
        ds.samples.size());
}

TEST_CASE("pk batches have exact multiplicity") {
  const SyntheticDataset ds = generate_dataset(toy_spec(), 2);
  std::mt19937_64 rng(3);

  const PkBatch minimal = pk_batch_sample(ds, 2, 2, rng);
  CHECK(minimal.labels.size() == 4);

  const PkBatch batch = pk_batch_sample(ds, 4, 3, rng);
  CHECK(batch.labels.size() == 12);
  CHECK(batch.tokens.shape == Shape{12, 3, 4});
  std::map<int, int> counts;
  for (int y : batch.labels) ++counts[y];
  CHECK(counts.size() == 4);
  for (const auto& [id, count] : counts) CHECK(count == 3);
}

TEST_CASE("paper-sized pk batch") {
  SyntheticSpec s = toy_spec();
  s.num_ids = 20;
  s.samples_per_id_per_domain = 4;
  const SyntheticDataset ds = generate_dataset(s, 2);
  std::mt19937_64 rng(5);
  const PkBatch batch = pk_batch_sample(ds, 16, 4, rng);
  CHECK(batch.labels.size() == 64);
}

TEST_CASE("infeasible pk requests are rejected") {
  const SyntheticDataset ds = generate_dataset(toy_spec(), 2);
  std::mt19937_64 rng(7);
  CHECK_THROWS_AS(pk_batch_sample(ds, 7, 2, rng), std::invalid_argument);   // only 6 ids
  CHECK_THROWS_AS(pk_batch_sample(ds, 2, 50, rng), std::invalid_argument);  // too few per id
  CHECK_THROWS_AS(pk_batch_sample(ds, 1, 2, rng), std::invalid_argument);
}

TEST_CASE("average precision oracle basics") {
  CHECK(average_precision_oracle({1}) == 1.0);
  CHECK(average_precision_oracle({0, 1}) == 0.5);
  CHECK(average_precision_oracle({1, 0, 1}) == doctest::Approx(0.83333).epsilon(1e-5));
  CHECK(average_precision_oracle({1, 0, 1}) ==
        doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
  CHECK_THROWS_AS(average_precision_oracle({0, 0}), std::invalid_argument);
}

TEST_CASE("perfect retrieval yields unit metrics") {
  // One-hot id features: the relevant gallery item is always nearest.
  const int64_t n = 4;
  Tensor q = Tensor::zeros({n, n});
  Tensor g = Tensor::zeros({n, n});
  std::vector<int> ids, qdom(n, 0), gdom(n, 1);
  for (int64_t i = 0; i < n; ++i) {
    q.at({i, i}) = 1.0;
    g.at({i, i}) = 1.0;
    ids.push_back(static_cast<int>(i));
  }
  const RetrievalMetrics m = evaluate_retrieval(q, ids, qdom, g, ids, gdom);
  CHECK(m.mAP == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(m.rank1 == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("hand-ranked single query reproduces the AP sum") {
  // Unit-circle gallery at increasing angles from the query: relevance [1,0,1].
  const Tensor q = Tensor::from({1, 2}, {1, 0});
  const Tensor g = Tensor::from({3, 2}, {std::cos(0.01), std::sin(0.01), std::cos(0.5),
                                         std::sin(0.5), std::cos(1.0), std::sin(1.0)});
  const std::vector<int> qid = {0}, qdom = {0};
  const std::vector<int> gid = {0, 1, 0}, gdom = {1, 1, 1};
  const RetrievalMetrics m = evaluate_retrieval(q, qid, qdom, g, gid, gdom);
  CHECK(m.per_query_ap[0] == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
}

TEST_CASE("mAP equals oracle composition on random instances") {
  std::mt19937_64 rng(13);
  std::uniform_int_distribution<int64_t> pick_g(4, 20), pick_d(2, 6);
  std::uniform_int_distribution<int> pick_ids(2, 4);
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t ng = pick_g(rng), d = pick_d(rng);
    const int nids = pick_ids(rng);
    const int64_t nq = 3;
    const Tensor q = random_features(rng, nq, d);
    const Tensor g = random_features(rng, ng, d);
    std::uniform_int_distribution<int> pick_label(0, nids - 1);
    std::vector<int> qid, gid;
    const std::vector<int> qdom(nq, 0);
    const std::vector<int> gdom(static_cast<size_t>(ng), 1);
    for (int64_t i = 0; i < nq; ++i) qid.push_back(pick_label(rng));
    for (int64_t j = 0; j < ng; ++j) gid.push_back(pick_label(rng));
    // Ensure every query id appears in the gallery.
    for (int64_t i = 0; i < nq; ++i) gid[static_cast<size_t>(i)] = qid[static_cast<size_t>(i)];

    const RetrievalMetrics m = evaluate_retrieval(q, qid, qdom, g, gid, gdom);

    // Independent route: L2-normalize, rank by distance, run the AP oracle.
    double oracle_sum = 0.0;
    for (int64_t i = 0; i < nq; ++i) {
      auto norm_row = [&](const Tensor& t, int64_t r) {
        std::vector<double> row(static_cast<size_t>(d));
        double norm = 0.0;
        for (int64_t c = 0; c < d; ++c) norm += t.at({r, c}) * t.at({r, c});
        norm = std::sqrt(norm);
        for (int64_t c = 0; c < d; ++c) row[static_cast<size_t>(c)] = t.at({r, c}) / norm;
        return row;
      };
      const auto qrow = norm_row(q, i);
      std::vector<std::pair<double, int64_t>> order;
      for (int64_t j = 0; j < ng; ++j) {
        const auto grow = norm_row(g, j);
        double dist = 0.0;
        for (int64_t c = 0; c < d; ++c) {
          dist += (qrow[static_cast<size_t>(c)] - grow[static_cast<size_t>(c)]) *
                  (qrow[static_cast<size_t>(c)] - grow[static_cast<size_t>(c)]);
        }
        order.emplace_back(dist, j);
      }
      std::sort(order.begin(), order.end());
      std::vector<int> relevance;
      for (const auto& [dist, j] : order) {
        relevance.push_back(gid[static_cast<size_t>(j)] == qid[static_cast<size_t>(i)] ? 1 : 0);
      }
      oracle_sum += average_precision_oracle(relevance);
    }
    CHECK(m.mAP == doctest::Approx(oracle_sum / static_cast<double>(nq)).epsilon(1e-12));
  }
}

TEST_CASE("metrics invariant under a common orthogonal transform") {
  std::mt19937_64 rng(17);
  const int64_t d = 6, nq = 5, ng = 15;
  const Tensor q = random_features(rng, nq, d);
  const Tensor g = random_features(rng, ng, d);
  std::vector<int> qid = {0, 1, 2, 0, 1}, gid;
  const std::vector<int> qdom(nq, 0), gdom(ng, 1);
  std::uniform_int_distribution<int> pick_label(0, 2);
  for (int64_t j = 0; j < ng; ++j) gid.push_back(pick_label(rng));
  for (int64_t i = 0; i < nq; ++i) gid[static_cast<size_t>(i)] = qid[static_cast<size_t>(i)];

  const RetrievalMetrics base = evaluate_retrieval(q, qid, qdom, g, gid, gdom);

  // Random rotation from composed Givens planes.
  std::vector<double> rot(static_cast<size_t>(d * d), 0.0);
  for (int64_t i = 0; i < d; ++i) rot[static_cast<size_t>(i * d + i)] = 1.0;
  std::uniform_real_distribution<double> angle(0.0, 2.0 * M_PI);
  std::uniform_int_distribution<int64_t> pick_axis(0, d - 1);
  for (int plane = 0; plane < 20; ++plane) {
    const int64_t a = pick_axis(rng);
    int64_t b = pick_axis(rng);
    if (a == b) b = (b + 1) % d;
    const double th = angle(rng);
    for (int64_t r = 0; r < d; ++r) {
      const double ra = rot[static_cast<size_t>(r * d + a)];
      const double rb = rot[static_cast<size_t>(r * d + b)];
      rot[static_cast<size_t>(r * d + a)] = std::cos(th) * ra - std::sin(th) * rb;
      rot[static_cast<size_t>(r * d + b)] = std::sin(th) * ra + std::cos(th) * rb;
    }
  }
  auto rotate = [&](const Tensor& t) {
    Tensor out = Tensor::zeros(t.shape);
    for (int64_t i = 0; i < t.shape[0]; ++i) {
      for (int64_t c = 0; c < d; ++c) {
        double v = 0.0;
        for (int64_t c2 = 0; c2 < d; ++c2) {
          v += t.at({i, c2}) * rot[static_cast<size_t>(c2 * d + c)];
        }
        out.at({i, c}) = v;
      }
    }
    return out;
  };
  const RetrievalMetrics rotated =
      evaluate_retrieval(rotate(q), qid, qdom, rotate(g), gid, gdom);
  CHECK(rotated.mAP == doctest::Approx(base.mAP).epsilon(1e-9));
  CHECK(rotated.rank1 == doctest::Approx(base.rank1).epsilon(1e-9));
}

TEST_CASE("duplicating every gallery item leaves rank-1 unchanged") {
  std::mt19937_64 rng(19);
  const int64_t d = 4, nq = 6, ng = 12;
  const Tensor q = random_features(rng, nq, d);
  Tensor g = random_features(rng, ng, d);
  std::vector<int> qid, gid;
  const std::vector<int> qdom(nq, 0);
  std::vector<int> gdom(ng, 1);
  std::uniform_int_distribution<int> pick_label(0, 3);
  for (int64_t i = 0; i < nq; ++i) qid.push_back(pick_label(rng));
  for (int64_t j = 0; j < ng; ++j) gid.push_back(pick_label(rng));
  for (int64_t i = 0; i < 4; ++i) gid[static_cast<size_t>(i)] = i % 4;
  for (int64_t i = 0; i < nq; ++i) gid[static_cast<size_t>(i % ng)] = qid[static_cast<size_t>(i)];

  const RetrievalMetrics base = evaluate_retrieval(q, qid, qdom, g, gid, gdom);

  Tensor g2 = Tensor::zeros({2 * ng, d});
  std::vector<int> gid2, gdom2;
  for (int copy = 0; copy < 2; ++copy) {
    for (int64_t j = 0; j < ng; ++j) {
      for (int64_t c = 0; c < d; ++c) g2.at({copy * ng + j, c}) = g.at({j, c});
      gid2.push_back(gid[static_cast<size_t>(j)]);
      gdom2.push_back(gdom[static_cast<size_t>(j)]);
    }
  }
  const RetrievalMetrics doubled = evaluate_retrieval(q, qid, qdom, g2, gid2, gdom2);
  CHECK(doubled.rank1 == doctest::Approx(base.rank1).epsilon(1e-12));
}

TEST_CASE("query with no valid relevant item is an error") {
  const Tensor q = Tensor::from({1, 2}, {1, 0});
  const Tensor g = Tensor::from({2, 2}, {0, 1, 1, 1});
  // Only same-id item shares the query domain, so exclusion removes it.
  CHECK_THROWS_AS(evaluate_retrieval(q, {0}, {0}, g, {0, 1}, {0, 0}), std::runtime_error);
}

TEST_CASE("random features score near the permutation-oracle chance level") {
  std::mt19937_64 rng(23);
  const int64_t d = 5, nq = 12, ng = 36;
  const Tensor q = random_features(rng, nq, d);
  const Tensor g = random_features(rng, ng, d);
  std::vector<int> qid, gid;
  const std::vector<int> qdom(nq, 0), gdom(ng, 1);
  for (int64_t i = 0; i < nq; ++i) qid.push_back(static_cast<int>(i % 6));
  for (int64_t j = 0; j < ng; ++j) gid.push_back(static_cast<int>(j % 6));

  const double actual = evaluate_retrieval(q, qid, qdom, g, gid, gdom).mAP;

  // Null distribution: permute gallery ids, keep the ranking fixed.
  std::vector<std::vector<int64_t>> rankings;
  for (int64_t i = 0; i < nq; ++i) {
    std::vector<std::pair<double, int64_t>> order;
    for (int64_t j = 0; j < ng; ++j) {
      double dist = 0.0;
      auto norm = [&](const Tensor& t, int64_t r, int64_t c) {
        double n2 = 0.0;
        for (int64_t cc = 0; cc < d; ++cc) n2 += t.at({r, cc}) * t.at({r, cc});
        return t.at({r, c}) / std::sqrt(n2);
      };
      for (int64_t c = 0; c < d; ++c) {
        const double diff = norm(q, i, c) - norm(g, j, c);
        dist += diff * diff;
      }
      order.emplace_back(dist, j);
    }
    std::sort(order.begin(), order.end());
    std::vector<int64_t> ranking;
    for (const auto& [dist, j] : order) ranking.push_back(j);
    rankings.push_back(std::move(ranking));
  }

  std::vector<int> permuted = gid;
  std::vector<double> null_maps;
  for (int perm = 0; perm < 1000; ++perm) {
    std::shuffle(permuted.begin(), permuted.end(), rng);
    double sum = 0.0;
    for (int64_t i = 0; i < nq; ++i) {
      std::vector<int> relevance;
      for (int64_t j : rankings[static_cast<size_t>(i)]) {
        relevance.push_back(permuted[static_cast<size_t>(j)] == qid[static_cast<size_t>(i)] ? 1
                                                                                            : 0);
      }
      sum += average_precision_oracle(relevance);
    }
    null_maps.push_back(sum / static_cast<double>(nq));
  }
  const double mean =
      std::accumulate(null_maps.begin(), null_maps.end(), 0.0) / null_maps.size();
  double var = 0.0;
  for (double v : null_maps) var += (v - mean) * (v - mean);
  const double sigma = std::sqrt(var / null_maps.size());
  CHECK(std::fabs(actual - mean) <= 3.0 * sigma);
}

TEST_CASE("dataset dump round-trips") {
  const SyntheticDataset ds = generate_dataset(toy_spec(), 2);
  const std::string path = "dataset_dump_test.bin";
  dump_dataset(path, ds);
  const SyntheticDataset back = load_dataset_dump(path);
  REQUIRE(back.samples.size() == ds.samples.size());
  CHECK(back.heldout_domain == ds.heldout_domain);
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].tokens.values == ds.samples[i].tokens.values);
    CHECK(back.samples[i].id_label == ds.samples[i].id_label);
    CHECK(back.samples[i].domain_label == ds.samples[i].domain_label);
  }
  std::remove(path.c_str());
}

TEST_CASE("spec invariants are validated") {
  SyntheticSpec s = toy_spec();
  s.num_ids = 1;
  CHECK_THROWS_AS(generate_dataset(s, 0), std::invalid_argument);
  s = toy_spec();
  s.samples_per_id_per_domain = 1;
  CHECK_THROWS_AS(generate_dataset(s, 0), std::invalid_argument);
  CHECK_THROWS_AS(generate_dataset(toy_spec(), 5), std::invalid_argument);
}

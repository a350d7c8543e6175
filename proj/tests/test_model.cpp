#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>
#include <vector>

#include "adp/checkpoint.hpp"
#include "adp/gradcheck.hpp"
#include "adp/model.hpp"

using namespace adp;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.trunk_blocks = 2;
  c.clone_depth = 1;
  c.branches = 2;
  c.width = 4;
  c.input_channels = 3;
  c.input_tokens = 2;  // +1 class token -> L = 3
  c.num_classes = 3;
  c.dymain_blocks = 1;
  c.seed = 5;
  return c;
}

Tensor random_batch(std::mt19937_64& rng, const ModelConfig& c, int64_t n) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Tensor b = Tensor::zeros({n, c.input_tokens, c.input_channels});
  for (auto& v : b.values) v = gauss(rng);
  return b;
}

}  // namespace

TEST_CASE("build honors branch and depth configuration") {
  ModelConfig c = tiny_config();
  c.trunk_blocks = 6;
  c.clone_depth = 4;
  c.branches = 7;
  BranchedModel m = build_branched_model(c);
  CHECK(m.trunk.size() == 2);
  CHECK(m.branches.size() == 7);
  for (const auto& b : m.branches) {
    CHECK(b.blocks.size() == 4);
    CHECK(b.classifier.shape == Shape{3, 4});
  }
}

TEST_CASE("build rejects invalid configurations") {
  ModelConfig c = tiny_config();
  c.clone_depth = 3;
  c.trunk_blocks = 2;
  CHECK_THROWS_AS(build_branched_model(c), std::invalid_argument);
  c = tiny_config();
  c.branches = 0;
  CHECK_THROWS_AS(build_branched_model(c), std::invalid_argument);
  c = tiny_config();
  c.dymain_blocks = 5;
  CHECK_THROWS_AS(build_branched_model(c), std::invalid_argument);
}

TEST_CASE("equal seeds build bit-identical models") {
  BranchedModel a = build_branched_model(tiny_config());
  BranchedModel b = build_branched_model(tiny_config());
  auto pa = a.named_parameters();
  auto pb = b.named_parameters();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].name == pb[i].name);
    CHECK(pa[i].tensor->values == pb[i].tensor->values);
  }
}

TEST_CASE("branch tails are bit-identical copies after build") {
  ModelConfig c = tiny_config();
  c.clone_depth = 2;
  c.trunk_blocks = 3;
  c.branches = 3;
  BranchedModel m = build_branched_model(c);
  for (size_t b = 1; b < m.branches.size(); ++b) {
    for (size_t i = 0; i < m.branches[b].blocks.size(); ++i) {
      CHECK(m.branches[b].blocks[i].w1.values == m.branches[0].blocks[i].w1.values);
      CHECK(m.branches[b].blocks[i].b1.values == m.branches[0].blocks[i].b1.values);
      CHECK(m.branches[b].blocks[i].w2.values == m.branches[0].blocks[i].w2.values);
      CHECK(m.branches[b].blocks[i].b2.values == m.branches[0].blocks[i].b2.values);
    }
  }
}

TEST_CASE("clone symmetry: identical branches emit bit-equal features") {
  std::mt19937_64 rng(301);
  ModelConfig c = tiny_config();
  c.branches = 3;
  BranchedModel m = build_branched_model(c);
  const Tensor batch = random_batch(rng, c, 4);
  const ForwardOutput out = forward_all_branches(m, batch, RunMode::kEval);
  REQUIRE(out.features.size() == 3);
  for (size_t b = 1; b < out.features.size(); ++b) {
    CHECK(out.features[b].values == out.features[0].values);
  }
  CHECK(dcml_loss(out.features).item() == 0.0);
}

TEST_CASE("single sample batch exercises the self-pairing path") {
  std::mt19937_64 rng(303);
  const ModelConfig c = tiny_config();
  BranchedModel m = build_branched_model(c);
  const Tensor batch = random_batch(rng, c, 1);
  const ForwardOutput out = forward_all_branches(m, batch, RunMode::kEval);
  CHECK(out.features[0].shape == Shape{1, 4});
  for (double v : out.features[0].values) CHECK(std::isfinite(v));
}

TEST_CASE("perturbing one branch changes only that branch") {
  std::mt19937_64 rng(307);
  ModelConfig c = tiny_config();
  c.branches = 3;
  BranchedModel m = build_branched_model(c);
  const Tensor batch = random_batch(rng, c, 4);
  const ForwardOutput before = forward_all_branches(m, batch, RunMode::kTrain);

  m.branches[1].blocks[0].w1.values[0] += 0.25;
  const ForwardOutput after = forward_all_branches(m, batch, RunMode::kTrain);

  CHECK(after.features[0].values == before.features[0].values);
  CHECK(after.features[2].values == before.features[2].values);
  CHECK(after.features[1].values != before.features[1].values);
  CHECK(after.logits[0].values == before.logits[0].values);
  CHECK(after.logits[1].values != before.logits[1].values);
}

TEST_CASE("fused feature is the branch mean and permutation invariant") {
  const Tensor f1 = Tensor::from({1, 2}, {1, 3});
  const Tensor f2 = Tensor::from({1, 2}, {3, 1});
  CHECK(aggregate_features({f1}).values == f1.values);
  CHECK(aggregate_features({f1, f2}).values == std::vector<double>{2, 2});
  CHECK(aggregate_features({f2, f1}).values == std::vector<double>{2, 2});
  CHECK(aggregate_features({f1, f1, f1}).values == f1.values);

  const Tensor cat = aggregate_features_concat({f1, f2});
  CHECK(cat.shape == Shape{1, 4});
  CHECK(cat.values == std::vector<double>{1, 3, 3, 1});
}

TEST_CASE("branch isolation: private parameters get no gradient from other branches") {
  std::mt19937_64 rng(311);
  ModelConfig c = tiny_config();
  c.branches = 2;
  BranchedModel m = build_branched_model(c);
  const Tensor batch = random_batch(rng, c, 4);
  const std::vector<int> labels = {0, 0, 1, 1};

  auto params = m.named_parameters();
  Tape tape;
  for (auto& p : params) tape.watch(*p.tensor);
  ForwardOutput out = forward_all_branches(m, batch, RunMode::kTrain);
  // A loss computed exclusively from branch 0's outputs.
  Tensor loss = cross_entropy_branch(out.features[0], labels, m.branches[0].classifier);
  tape.backward(loss);

  for (auto& p : params) {
    if (p.group == 2) {  // branch 1 private parameters
      for (double g : *p.tensor->grad) CHECK(g == 0.0);
    }
  }
  bool branch0_touched = false;
  for (auto& p : params) {
    if (p.group == 1) {
      for (double g : *p.tensor->grad) branch0_touched |= (g != 0.0);
    }
  }
  CHECK(branch0_touched);
}

TEST_CASE("end-to-end gradient check on the tiny model") {
  std::mt19937_64 rng(313);
  ModelConfig c = tiny_config();
  c.input_tokens = 2;  // L = 3 with the class token
  BranchedModel m = build_branched_model(c);
  const Tensor batch = random_batch(rng, c, 4);
  const std::vector<int> labels = {0, 0, 1, 1};

  auto params = m.named_parameters();
  std::vector<Tensor> leaves;
  for (auto& p : params) leaves.push_back(*p.tensor);

  auto loss_fn = [&](const std::vector<Tensor>& ls) {
    BranchedModel probe = build_branched_model(c);
    auto probe_params = probe.named_parameters();
    for (size_t i = 0; i < probe_params.size(); ++i) *probe_params[i].tensor = ls[i];
    ForwardOutput out = forward_all_branches(probe, batch, RunMode::kTrain);
    std::vector<Tensor> classifiers;
    for (auto& b : probe.branches) classifiers.push_back(b.classifier);
    return total_loss(out.features, classifiers, labels, {.w1 = 1.0, .w2 = 1.0, .w3 = 0.5})
        .total;
  };
  CHECK(gradcheck_max_rel_error(loss_fn, leaves) < 1e-4);
}

TEST_CASE("zero learning rates for all groups leave parameters unchanged") {
  std::mt19937_64 rng(317);
  ModelConfig c = tiny_config();
  BranchedModel m = build_branched_model(c);
  const Tensor batch = random_batch(rng, c, 4);
  const std::vector<int> labels = {0, 0, 1, 1};

  auto params = m.named_parameters();
  std::vector<std::vector<double>> snapshot;
  for (auto& p : params) snapshot.push_back(p.tensor->values);

  {
    Tape tape;
    for (auto& p : params) tape.watch(*p.tensor);
    ForwardOutput out = forward_all_branches(m, batch, RunMode::kTrain);
    std::vector<Tensor> classifiers;
    for (auto& b : m.branches) classifiers.push_back(b.classifier);
    tape.backward(total_loss(out.features, classifiers, labels, {.w3 = 0.01}).total);
  }
  SgdState state;
  sgd_apply(params, state, std::vector<double>(3, 0.0));
  for (size_t i = 0; i < params.size(); ++i) {
    CHECK(params[i].tensor->values == snapshot[i]);
  }
}

TEST_CASE("sgd momentum recursion matches the hand-derived trace") {
  // Single parameter, loss = theta^2, mu = 0, lr = 0.1: g = 2 theta.
  SgdState state;
  state.momentum = 0.0;
  state.velocity = {std::vector<double>{0.0}};
  double theta = 1.0;
  double v = 0.0;
  const double lr = 0.1;
  const double g = 2.0 * theta;
  v = state.momentum * v + g;
  theta -= lr * v;
  CHECK(theta == doctest::Approx(0.8).epsilon(1e-15));

  // Constant gradient 1 with mu = 0.9: theta1 = -0.1, theta2 = -0.29.
  double v2 = 0.0, th = 0.0;
  v2 = 0.9 * v2 + 1.0;
  th -= 0.1 * v2;
  CHECK(th == doctest::Approx(-0.1).epsilon(1e-15));
  v2 = 0.9 * v2 + 1.0;
  th -= 0.1 * v2;
  CHECK(th == doctest::Approx(-0.29).epsilon(1e-12));
}

TEST_CASE("train_step applies schedule rates and reduces the loss on a fixed batch") {
  std::mt19937_64 rng(331);
  ModelConfig c = tiny_config();
  c.branches = 2;
  BranchedModel m = build_branched_model(c);
  const Tensor batch = random_batch(rng, c, 6);
  const std::vector<int> labels = {0, 0, 1, 1, 2, 2};

  ScheduleSet schedules;
  schedules.main = MainScheduleSpec{.eta = 0.01, .warmup_epochs = 2, .total_epochs = 12};
  schedules.branch_specs.assign(
      2, BranchScheduleSpec{.total_epochs = 12, .period = 6, .eta_min = 0.005});

  SgdState state;
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 30; ++step) {
    const int epoch = std::min(step / 3, 11);
    const TrainStepResult r =
        train_step(m, batch, labels, epoch, state, schedules, {.w3 = 0.01});
    CHECK(r.group_lrs[0] == main_lr_at(schedules.main, epoch));
    CHECK(r.group_lrs[1] == pmoc_lr_at(schedules.branch_specs[0], epoch));
    if (step == 0) first = r.total;
    last = r.total;
  }
  CHECK(last < first);
}

TEST_CASE("checkpoint round-trip restores parameters bit-exactly") {
  std::mt19937_64 rng(337);
  ModelConfig c = tiny_config();
  c.branches = 2;
  BranchedModel m = build_branched_model(c);
  // Move away from init so the round-trip is nontrivial.
  std::normal_distribution<double> gauss(0.0, 0.37);
  for (auto& p : m.named_parameters()) {
    for (auto& v : p.tensor->values) v += gauss(rng);
  }

  const std::string path = "ckpt_roundtrip_test.adp";
  save_checkpoint(path, m);
  BranchedModel restored = build_branched_model(c);
  load_checkpoint(path, restored);
  auto pa = m.named_parameters();
  auto pb = restored.named_parameters();
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i].tensor->values == pb[i].tensor->values);
  }

  // Architecture mismatch names the offending tensor.
  ModelConfig c2 = c;
  c2.width = 5;
  BranchedModel other = build_branched_model(c2);
  CHECK_THROWS_WITH_AS(load_checkpoint(path, other), doctest::Contains("embed.weight"),
                       std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("dymain can be limited to the trailing branch blocks") {
  ModelConfig c = tiny_config();
  c.trunk_blocks = 4;
  c.clone_depth = 3;
  c.dymain_blocks = 2;
  BranchedModel m = build_branched_model(c);
  CHECK_FALSE(m.branches[0].blocks[0].dymain.has_value());
  CHECK(m.branches[0].blocks[1].dymain.has_value());
  CHECK(m.branches[0].blocks[2].dymain.has_value());
  for (const auto& block : m.trunk) CHECK_FALSE(block.dymain.has_value());

  c.enable_dymain = false;
  BranchedModel plain = build_branched_model(c);
  for (const auto& block : plain.branches[0].blocks) CHECK_FALSE(block.dymain.has_value());
}

#include "adp/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace adp {

namespace {

Tensor uniform_init(std::mt19937_64& rng, Shape shape, int64_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> uni(-bound, bound);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values) v = uni(rng);
  return t;
}

Block make_block(std::mt19937_64& rng, const ModelConfig& cfg, bool with_dymain) {
  const int64_t d = cfg.width;
  const int64_t h = d * cfg.hidden_expansion;
  Block b;
  b.kind = cfg.block_kind;
  b.w1 = uniform_init(rng, {h, d}, d);
  b.b1 = Tensor::zeros({h});
  b.w2 = uniform_init(rng, {d, h}, h);
  b.b2 = Tensor::zeros({d});
  if (with_dymain) b.dymain = DyMainParams::init(d);
  return b;
}

Tensor block_forward(const Block& block, const Tensor& x, bool adain_multiply) {
  const int64_t n = x.shape[0], l = x.shape[1], d = x.shape[2];
  Tensor h = x;
  if (block.kind == BlockKind::kTokenMixLite) {
    h = add(x, expand_locations(mean_locations(x), l));
  }
  const Tensor flat = reshape(h, {n * l, d});
  const Tensor hidden = relu(add(matmul(flat, transpose(block.w1)), block.b1));
  const Tensor mlp = add(matmul(hidden, transpose(block.w2)), block.b2);
  Tensor out = add(x, reshape(mlp, {n, l, d}));
  if (block.dymain) {
    out = dymain_forward(out, *block.dymain, {.adain_multiply = adain_multiply});
  }
  return out;
}

void collect_block_params(std::vector<NamedParam>& out, Block& b, const std::string& prefix,
                          int group) {
  out.push_back({prefix + ".w1", &b.w1, group});
  out.push_back({prefix + ".b1", &b.b1, group});
  out.push_back({prefix + ".w2", &b.w2, group});
  out.push_back({prefix + ".b2", &b.b2, group});
  if (b.dymain) {
    out.push_back({prefix + ".dymain.gamma", &b.dymain->gamma, group});
    out.push_back({prefix + ".dymain.beta", &b.dymain->beta, group});
    out.push_back({prefix + ".dymain.alpha", &b.dymain->alpha, group});
  }
}

}  // namespace

std::vector<NamedParam> BranchedModel::named_parameters() {
  std::vector<NamedParam> out;
  out.push_back({"embed.weight", &embed_w, 0});
  out.push_back({"embed.bias", &embed_b, 0});
  out.push_back({"embed.class_token", &class_token, 0});
  out.push_back({"embed.positions", &positions, 0});
  for (size_t i = 0; i < trunk.size(); ++i) {
    collect_block_params(out, trunk[i], "trunk." + std::to_string(i), 0);
  }
  for (size_t b = 0; b < branches.size(); ++b) {
    const std::string prefix = "branch." + std::to_string(b);
    for (size_t i = 0; i < branches[b].blocks.size(); ++i) {
      collect_block_params(out, branches[b].blocks[i], prefix + ".block." + std::to_string(i),
                           static_cast<int>(b) + 1);
    }
    out.push_back({prefix + ".classifier", &branches[b].classifier, static_cast<int>(b) + 1});
  }
  return out;
}

BranchedModel build_branched_model(const ModelConfig& config) {
  if (config.clone_depth < 1) {
    throw std::invalid_argument("build_branched_model: clone_depth must be at least 1");
  }
  if (config.trunk_blocks < config.clone_depth) {
    throw std::invalid_argument("build_branched_model: clone_depth " +
                                std::to_string(config.clone_depth) + " exceeds trunk_blocks " +
                                std::to_string(config.trunk_blocks));
  }
  if (config.branches < 1) {
    throw std::invalid_argument("build_branched_model: needs at least one branch");
  }
  if (config.dymain_blocks < 0 || config.dymain_blocks > config.clone_depth) {
    throw std::invalid_argument("build_branched_model: dymain_blocks must lie in [0," +
                                std::to_string(config.clone_depth) + "]");
  }
  if (config.num_classes < 2) {
    throw std::invalid_argument("build_branched_model: needs at least two classes");
  }

  std::mt19937_64 rng(config.seed);
  BranchedModel m;
  m.config = config;
  m.embed_w = uniform_init(rng, {config.width, config.input_channels}, config.input_channels);
  m.embed_b = Tensor::zeros({config.width});
  m.class_token = Tensor::zeros({config.width});
  m.positions = uniform_init(rng, {config.input_tokens + 1, config.width}, config.width);

  const int shared = config.trunk_blocks - config.clone_depth;
  for (int i = 0; i < shared; ++i) {
    m.trunk.push_back(make_block(rng, config, false));
  }

  // One tail, then bit-identical weight copies for every branch. DyMAIN
  // parameters and classifiers are created per branch.
  std::vector<Block> tail;
  for (int i = 0; i < config.clone_depth; ++i) {
    const bool with_dymain =
        config.enable_dymain && i >= config.clone_depth - config.dymain_blocks;
    tail.push_back(make_block(rng, config, with_dymain));
  }
  for (int b = 0; b < config.branches; ++b) {
    Branch branch;
    branch.blocks = tail;
    for (auto& block : branch.blocks) {
      if (block.dymain) block.dymain = DyMainParams::init(config.width);
    }
    branch.classifier = uniform_init(rng, {config.num_classes, config.width}, config.width);
    m.branches.push_back(std::move(branch));
  }
  return m;
}

ForwardOutput forward_all_branches(const BranchedModel& model, const Tensor& batch, RunMode mode,
                                   FuseMode fuse) {
  if (batch.rank() != 3 || batch.shape[1] != model.config.input_tokens ||
      batch.shape[2] != model.config.input_channels) {
    throw std::invalid_argument("forward_all_branches: batch " + shape_str(batch.shape) +
                                " does not match input (N," +
                                std::to_string(model.config.input_tokens) + "," +
                                std::to_string(model.config.input_channels) + ")");
  }
  const int64_t n = batch.shape[0];
  const int64_t l_in = model.config.input_tokens;
  const int64_t d = model.config.width;

  const Tensor flat = reshape(batch, {n * l_in, batch.shape[2]});
  const Tensor projected = add(matmul(flat, transpose(model.embed_w)), model.embed_b);
  Tensor seq = prepend_token(reshape(projected, {n, l_in, d}), model.class_token);
  seq = add(seq, model.positions);

  for (const auto& block : model.trunk) {
    seq = block_forward(block, seq, model.config.adain_multiply);
  }

  ForwardOutput out;
  for (const auto& branch : model.branches) {
    Tensor x = seq;
    for (const auto& block : branch.blocks) {
      x = block_forward(block, x, model.config.adain_multiply);
    }
    Tensor feat = take_location(x, 0);
    out.logits.push_back(matmul(feat, transpose(branch.classifier)));
    out.features.push_back(std::move(feat));
  }
  if (mode == RunMode::kEval) {
    out.fused = fuse == FuseMode::kMean ? aggregate_features(out.features)
                                        : aggregate_features_concat(out.features);
  }
  return out;
}

Tensor aggregate_features(const std::vector<Tensor>& branch_features) {
  if (branch_features.empty()) {
    throw std::invalid_argument("aggregate_features: no branches");
  }
  Tensor acc = branch_features[0];
  for (size_t b = 1; b < branch_features.size(); ++b) {
    if (branch_features[b].shape != acc.shape) {
      throw std::invalid_argument("aggregate_features: branch shapes differ, " +
                                  shape_str(acc.shape) + " vs " +
                                  shape_str(branch_features[b].shape));
    }
    acc = add(acc, branch_features[b]);
  }
  return div(acc, static_cast<double>(branch_features.size()));
}

Tensor aggregate_features_concat(const std::vector<Tensor>& branch_features) {
  if (branch_features.empty()) {
    throw std::invalid_argument("aggregate_features_concat: no branches");
  }
  const int64_t n = branch_features[0].shape[0];
  const int64_t d = branch_features[0].shape[1];
  const int64_t k = static_cast<int64_t>(branch_features.size());
  Tensor out = Tensor::zeros({n, k * d});
  for (int64_t b = 0; b < k; ++b) {
    const auto& f = branch_features[static_cast<size_t>(b)];
    if (f.shape != branch_features[0].shape) {
      throw std::invalid_argument("aggregate_features_concat: branch shapes differ");
    }
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t c = 0; c < d; ++c) {
        out.values[static_cast<size_t>(i * k * d + b * d + c)] =
            f.values[static_cast<size_t>(i * d + c)];
      }
    }
  }
  return out;
}

double ScheduleSet::lr_for_group(int group, int epoch) const {
  if (group == 0 || !pmoc_enabled) return main_lr_at(main, epoch);
  const size_t idx = static_cast<size_t>(group - 1);
  if (idx >= branch_specs.size()) {
    throw std::invalid_argument("lr_for_group: no schedule for group " + std::to_string(group));
  }
  return pmoc_lr_at(branch_specs[idx], epoch);
}

void sgd_apply(std::vector<NamedParam>& params, SgdState& state,
               const std::vector<double>& group_lrs) {
  if (state.velocity.empty()) {
    for (const auto& p : params) {
      state.velocity.emplace_back(p.tensor->values.size(), 0.0);
    }
  }
  if (state.velocity.size() != params.size()) {
    throw std::logic_error("sgd_apply: optimizer state does not match the parameter list");
  }
  for (size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i].tensor->values;
    if (!params[i].tensor->grad) {
      throw std::logic_error("sgd_apply: parameter '" + params[i].name + "' has no gradient");
    }
    const auto& g = *params[i].tensor->grad;
    auto& v = state.velocity[i];
    const double lr = group_lrs.at(static_cast<size_t>(params[i].group));
    for (size_t j = 0; j < theta.size(); ++j) {
      v[j] = state.momentum * v[j] + g[j];
      if (lr != 0.0) theta[j] -= lr * v[j];
    }
  }
}

TrainStepResult train_step(BranchedModel& model, const Tensor& batch,
                           const std::vector<int>& labels, int epoch, SgdState& state,
                           const ScheduleSet& schedules, const LossWeights& weights,
                           const TripletConfig& triplet_config, DcmlMetric metric) {
  auto params = model.named_parameters();
  TrainStepResult result;
  {
    Tape tape;
    for (auto& p : params) tape.watch(*p.tensor);
    ForwardOutput out = forward_all_branches(model, batch, RunMode::kTrain);
    std::vector<Tensor> classifiers;
    for (auto& branch : model.branches) classifiers.push_back(branch.classifier);
    TotalLossBreakdown loss =
        total_loss(out.features, classifiers, labels, weights, triplet_config, metric);
    result.total = loss.total.item();
    result.ce = loss.ce;
    result.triplet = loss.triplet;
    result.dcml = loss.dcml;
    tape.backward(loss.total);
  }

  result.group_lrs.assign(static_cast<size_t>(model.config.branches) + 1, 0.0);
  for (size_t g = 0; g < result.group_lrs.size(); ++g) {
    result.group_lrs[g] = schedules.lr_for_group(static_cast<int>(g), epoch);
  }
  sgd_apply(params, state, result.group_lrs);
  return result;
}

}  // namespace adp

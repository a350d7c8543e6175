#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "adp/losses.hpp"
#include "adp/normalization.hpp"
#include "adp/schedules.hpp"
#include "adp/tensor.hpp"

namespace adp {

// Toy backbone blocks. kResidualChannelMlp applies a per-token
// linear(d -> e*d) -> relu -> linear(e*d -> d) with a residual connection;
// kTokenMixLite additionally adds the token-mean context vector to the MLP
// input so information flows between sequence positions.
enum class BlockKind { kResidualChannelMlp, kTokenMixLite };

enum class FuseMode { kMean, kConcat };
enum class RunMode { kTrain, kEval };

struct ModelConfig {
  int trunk_blocks = 6;   // total backbone depth, tail included
  int clone_depth = 4;    // tail blocks cloned into every branch
  int branches = 7;       // k
  int64_t width = 16;     // d
  int64_t input_channels = 8;
  int64_t input_tokens = 4;  // sequence length before the class token
  int num_classes = 20;
  int hidden_expansion = 2;
  BlockKind block_kind = BlockKind::kTokenMixLite;
  int dymain_blocks = 4;  // trailing branch blocks carrying DyMAIN
  bool enable_dymain = true;
  bool adain_multiply = false;
  uint64_t seed = 1;
};

struct Block {
  BlockKind kind;
  Tensor w1, b1;  // (h,d),(h)
  Tensor w2, b2;  // (d,h),(d)
  std::optional<DyMainParams> dymain;
};

struct Branch {
  std::vector<Block> blocks;
  Tensor classifier;  // (C,d), no bias
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
  int group;  // 0 = embed/trunk, 1..k = branch private parameters
};

struct BranchedModel {
  ModelConfig config;
  Tensor embed_w;      // (d, d_in)
  Tensor embed_b;      // (d)
  Tensor class_token;  // (d)
  Tensor positions;    // (L_in+1, d)
  std::vector<Block> trunk;
  std::vector<Branch> branches;

  // Stable ordering: embed, trunk blocks, then each branch in turn.
  std::vector<NamedParam> named_parameters();
};

// Builds the shared trunk and clones the tail into k branches with
// bit-identical block weights. Classifiers and DyMAIN parameters are
// per-branch. Deterministic given config.seed.
BranchedModel build_branched_model(const ModelConfig& config);

struct ForwardOutput {
  std::vector<Tensor> features;  // k x (N,d), class-token outputs
  std::vector<Tensor> logits;    // k x (N,C)
  Tensor fused;                  // populated in eval mode
};

ForwardOutput forward_all_branches(const BranchedModel& model, const Tensor& batch, RunMode mode,
                                   FuseMode fuse = FuseMode::kMean);

// Elementwise mean across branches: fused[n,c] = (1/k) sum_b f_b[n,c].
Tensor aggregate_features(const std::vector<Tensor>& branch_features);
// Comparison variant: concatenation along the channel axis, (N, k*d).
Tensor aggregate_features_concat(const std::vector<Tensor>& branch_features);

// Per-group learning rates: the trunk and embedding follow the main
// warmup-cosine schedule; each branch's private parameters follow its own
// cyclic schedule unless pmoc_enabled is off, in which case every group
// uses the main schedule.
struct ScheduleSet {
  MainScheduleSpec main;
  std::vector<BranchScheduleSpec> branch_specs;  // one per branch
  bool pmoc_enabled = true;

  double lr_for_group(int group, int epoch) const;
};

// SGD momentum buffers aligned with named_parameters() order.
struct SgdState {
  double momentum = 0.9;
  std::vector<std::vector<double>> velocity;
};

struct TrainStepResult {
  double total = 0.0;
  double ce = 0.0;
  double triplet = 0.0;
  double dcml = 0.0;
  std::vector<double> group_lrs;  // rates actually applied, index = group
};

// v <- mu v + g, theta <- theta - lr v, with lr taken per parameter group.
// Gradients must already be populated on every parameter.
void sgd_apply(std::vector<NamedParam>& params, SgdState& state,
               const std::vector<double>& group_lrs);

// One forward/backward pass and an SGD-with-momentum update
// (v <- mu v + g, theta <- theta - lr v) with each group's schedule rate.
TrainStepResult train_step(BranchedModel& model, const Tensor& batch,
                           const std::vector<int>& labels, int epoch, SgdState& state,
                           const ScheduleSet& schedules, const LossWeights& weights,
                           const TripletConfig& triplet_config = {},
                           DcmlMetric metric = DcmlMetric::kChebyshev);

}  // namespace adp

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "adp/config.hpp"
#include "adp/data_eval.hpp"
#include "adp/model.hpp"

namespace adp {

struct EpochLogRow {
  int epoch = 0;
  double total = 0.0;
  double ce = 0.0;
  double triplet = 0.0;
  double dcml = 0.0;
  std::vector<double> lrs;  // main followed by one rate per branch
};

struct TrainOutcome {
  BranchedModel model;
  std::vector<EpochLogRow> log;
};

// Runs the configured number of epochs of PK-sampled steps. Throws
// std::runtime_error naming the epoch and loss term if a non-finite loss
// appears.
TrainOutcome run_training(const RunConfig& config);

// CSV rows `epoch,total,ce,triplet,dcml,lr_main,lr_b1..` with 10
// significant digits.
std::string metrics_csv(const std::vector<EpochLogRow>& log);

struct EvalOutcome {
  RetrievalMetrics heldout;                 // queries from the withheld domain
  std::optional<RetrievalMetrics> heldin;   // within training domains, when feasible
};

// Fused-feature retrieval over (a) the held-out domain against the
// in-domain test gallery and (b) the in-domain test partition against
// itself (needs at least two training domains for valid matches).
EvalOutcome run_evaluation(const RunConfig& config, const BranchedModel& model);

// Debug upper bound: identity one-hot vectors replace model features.
EvalOutcome run_evaluation_perfect(const RunConfig& config);

}  // namespace adp

#pragma once

#include <string>
#include <vector>

namespace adp {

// Cyclic cosine schedule for one branch. A branch with period p runs
// c = floor(T/p) cycles at base rate c^gamma_pow * eta_min, decaying by
// lambda_decay^(1/c) after each cycle so the total decay reaches
// lambda_decay by the end of training.
struct BranchScheduleSpec {
  int total_epochs = 120;
  int period = 120;
  double eta_min = 0.004;
  double gamma_pow = 1.806;
  double lambda_decay = 0.5;
};

struct BranchScheduleDerived {
  int cycles;
  double eta_base;
  double per_cycle_decay;
};

// Throws std::invalid_argument when the spec violates its invariants
// (period outside [1,T], nonpositive rates, lambda outside (0,1],
// negative power factor).
BranchScheduleDerived derive_branch_schedule(const BranchScheduleSpec& spec);

// Learning rate at an epoch in [0,T): with q = epoch / p and t = epoch % p,
// lr = eta_base * decay^q * (1 + cos(pi t / p)) / 2. The within-cycle cosine
// anneals to zero; a trailing partial cycle (T not a multiple of p) runs the
// same formula truncated at T.
double pmoc_lr_at(const BranchScheduleSpec& spec, int epoch);

// One-cycle cosine with a linear warmup: rises from warmup_start_frac*eta to
// eta over warmup_epochs, then anneals down to floor_frac*eta.
struct MainScheduleSpec {
  double eta = 0.004;
  int warmup_epochs = 10;
  double warmup_start_frac = 0.01;
  double floor_frac = 0.002;
  int total_epochs = 120;
};

double main_lr_at(const MainScheduleSpec& spec, int epoch);

// Per-epoch learning-rate table as CSV: header
// `epoch,main,branch1,...,branchK`, one row per epoch, 10 significant
// digits, LF line endings. All specs must share the main spec's T.
std::string dump_schedules(const MainScheduleSpec& main_spec,
                           const std::vector<BranchScheduleSpec>& branch_specs);

}  // namespace adp

#pragma once

#include <string>
#include <vector>

namespace adp {

struct SelfTestResult {
  std::string name;
  bool passed = false;
  std::string detail;  // first failure, or a short success note
};

// Individual checks, also exercised one by one from the acceptance suite.
SelfTestResult check_schedule_closed_forms();
SelfTestResult check_normalization_reductions();
SelfTestResult check_pairing_brute_force();
SelfTestResult check_dcml_brute_force();
SelfTestResult check_triplet_exhaustive();
SelfTestResult check_retrieval_ap_oracle();
SelfTestResult check_gradient_fidelity();
SelfTestResult check_clone_symmetry();
SelfTestResult check_checkpoint_roundtrip();

// The full invariant suite in a fixed order.
std::vector<SelfTestResult> run_selftests();

}  // namespace adp

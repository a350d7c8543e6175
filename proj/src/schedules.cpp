#include "adp/schedules.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <stdexcept>
#include <string>

namespace adp {

namespace {

void require_epoch_in_range(int epoch, int total_epochs) {
  if (epoch < 0 || epoch >= total_epochs) {
    throw std::invalid_argument("epoch " + std::to_string(epoch) + " outside [0," +
                                std::to_string(total_epochs) + ")");
  }
}

std::string fmt10(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

BranchScheduleDerived derive_branch_schedule(const BranchScheduleSpec& spec) {
  if (spec.total_epochs < 1) {
    throw std::invalid_argument("branch schedule: total epochs must be positive");
  }
  if (spec.period < 1 || spec.period > spec.total_epochs) {
    throw std::invalid_argument("branch schedule: period " + std::to_string(spec.period) +
                                " outside [1," + std::to_string(spec.total_epochs) + "]");
  }
  if (spec.eta_min <= 0.0) {
    throw std::invalid_argument("branch schedule: eta_min must be positive");
  }
  if (spec.lambda_decay <= 0.0 || spec.lambda_decay > 1.0) {
    throw std::invalid_argument("branch schedule: lambda_decay must lie in (0,1]");
  }
  if (spec.gamma_pow < 0.0) {
    throw std::invalid_argument("branch schedule: gamma_pow must be nonnegative");
  }
  BranchScheduleDerived d;
  d.cycles = spec.total_epochs / spec.period;
  d.eta_base = std::pow(static_cast<double>(d.cycles), spec.gamma_pow) * spec.eta_min;
  d.per_cycle_decay = std::pow(spec.lambda_decay, 1.0 / static_cast<double>(d.cycles));
  return d;
}

double pmoc_lr_at(const BranchScheduleSpec& spec, int epoch) {
  const BranchScheduleDerived d = derive_branch_schedule(spec);
  require_epoch_in_range(epoch, spec.total_epochs);
  const int q = epoch / spec.period;
  const int t = epoch % spec.period;
  const double cosine =
      0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) /
                            static_cast<double>(spec.period)));
  return d.eta_base * std::pow(d.per_cycle_decay, static_cast<double>(q)) * cosine;
}

double main_lr_at(const MainScheduleSpec& spec, int epoch) {
  if (spec.eta <= 0.0) throw std::invalid_argument("main schedule: eta must be positive");
  if (spec.warmup_start_frac <= 0.0 || spec.warmup_start_frac >= 1.0) {
    throw std::invalid_argument("main schedule: warmup_start_frac must lie in (0,1)");
  }
  if (spec.floor_frac <= 0.0 || spec.floor_frac >= 1.0) {
    throw std::invalid_argument("main schedule: floor_frac must lie in (0,1)");
  }
  if (spec.warmup_epochs < 0 || spec.warmup_epochs >= spec.total_epochs) {
    throw std::invalid_argument("main schedule: warmup_epochs must lie in [0,T)");
  }
  require_epoch_in_range(epoch, spec.total_epochs);

  const int w = spec.warmup_epochs;
  if (epoch < w) {
    const double frac = spec.warmup_start_frac +
                        (1.0 - spec.warmup_start_frac) * static_cast<double>(epoch) /
                            static_cast<double>(w);
    return spec.eta * frac;
  }
  const double floor = spec.floor_frac * spec.eta;
  const double span = static_cast<double>(spec.total_epochs - w);
  const double cosine =
      0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch - w) / span));
  return floor + (spec.eta - floor) * cosine;
}

std::string dump_schedules(const MainScheduleSpec& main_spec,
                           const std::vector<BranchScheduleSpec>& branch_specs) {
  for (const auto& b : branch_specs) {
    if (b.total_epochs != main_spec.total_epochs) {
      throw std::invalid_argument("dump_schedules: branch schedule spans " +
                                  std::to_string(b.total_epochs) + " epochs but main spans " +
                                  std::to_string(main_spec.total_epochs));
    }
    derive_branch_schedule(b);
  }
  std::string out = "epoch,main";
  for (size_t k = 0; k < branch_specs.size(); ++k) {
    out += ",branch" + std::to_string(k + 1);
  }
  out += "\n";
  for (int e = 0; e < main_spec.total_epochs; ++e) {
    out += std::to_string(e);
    out += ",";
    out += fmt10(main_lr_at(main_spec, e));
    for (const auto& b : branch_specs) {
      out += ",";
      out += fmt10(pmoc_lr_at(b, e));
    }
    out += "\n";
  }
  return out;
}

}  // namespace adp

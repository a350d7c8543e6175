#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "adp/checkpoint.hpp"
#include "adp/config.hpp"
#include "adp/losses.hpp"
#include "adp/runner.hpp"
#include "adp/schedules.hpp"
#include "adp/selftest.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

void write_file(const std::string& path, const std::string& content) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("write failed for " + path);
}

int cmd_schedule(const adp::RunConfig& config, const std::string& csv_override) {
  const std::string path = csv_override.empty() ? config.schedule_csv_path() : csv_override;
  const adp::ScheduleSet set = adp::schedule_set_from(config);
  const std::string csv = adp::dump_schedules(set.main, set.branch_specs);
  write_file(path, csv);

  double main_max = 0.0;
  std::vector<double> branch_max(set.branch_specs.size(), 0.0);
  for (int e = 0; e < config.schedules.T; ++e) {
    main_max = std::max(main_max, adp::main_lr_at(set.main, e));
    for (size_t b = 0; b < set.branch_specs.size(); ++b) {
      branch_max[b] = std::max(branch_max[b], adp::pmoc_lr_at(set.branch_specs[b], e));
    }
  }
  std::printf("wrote %s (%d epochs, %zu branches)\n", path.c_str(), config.schedules.T,
              set.branch_specs.size());
  std::printf("column maxima: main %.10g", main_max);
  double global_max = main_max;
  for (size_t b = 0; b < branch_max.size(); ++b) {
    std::printf(" branch%zu %.10g", b + 1, branch_max[b]);
    global_max = std::max(global_max, branch_max[b]);
  }
  std::printf("\nglobal max %.10g\n", global_max);
  return kExitOk;
}

int cmd_train(const adp::RunConfig& config) {
  adp::TrainOutcome outcome = adp::run_training(config);
  for (const auto& row : outcome.log) {
    std::printf("epoch %3d  total %.6f  ce %.6f  triplet %.6f  dcml %.6f  lr_main %.6g\n",
                row.epoch, row.total, row.ce, row.triplet, row.dcml, row.lrs[0]);
  }
  write_file(config.metrics_csv_path(), adp::metrics_csv(outcome.log));
  const std::string ckpt = config.checkpoint_path();
  const auto parent = std::filesystem::path(ckpt).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  adp::save_checkpoint(ckpt, outcome.model);
  std::printf("metrics: %s\ncheckpoint: %s\n", config.metrics_csv_path().c_str(), ckpt.c_str());
  if (outcome.log.size() >= 2 && outcome.log.back().total >= outcome.log.front().total) {
    std::printf("note: final loss did not drop below the initial loss\n");
  }
  return kExitOk;
}

void print_metrics(const char* split, const adp::RetrievalMetrics& m) {
  std::printf("%-16s mAP %.4f  Rank-1 %.4f  (%zu queries)\n", split, m.mAP, m.rank1,
              m.per_query_ap.size());
}

int cmd_eval(const adp::RunConfig& config, const std::string& checkpoint_override,
             bool perfect_features) {
  adp::EvalOutcome outcome;
  if (perfect_features) {
    outcome = adp::run_evaluation_perfect(config);
  } else {
    adp::BranchedModel model = adp::build_branched_model(adp::model_config_from(config));
    const std::string ckpt =
        checkpoint_override.empty() ? config.checkpoint_path() : checkpoint_override;
    adp::load_checkpoint(ckpt, model);
    outcome = adp::run_evaluation(config, model);
  }
  print_metrics("held-out domain", outcome.heldout);
  if (outcome.heldin) {
    print_metrics("in-domain", *outcome.heldin);
  } else {
    std::printf("in-domain        skipped (needs at least two training domains)\n");
  }
  return kExitOk;
}

int cmd_selftest(const std::string& inject_fault) {
  if (!inject_fault.empty()) {
    if (inject_fault == "chebyshev") {
      adp::inject_chebyshev_fault(true);
    } else {
      throw std::invalid_argument("unknown fault '" + inject_fault + "'");
    }
  }
  const std::vector<adp::SelfTestResult> results = adp::run_selftests();
  size_t width = 0;
  for (const auto& r : results) width = std::max(width, r.name.size());
  bool all_ok = true;
  for (const auto& r : results) {
    std::printf("[%s] %-*s  %s\n", r.passed ? "PASS" : "FAIL", static_cast<int>(width),
                r.name.c_str(), r.detail.c_str());
    all_ok &= r.passed;
  }
  if (!all_ok) {
    std::printf("self-test FAILED:");
    for (const auto& r : results) {
      if (!r.passed) std::printf(" %s;", r.name.c_str());
    }
    std::printf("\n");
    return kExitRuntime;
  }
  std::printf("self-test passed (%zu checks)\n", results.size());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multi-branch identity-retrieval training pipeline"};
  app.require_subcommand(1);

  std::string config_path, out_dir, csv_override, checkpoint_override, inject_fault;
  std::vector<std::string> overrides;
  bool paper_defaults = false, perfect_features = false;

  app.add_option("--config", config_path, "configuration file (section.key = value lines)");
  app.add_option("--set", overrides, "override, e.g. --set losses.w3=0 (repeatable)");
  app.add_flag("--paper-defaults", paper_defaults,
               "re-impose the published training recipe over the config file");
  app.add_option("--out", out_dir, "output directory (overrides io.out_dir)");

  CLI::App* train = app.add_subcommand("train", "train and write checkpoint + metrics log");
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on both splits");
  eval->add_option("--checkpoint", checkpoint_override, "checkpoint path");
  eval->add_flag("--perfect-features", perfect_features,
                 "bypass the model with identity one-hot features");
  CLI::App* schedule = app.add_subcommand("schedule", "write the per-epoch learning-rate table");
  schedule->add_option("--csv", csv_override, "output CSV path");
  CLI::App* selftest = app.add_subcommand("selftest", "run the invariant suite");
  selftest->add_option("--inject-fault", inject_fault,
                       "testing hook: corrupt a named computation (chebyshev)")
      ->group("");  // hidden

  for (CLI::App* sub : {train, eval, schedule, selftest}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (selftest->parsed()) return cmd_selftest(inject_fault);

    if (!out_dir.empty()) overrides.push_back("io.out_dir = " + out_dir);
    const adp::RunConfig config = adp::assemble_config(config_path, paper_defaults, overrides);
    if (train->parsed()) return cmd_train(config);
    if (eval->parsed()) return cmd_eval(config, checkpoint_override, perfect_features);
    if (schedule->parsed()) return cmd_schedule(config, csv_override);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}

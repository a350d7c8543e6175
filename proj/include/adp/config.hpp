#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adp/data_eval.hpp"
#include "adp/losses.hpp"
#include "adp/model.hpp"

namespace adp {

// Full run configuration. Defaults carry the published method values
// (k=7 branches, periods [120,60,30,24,20,15,12], eta_min=0.004,
// gamma=1.806, lambda=0.5, loss weights 1/1/0.01); the synthetic-data block
// defaults to desk scale.
struct RunConfig {
  struct Model {
    int trunk_blocks = 6;
    int clone_depth = 4;
    int k = 7;
    int64_t d = 16;
    int hidden_expansion = 2;
    BlockKind block = BlockKind::kTokenMixLite;
    int dymain_blocks = 4;
    FuseMode fuse = FuseMode::kMean;
    bool adain_multiply = false;
  } model;

  struct Schedules {
    int T = 120;
    double eta_min = 0.004;
    double gamma_pow = 1.806;
    double lambda_decay = 0.5;
    std::vector<int> periods = {120, 60, 30, 24, 20, 15, 12};
    double main_eta = 0.004;
    int warmup_epochs = 10;
    double warmup_start_frac = 0.01;
    double floor_frac = 0.002;
    double momentum = 0.9;
  } schedules;

  struct Losses {
    double w1 = 1.0;
    double w2 = 1.0;
    double w3 = 0.01;
    double margin = 0.3;
    DcmlMetric dcml_metric = DcmlMetric::kChebyshev;
  } losses;

  struct Data {
    int num_ids = 20;
    int num_domains = 3;
    int samples_per_id_per_domain = 4;
    int latent_dim = 8;
    int64_t tokens = 8;
    int64_t channels = 8;
    double noise_sigma = 0.05;
    double style_strength = 1.0;
    uint64_t seed = 1;
    int heldout_domain = 2;
    int P = 4;  // identities per batch
    int K = 4;  // instances per identity
  } data;

  struct Io {
    std::string out_dir = "out";
    std::string checkpoint;    // default: <out_dir>/checkpoint.adp
    std::string metrics_csv;   // default: <out_dir>/metrics.csv
    std::string schedule_csv;  // default: <out_dir>/schedules.csv
  } io;

  struct Toggles {
    bool enable_dymain = true;
    bool enable_dcml = true;   // off: the alignment weight is forced to 0
    bool enable_pmoc = true;   // off: every branch follows the main schedule
  } toggles;

  std::string checkpoint_path() const;
  std::string metrics_csv_path() const;
  std::string schedule_csv_path() const;
};

// Applies one `section.key = value` assignment. Unknown keys are errors.
void apply_config_line(RunConfig& config, const std::string& line);

// defaults <- file <- overrides, then validation. An empty path skips the
// file. Override strings use the same `section.key=value` syntax.
RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

// Same, with the published recipe optionally re-imposed between the file
// and the overrides.
RunConfig assemble_config(const std::string& path, bool paper_defaults,
                          const std::vector<std::string>& overrides);

// Re-imposes the published training recipe (epochs, schedule constants,
// periods, branch count, loss weights, batch composition) over a config.
void apply_paper_defaults(RunConfig& config);

// Canonical text form; parsing it back yields an equal config.
std::string serialize_config(const RunConfig& config);

// Throws std::invalid_argument naming the offending key when an invariant
// fails (period list length, schedule ranges, PK feasibility, ...).
void validate_config(const RunConfig& config);

// Derived builders shared by the trainer, the evaluator and the CLI.
ModelConfig model_config_from(const RunConfig& config);
ScheduleSet schedule_set_from(const RunConfig& config);
SyntheticSpec synthetic_spec_from(const RunConfig& config);

}  // namespace adp

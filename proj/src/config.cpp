#include "adp/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

namespace adp {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value,
                            const std::string& expected) {
  throw std::invalid_argument("config key '" + key + "': cannot parse '" + value + "' as " +
                              expected);
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int out = std::stoi(v, &pos);
    if (pos != v.size()) bad_value(key, v, "an integer");
    return out;
  } catch (const std::invalid_argument&) {
    bad_value(key, v, "an integer");
  } catch (const std::out_of_range&) {
    bad_value(key, v, "an integer");
  }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const uint64_t out = std::stoull(v, &pos);
    if (pos != v.size()) bad_value(key, v, "an unsigned integer");
    return out;
  } catch (const std::exception&) {
    bad_value(key, v, "an unsigned integer");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) bad_value(key, v, "a real number");
    return out;
  } catch (const std::exception&) {
    bad_value(key, v, "a real number");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  bad_value(key, v, "a boolean (true/false/1/0/on/off)");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::istringstream in(v);
  std::string cell;
  while (std::getline(in, cell, ',')) {
    out.push_back(parse_int(key, trim(cell)));
  }
  if (out.empty()) bad_value(key, v, "a comma-separated integer list");
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_int_list(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

const char* block_name(BlockKind k) {
  return k == BlockKind::kResidualChannelMlp ? "residual_channel_mlp" : "token_mix_lite";
}

BlockKind parse_block(const std::string& key, const std::string& v) {
  if (v == "residual_channel_mlp") return BlockKind::kResidualChannelMlp;
  if (v == "token_mix_lite") return BlockKind::kTokenMixLite;
  bad_value(key, v, "residual_channel_mlp or token_mix_lite");
}

const char* fuse_name(FuseMode f) { return f == FuseMode::kMean ? "mean" : "concat"; }

FuseMode parse_fuse(const std::string& key, const std::string& v) {
  if (v == "mean") return FuseMode::kMean;
  if (v == "concat") return FuseMode::kConcat;
  bad_value(key, v, "mean or concat");
}

const char* metric_name(DcmlMetric m) {
  switch (m) {
    case DcmlMetric::kChebyshev: return "chebyshev";
    case DcmlMetric::kManhattan: return "manhattan";
    case DcmlMetric::kEuclidean: return "euclidean";
  }
  return "chebyshev";
}

DcmlMetric parse_metric(const std::string& key, const std::string& v) {
  if (v == "chebyshev") return DcmlMetric::kChebyshev;
  if (v == "manhattan") return DcmlMetric::kManhattan;
  if (v == "euclidean") return DcmlMetric::kEuclidean;
  bad_value(key, v, "chebyshev, manhattan or euclidean");
}

struct KeyBinding {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyBinding>& bindings() {
  static const std::vector<KeyBinding> table = {
      {"model.trunk_blocks",
       [](RunConfig& c, const std::string& v) {
         c.model.trunk_blocks = parse_int("model.trunk_blocks", v);
       },
       [](const RunConfig& c) { return std::to_string(c.model.trunk_blocks); }},
      {"model.clone_depth",
       [](RunConfig& c, const std::string& v) {
         c.model.clone_depth = parse_int("model.clone_depth", v);
       },
       [](const RunConfig& c) { return std::to_string(c.model.clone_depth); }},
      {"model.k",
       [](RunConfig& c, const std::string& v) { c.model.k = parse_int("model.k", v); },
       [](const RunConfig& c) { return std::to_string(c.model.k); }},
      {"model.d",
       [](RunConfig& c, const std::string& v) { c.model.d = parse_int("model.d", v); },
       [](const RunConfig& c) { return std::to_string(c.model.d); }},
      {"model.hidden_expansion",
       [](RunConfig& c, const std::string& v) {
         c.model.hidden_expansion = parse_int("model.hidden_expansion", v);
       },
       [](const RunConfig& c) { return std::to_string(c.model.hidden_expansion); }},
      {"model.block",
       [](RunConfig& c, const std::string& v) { c.model.block = parse_block("model.block", v); },
       [](const RunConfig& c) { return std::string(block_name(c.model.block)); }},
      {"model.dymain_blocks",
       [](RunConfig& c, const std::string& v) {
         c.model.dymain_blocks = parse_int("model.dymain_blocks", v);
       },
       [](const RunConfig& c) { return std::to_string(c.model.dymain_blocks); }},
      {"model.fuse",
       [](RunConfig& c, const std::string& v) { c.model.fuse = parse_fuse("model.fuse", v); },
       [](const RunConfig& c) { return std::string(fuse_name(c.model.fuse)); }},
      {"model.adain_multiply",
       [](RunConfig& c, const std::string& v) {
         c.model.adain_multiply = parse_bool("model.adain_multiply", v);
       },
       [](const RunConfig& c) { return std::string(c.model.adain_multiply ? "true" : "false"); }},

      {"schedules.T",
       [](RunConfig& c, const std::string& v) { c.schedules.T = parse_int("schedules.T", v); },
       [](const RunConfig& c) { return std::to_string(c.schedules.T); }},
      {"schedules.eta_min",
       [](RunConfig& c, const std::string& v) {
         c.schedules.eta_min = parse_double("schedules.eta_min", v);
       },
       [](const RunConfig& c) { return fmt_double(c.schedules.eta_min); }},
      {"schedules.gamma_pow",
       [](RunConfig& c, const std::string& v) {
         c.schedules.gamma_pow = parse_double("schedules.gamma_pow", v);
       },
       [](const RunConfig& c) { return fmt_double(c.schedules.gamma_pow); }},
      {"schedules.lambda_decay",
       [](RunConfig& c, const std::string& v) {
         c.schedules.lambda_decay = parse_double("schedules.lambda_decay", v);
       },
       [](const RunConfig& c) { return fmt_double(c.schedules.lambda_decay); }},
      {"schedules.periods",
       [](RunConfig& c, const std::string& v) {
         c.schedules.periods = parse_int_list("schedules.periods", v);
       },
       [](const RunConfig& c) { return fmt_int_list(c.schedules.periods); }},
      {"schedules.main_eta",
       [](RunConfig& c, const std::string& v) {
         c.schedules.main_eta = parse_double("schedules.main_eta", v);
       },
       [](const RunConfig& c) { return fmt_double(c.schedules.main_eta); }},
      {"schedules.warmup_epochs",
       [](RunConfig& c, const std::string& v) {
         c.schedules.warmup_epochs = parse_int("schedules.warmup_epochs", v);
       },
       [](const RunConfig& c) { return std::to_string(c.schedules.warmup_epochs); }},
      {"schedules.warmup_start_frac",
       [](RunConfig& c, const std::string& v) {
         c.schedules.warmup_start_frac = parse_double("schedules.warmup_start_frac", v);
       },
       [](const RunConfig& c) { return fmt_double(c.schedules.warmup_start_frac); }},
      {"schedules.floor_frac",
       [](RunConfig& c, const std::string& v) {
         c.schedules.floor_frac = parse_double("schedules.floor_frac", v);
       },
       [](const RunConfig& c) { return fmt_double(c.schedules.floor_frac); }},
      {"schedules.momentum",
       [](RunConfig& c, const std::string& v) {
         c.schedules.momentum = parse_double("schedules.momentum", v);
       },
       [](const RunConfig& c) { return fmt_double(c.schedules.momentum); }},

      {"losses.w1",
       [](RunConfig& c, const std::string& v) { c.losses.w1 = parse_double("losses.w1", v); },
       [](const RunConfig& c) { return fmt_double(c.losses.w1); }},
      {"losses.w2",
       [](RunConfig& c, const std::string& v) { c.losses.w2 = parse_double("losses.w2", v); },
       [](const RunConfig& c) { return fmt_double(c.losses.w2); }},
      {"losses.w3",
       [](RunConfig& c, const std::string& v) { c.losses.w3 = parse_double("losses.w3", v); },
       [](const RunConfig& c) { return fmt_double(c.losses.w3); }},
      {"losses.margin",
       [](RunConfig& c, const std::string& v) {
         c.losses.margin = parse_double("losses.margin", v);
       },
       [](const RunConfig& c) { return fmt_double(c.losses.margin); }},
      {"losses.dcml_metric",
       [](RunConfig& c, const std::string& v) {
         c.losses.dcml_metric = parse_metric("losses.dcml_metric", v);
       },
       [](const RunConfig& c) { return std::string(metric_name(c.losses.dcml_metric)); }},

      {"data.num_ids",
       [](RunConfig& c, const std::string& v) { c.data.num_ids = parse_int("data.num_ids", v); },
       [](const RunConfig& c) { return std::to_string(c.data.num_ids); }},
      {"data.num_domains",
       [](RunConfig& c, const std::string& v) {
         c.data.num_domains = parse_int("data.num_domains", v);
       },
       [](const RunConfig& c) { return std::to_string(c.data.num_domains); }},
      {"data.samples_per_id_per_domain",
       [](RunConfig& c, const std::string& v) {
         c.data.samples_per_id_per_domain = parse_int("data.samples_per_id_per_domain", v);
       },
       [](const RunConfig& c) { return std::to_string(c.data.samples_per_id_per_domain); }},
      {"data.latent_dim",
       [](RunConfig& c, const std::string& v) {
         c.data.latent_dim = parse_int("data.latent_dim", v);
       },
       [](const RunConfig& c) { return std::to_string(c.data.latent_dim); }},
      {"data.tokens",
       [](RunConfig& c, const std::string& v) { c.data.tokens = parse_int("data.tokens", v); },
       [](const RunConfig& c) { return std::to_string(c.data.tokens); }},
      {"data.channels",
       [](RunConfig& c, const std::string& v) {
         c.data.channels = parse_int("data.channels", v);
       },
       [](const RunConfig& c) { return std::to_string(c.data.channels); }},
      {"data.noise_sigma",
       [](RunConfig& c, const std::string& v) {
         c.data.noise_sigma = parse_double("data.noise_sigma", v);
       },
       [](const RunConfig& c) { return fmt_double(c.data.noise_sigma); }},
      {"data.style_strength",
       [](RunConfig& c, const std::string& v) {
         c.data.style_strength = parse_double("data.style_strength", v);
       },
       [](const RunConfig& c) { return fmt_double(c.data.style_strength); }},
      {"data.seed",
       [](RunConfig& c, const std::string& v) { c.data.seed = parse_u64("data.seed", v); },
       [](const RunConfig& c) { return std::to_string(c.data.seed); }},
      {"data.heldout_domain",
       [](RunConfig& c, const std::string& v) {
         c.data.heldout_domain = parse_int("data.heldout_domain", v);
       },
       [](const RunConfig& c) { return std::to_string(c.data.heldout_domain); }},
      {"data.P",
       [](RunConfig& c, const std::string& v) { c.data.P = parse_int("data.P", v); },
       [](const RunConfig& c) { return std::to_string(c.data.P); }},
      {"data.K",
       [](RunConfig& c, const std::string& v) { c.data.K = parse_int("data.K", v); },
       [](const RunConfig& c) { return std::to_string(c.data.K); }},

      {"io.out_dir",
       [](RunConfig& c, const std::string& v) { c.io.out_dir = v; },
       [](const RunConfig& c) { return c.io.out_dir; }},
      {"io.checkpoint",
       [](RunConfig& c, const std::string& v) { c.io.checkpoint = v; },
       [](const RunConfig& c) { return c.io.checkpoint; }},
      {"io.metrics_csv",
       [](RunConfig& c, const std::string& v) { c.io.metrics_csv = v; },
       [](const RunConfig& c) { return c.io.metrics_csv; }},
      {"io.schedule_csv",
       [](RunConfig& c, const std::string& v) { c.io.schedule_csv = v; },
       [](const RunConfig& c) { return c.io.schedule_csv; }},

      {"toggles.enable_dymain",
       [](RunConfig& c, const std::string& v) {
         c.toggles.enable_dymain = parse_bool("toggles.enable_dymain", v);
       },
       [](const RunConfig& c) {
         return std::string(c.toggles.enable_dymain ? "true" : "false");
       }},
      {"toggles.enable_dcml",
       [](RunConfig& c, const std::string& v) {
         c.toggles.enable_dcml = parse_bool("toggles.enable_dcml", v);
       },
       [](const RunConfig& c) { return std::string(c.toggles.enable_dcml ? "true" : "false"); }},
      {"toggles.enable_pmoc",
       [](RunConfig& c, const std::string& v) {
         c.toggles.enable_pmoc = parse_bool("toggles.enable_pmoc", v);
       },
       [](const RunConfig& c) { return std::string(c.toggles.enable_pmoc ? "true" : "false"); }},
  };
  return table;
}

}  // namespace

std::string RunConfig::checkpoint_path() const {
  return io.checkpoint.empty() ? io.out_dir + "/checkpoint.adp" : io.checkpoint;
}
std::string RunConfig::metrics_csv_path() const {
  return io.metrics_csv.empty() ? io.out_dir + "/metrics.csv" : io.metrics_csv;
}
std::string RunConfig::schedule_csv_path() const {
  return io.schedule_csv.empty() ? io.out_dir + "/schedules.csv" : io.schedule_csv;
}

void apply_config_line(RunConfig& config, const std::string& raw) {
  std::string line = raw;
  const auto hash = line.find('#');
  if (hash != std::string::npos) line = line.substr(0, hash);
  line = trim(line);
  if (line.empty()) return;

  const auto eq = line.find('=');
  if (eq == std::string::npos) {
    throw std::invalid_argument("config line is not `section.key = value`: " + trim(raw));
  }
  const std::string key = trim(line.substr(0, eq));
  const std::string value = trim(line.substr(eq + 1));
  for (const auto& b : bindings()) {
    if (key == b.key) {
      b.set(config, value);
      return;
    }
  }
  throw std::invalid_argument("unknown config key '" + key + "'");
}

RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  return assemble_config(path, false, overrides);
}

RunConfig assemble_config(const std::string& path, bool paper_defaults,
                          const std::vector<std::string>& overrides) {
  RunConfig config;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("config file not found: " + path);
    std::string line;
    while (std::getline(in, line)) apply_config_line(config, line);
  }
  if (paper_defaults) apply_paper_defaults(config);
  for (const auto& o : overrides) apply_config_line(config, o);
  validate_config(config);
  return config;
}

void apply_paper_defaults(RunConfig& config) {
  config.model.k = 7;
  config.model.clone_depth = 4;
  config.model.dymain_blocks = 4;
  config.schedules.T = 120;
  config.schedules.eta_min = 0.004;
  config.schedules.gamma_pow = 1.806;
  config.schedules.lambda_decay = 0.5;
  config.schedules.periods = {120, 60, 30, 24, 20, 15, 12};
  config.schedules.main_eta = 0.004;
  config.schedules.warmup_epochs = 10;
  config.schedules.warmup_start_frac = 0.01;
  config.schedules.floor_frac = 0.002;
  config.schedules.momentum = 0.9;
  config.losses.w1 = 1.0;
  config.losses.w2 = 1.0;
  config.losses.w3 = 0.01;
  config.losses.dcml_metric = DcmlMetric::kChebyshev;
  config.data.P = 16;
  config.data.K = 4;
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& b : bindings()) {
    const std::string key = b.key;
    const std::string this_section = key.substr(0, key.find('.'));
    if (this_section != section) {
      if (!section.empty()) out += "\n";
      out += "# [" + this_section + "]\n";
      section = this_section;
    }
    out += key + " = " + b.get(config) + "\n";
  }
  return out;
}

void validate_config(const RunConfig& config) {
  auto fail = [](const std::string& key, const std::string& why) {
    throw std::invalid_argument("config key '" + key + "': " + why);
  };
  const auto& m = config.model;
  if (m.k < 1) fail("model.k", "needs at least one branch");
  if (m.clone_depth < 1) fail("model.clone_depth", "must be at least 1");
  if (m.trunk_blocks < m.clone_depth) {
    fail("model.trunk_blocks", "must be at least model.clone_depth");
  }
  if (m.d < 1 || m.hidden_expansion < 1) fail("model.d", "dimensions must be positive");
  if (m.dymain_blocks < 0 || m.dymain_blocks > m.clone_depth) {
    fail("model.dymain_blocks", "must lie in [0, model.clone_depth]");
  }

  const auto& s = config.schedules;
  if (static_cast<int>(s.periods.size()) != m.k) {
    fail("schedules.periods",
         "lists " + std::to_string(s.periods.size()) + " periods but model.k = " +
             std::to_string(m.k));
  }
  for (int p : s.periods) {
    derive_branch_schedule(BranchScheduleSpec{.total_epochs = s.T,
                                              .period = p,
                                              .eta_min = s.eta_min,
                                              .gamma_pow = s.gamma_pow,
                                              .lambda_decay = s.lambda_decay});
  }
  main_lr_at(MainScheduleSpec{.eta = s.main_eta,
                              .warmup_epochs = s.warmup_epochs,
                              .warmup_start_frac = s.warmup_start_frac,
                              .floor_frac = s.floor_frac,
                              .total_epochs = s.T},
             0);
  if (s.momentum < 0.0 || s.momentum >= 1.0) fail("schedules.momentum", "must lie in [0,1)");

  const auto& l = config.losses;
  if (l.w1 < 0.0 || l.w2 < 0.0 || l.w3 < 0.0) fail("losses.w1", "weights must be nonnegative");
  if (l.margin < 0.0) fail("losses.margin", "must be nonnegative");

  const auto& d = config.data;
  synthetic_spec_from(config);  // field-level checks
  if (d.heldout_domain < 0 || d.heldout_domain >= d.num_domains) {
    fail("data.heldout_domain", "outside [0, data.num_domains)");
  }
  if (d.P < 2 || d.K < 2) fail("data.P", "PK sampling needs P >= 2 and K >= 2");
  if (d.num_ids < d.P) fail("data.P", "more identities per batch than identities");
  const int train_domains = d.num_domains - 1;
  const int per_cell = d.samples_per_id_per_domain -
                       (d.samples_per_id_per_domain >= 3 ? 1 : 0);
  if (train_domains * per_cell < d.K) {
    fail("data.K", "only " + std::to_string(train_domains * per_cell) +
                       " training samples per identity available");
  }
}

ModelConfig model_config_from(const RunConfig& config) {
  ModelConfig mc;
  mc.trunk_blocks = config.model.trunk_blocks;
  mc.clone_depth = config.model.clone_depth;
  mc.branches = config.model.k;
  mc.width = config.model.d;
  mc.input_channels = config.data.channels;
  mc.input_tokens = config.data.tokens;
  mc.num_classes = config.data.num_ids;
  mc.hidden_expansion = config.model.hidden_expansion;
  mc.block_kind = config.model.block;
  mc.dymain_blocks = config.model.dymain_blocks;
  mc.enable_dymain = config.toggles.enable_dymain;
  mc.adain_multiply = config.model.adain_multiply;
  mc.seed = config.data.seed * 0x9e3779b97f4a7c15ULL + 1;
  return mc;
}

ScheduleSet schedule_set_from(const RunConfig& config) {
  ScheduleSet set;
  const auto& s = config.schedules;
  set.main = MainScheduleSpec{.eta = s.main_eta,
                              .warmup_epochs = s.warmup_epochs,
                              .warmup_start_frac = s.warmup_start_frac,
                              .floor_frac = s.floor_frac,
                              .total_epochs = s.T};
  for (int p : s.periods) {
    set.branch_specs.push_back(BranchScheduleSpec{.total_epochs = s.T,
                                                  .period = p,
                                                  .eta_min = s.eta_min,
                                                  .gamma_pow = s.gamma_pow,
                                                  .lambda_decay = s.lambda_decay});
  }
  set.pmoc_enabled = config.toggles.enable_pmoc;
  return set;
}

SyntheticSpec synthetic_spec_from(const RunConfig& config) {
  const auto& d = config.data;
  SyntheticSpec spec;
  spec.num_ids = d.num_ids;
  spec.num_domains = d.num_domains;
  spec.samples_per_id_per_domain = d.samples_per_id_per_domain;
  spec.latent_dim = d.latent_dim;
  spec.tokens = d.tokens;
  spec.channels = d.channels;
  spec.noise_sigma = d.noise_sigma;
  spec.style_strength = d.style_strength;
  spec.seed = d.seed;
  if (spec.num_ids < 2 || spec.num_domains < 2 || spec.samples_per_id_per_domain < 2 ||
      spec.latent_dim < 1 || spec.tokens < 1 || spec.channels < 1 || spec.noise_sigma < 0.0 ||
      spec.style_strength < 0.0) {
    throw std::invalid_argument("config key 'data.num_ids': synthetic data block is infeasible");
  }
  return spec;
}

}  // namespace adp

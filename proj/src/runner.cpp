#include "adp/runner.hpp"

#include <cmath>
#include <cstdio>
#include <random>
#include <stdexcept>

namespace adp {

namespace {

std::string fmt10(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

Tensor stack_samples(const SyntheticDataset& ds, const std::vector<int>& indices) {
  const auto& first = ds.samples[static_cast<size_t>(indices[0])].tokens;
  const int64_t l = first.shape[0], d = first.shape[1];
  Tensor out = Tensor::zeros({static_cast<int64_t>(indices.size()), l, d});
  for (size_t i = 0; i < indices.size(); ++i) {
    const auto& tokens = ds.samples[static_cast<size_t>(indices[i])].tokens;
    std::copy(tokens.values.begin(), tokens.values.end(),
              out.values.begin() + static_cast<int64_t>(i) * l * d);
  }
  return out;
}

// Fused features for a sample list, computed in fixed-size chunks.
Tensor fused_features(const BranchedModel& model, const SyntheticDataset& ds,
                      const std::vector<int>& indices, FuseMode fuse) {
  const int64_t chunk = 32;
  Tensor all;
  int64_t done = 0;
  while (done < static_cast<int64_t>(indices.size())) {
    const int64_t n = std::min(chunk, static_cast<int64_t>(indices.size()) - done);
    std::vector<int> part(indices.begin() + done, indices.begin() + done + n);
    const ForwardOutput out =
        forward_all_branches(model, stack_samples(ds, part), RunMode::kEval, fuse);
    if (done == 0) {
      all = Tensor::zeros({static_cast<int64_t>(indices.size()), out.fused.shape[1]});
    }
    std::copy(out.fused.values.begin(), out.fused.values.end(),
              all.values.begin() + done * all.shape[1]);
    done += n;
  }
  return all;
}

void split_labels(const SyntheticDataset& ds, const std::vector<int>& indices,
                  std::vector<int>& ids, std::vector<int>& domains) {
  for (int idx : indices) {
    ids.push_back(ds.samples[static_cast<size_t>(idx)].id_label);
    domains.push_back(ds.samples[static_cast<size_t>(idx)].domain_label);
  }
}

EvalOutcome evaluate_splits(const SyntheticDataset& ds, const Tensor& heldout_feats,
                            const Tensor& gallery_feats,
                            const std::optional<Tensor>& heldin_feats) {
  std::vector<int> qids, qdoms, gids, gdoms;
  split_labels(ds, ds.heldout_indices, qids, qdoms);
  const auto& gallery_indices =
      ds.heldin_test_indices.empty() ? ds.train_indices : ds.heldin_test_indices;
  split_labels(ds, gallery_indices, gids, gdoms);

  EvalOutcome out;
  out.heldout = evaluate_retrieval(heldout_feats, qids, qdoms, gallery_feats, gids, gdoms);
  if (heldin_feats && ds.spec.num_domains >= 3) {
    out.heldin = evaluate_retrieval(*heldin_feats, gids, gdoms, *heldin_feats, gids, gdoms);
  }
  return out;
}

}  // namespace

TrainOutcome run_training(const RunConfig& config) {
  validate_config(config);
  const SyntheticDataset dataset =
      generate_dataset(synthetic_spec_from(config), config.data.heldout_domain);
  TrainOutcome outcome{build_branched_model(model_config_from(config)), {}};
  const ScheduleSet schedules = schedule_set_from(config);

  LossWeights weights{config.losses.w1, config.losses.w2,
                      config.toggles.enable_dcml ? config.losses.w3 : 0.0};
  const TripletConfig triplet{config.losses.margin};

  std::mt19937_64 sampler_rng(config.data.seed * 0x2545f4914f6cdd1dULL + 77);
  SgdState state{config.schedules.momentum, {}};

  const int batch_size = config.data.P * config.data.K;
  const int steps_per_epoch = std::max<int>(
      1, static_cast<int>((dataset.train_indices.size() + batch_size - 1) /
                          static_cast<size_t>(batch_size)));

  for (int epoch = 0; epoch < config.schedules.T; ++epoch) {
    EpochLogRow row;
    row.epoch = epoch;
    for (int step = 0; step < steps_per_epoch; ++step) {
      const PkBatch batch =
          pk_batch_sample(dataset, config.data.P, config.data.K, sampler_rng);
      TrainStepResult r;
      try {
        r = train_step(outcome.model, batch.tokens, batch.labels, epoch, state, schedules,
                       weights, triplet, config.losses.dcml_metric);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ": " +
                                 e.what());
      }
      if (!std::isfinite(r.total)) {
        const char* term = !std::isfinite(r.ce)        ? "cross-entropy"
                           : !std::isfinite(r.triplet) ? "triplet"
                           : !std::isfinite(r.dcml)    ? "alignment"
                                                       : "total";
        throw std::runtime_error("training diverged: non-finite " + std::string(term) +
                                 " loss at epoch " + std::to_string(epoch));
      }
      row.total += r.total;
      row.ce += r.ce;
      row.triplet += r.triplet;
      row.dcml += r.dcml;
      if (step == 0) row.lrs = r.group_lrs;
    }
    row.total /= steps_per_epoch;
    row.ce /= steps_per_epoch;
    row.triplet /= steps_per_epoch;
    row.dcml /= steps_per_epoch;
    outcome.log.push_back(std::move(row));
  }
  return outcome;
}

std::string metrics_csv(const std::vector<EpochLogRow>& log) {
  std::string out = "epoch,total,ce,triplet,dcml,lr_main";
  if (!log.empty()) {
    for (size_t b = 1; b < log[0].lrs.size(); ++b) out += ",lr_b" + std::to_string(b);
  }
  out += "\n";
  for (const auto& row : log) {
    out += std::to_string(row.epoch);
    out += "," + fmt10(row.total) + "," + fmt10(row.ce) + "," + fmt10(row.triplet) + "," +
           fmt10(row.dcml);
    for (double lr : row.lrs) out += "," + fmt10(lr);
    out += "\n";
  }
  return out;
}

EvalOutcome run_evaluation(const RunConfig& config, const BranchedModel& model) {
  const SyntheticDataset dataset =
      generate_dataset(synthetic_spec_from(config), config.data.heldout_domain);
  const auto& gallery_indices =
      dataset.heldin_test_indices.empty() ? dataset.train_indices : dataset.heldin_test_indices;

  const Tensor heldout_feats =
      fused_features(model, dataset, dataset.heldout_indices, config.model.fuse);
  const Tensor gallery_feats =
      fused_features(model, dataset, gallery_indices, config.model.fuse);
  std::optional<Tensor> heldin_feats;
  if (config.data.num_domains >= 3) heldin_feats = gallery_feats;
  return evaluate_splits(dataset, heldout_feats, gallery_feats, heldin_feats);
}

EvalOutcome run_evaluation_perfect(const RunConfig& config) {
  const SyntheticDataset dataset =
      generate_dataset(synthetic_spec_from(config), config.data.heldout_domain);
  const auto& gallery_indices =
      dataset.heldin_test_indices.empty() ? dataset.train_indices : dataset.heldin_test_indices;

  auto one_hot = [&](const std::vector<int>& indices) {
    Tensor f = Tensor::zeros({static_cast<int64_t>(indices.size()),
                              static_cast<int64_t>(config.data.num_ids)});
    for (size_t i = 0; i < indices.size(); ++i) {
      f.at({static_cast<int64_t>(i),
            static_cast<int64_t>(dataset.samples[static_cast<size_t>(indices[i])].id_label)}) =
          1.0;
    }
    return f;
  };
  const Tensor heldout_feats = one_hot(dataset.heldout_indices);
  const Tensor gallery_feats = one_hot(gallery_indices);
  std::optional<Tensor> heldin_feats;
  if (config.data.num_domains >= 3) heldin_feats = gallery_feats;
  return evaluate_splits(dataset, heldout_feats, gallery_feats, heldin_feats);
}

}  // namespace adp

#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "adp/tensor.hpp"

namespace adp {

// Synthetic multi-domain identity data: each identity owns a latent
// prototype, each domain a per-channel style transform, and samples are
// styled renderings of noisy prototypes through one fixed linear map.
struct SyntheticSpec {
  int num_ids = 20;
  int num_domains = 3;
  int samples_per_id_per_domain = 4;
  int latent_dim = 8;
  int64_t tokens = 8;       // L
  int64_t channels = 8;     // d_in
  double noise_sigma = 0.05;
  double style_strength = 1.0;
  uint64_t seed = 1;
};

struct LabeledSample {
  Tensor tokens;  // (L, d_in)
  int id_label = 0;
  int domain_label = 0;
};

// Samples plus a split: the designated domain is withheld from training
// entirely, and one sample per (id, training-domain) cell is reserved as an
// in-domain test partition when the cell holds at least three samples.
struct SyntheticDataset {
  SyntheticSpec spec;
  int heldout_domain = 0;
  std::vector<LabeledSample> samples;
  std::vector<int> train_indices;
  std::vector<int> heldin_test_indices;
  std::vector<int> heldout_indices;
};

SyntheticDataset generate_dataset(const SyntheticSpec& spec, int heldout_domain);

// P identities x K instances drawn from the training split without
// replacement; the batch satisfies the triplet-mining preconditions.
struct PkBatch {
  Tensor tokens;            // (P*K, L, d_in)
  std::vector<int> labels;  // identity labels
};

PkBatch pk_batch_sample(const SyntheticDataset& dataset, int ids_per_batch,
                        int instances_per_id, std::mt19937_64& rng);

struct RetrievalMetrics {
  double mAP = 0.0;
  double rank1 = 0.0;
  std::vector<double> per_query_ap;
};

// Ranks the gallery by Euclidean distance on internally L2-normalized
// features, excluding gallery items that share BOTH id and domain with the
// query. Throws when a query is left with no relevant item.
RetrievalMetrics evaluate_retrieval(const Tensor& query_feats, const std::vector<int>& query_ids,
                                    const std::vector<int>& query_domains,
                                    const Tensor& gallery_feats,
                                    const std::vector<int>& gallery_ids,
                                    const std::vector<int>& gallery_domains);

// Direct evaluation of the average-precision sum over a ranked binary
// relevance list; the independent cross-check for evaluate_retrieval.
double average_precision_oracle(const std::vector<int>& ranked_relevance);

// One-file dump: text header with the generator settings, then per record
// the (id, domain) labels and the raw token values as little-endian 64-bit
// reals.
void dump_dataset(const std::string& path, const SyntheticDataset& dataset);
SyntheticDataset load_dataset_dump(const std::string& path);

}  // namespace adp

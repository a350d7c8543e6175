#include "adp/data_eval.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "dataset serialization assumes a little-endian host");

namespace adp {

namespace {

void validate_spec(const SyntheticSpec& spec) {
  if (spec.num_ids < 2) throw std::invalid_argument("synthetic spec: needs at least 2 ids");
  if (spec.num_domains < 2) {
    throw std::invalid_argument("synthetic spec: needs at least 2 domains");
  }
  if (spec.samples_per_id_per_domain < 2) {
    throw std::invalid_argument("synthetic spec: needs at least 2 samples per id per domain");
  }
  if (spec.latent_dim < 1 || spec.tokens < 1 || spec.channels < 1) {
    throw std::invalid_argument("synthetic spec: dimensions must be positive");
  }
  if (spec.noise_sigma < 0.0 || spec.style_strength < 0.0) {
    throw std::invalid_argument("synthetic spec: noise and style magnitudes must be nonnegative");
  }
}

}  // namespace

SyntheticDataset generate_dataset(const SyntheticSpec& spec, int heldout_domain) {
  validate_spec(spec);
  if (heldout_domain < 0 || heldout_domain >= spec.num_domains) {
    throw std::invalid_argument("generate_dataset: heldout domain " +
                                std::to_string(heldout_domain) + " outside [0," +
                                std::to_string(spec.num_domains) + ")");
  }

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Identity prototypes in latent space.
  std::vector<std::vector<double>> prototypes(static_cast<size_t>(spec.num_ids));
  for (auto& proto : prototypes) {
    proto.resize(static_cast<size_t>(spec.latent_dim));
    for (auto& v : proto) v = gauss(rng);
  }

  // One fixed rendering map latent -> (L * d_in).
  const int64_t flat = spec.tokens * spec.channels;
  std::vector<double> render(static_cast<size_t>(flat * spec.latent_dim));
  const double render_scale = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
  for (auto& v : render) v = gauss(rng) * render_scale;

  // Per-domain channel style: multiplicative scale and additive shift.
  std::vector<std::vector<double>> dom_scale(static_cast<size_t>(spec.num_domains));
  std::vector<std::vector<double>> dom_shift(static_cast<size_t>(spec.num_domains));
  for (int dom = 0; dom < spec.num_domains; ++dom) {
    dom_scale[static_cast<size_t>(dom)].resize(static_cast<size_t>(spec.channels));
    dom_shift[static_cast<size_t>(dom)].resize(static_cast<size_t>(spec.channels));
    for (int64_t c = 0; c < spec.channels; ++c) {
      dom_scale[static_cast<size_t>(dom)][static_cast<size_t>(c)] =
          std::exp(spec.style_strength * gauss(rng));
      dom_shift[static_cast<size_t>(dom)][static_cast<size_t>(c)] =
          spec.style_strength * gauss(rng);
    }
  }

  SyntheticDataset ds;
  ds.spec = spec;
  ds.heldout_domain = heldout_domain;
  std::vector<double> latent(static_cast<size_t>(spec.latent_dim));
  for (int id = 0; id < spec.num_ids; ++id) {
    for (int dom = 0; dom < spec.num_domains; ++dom) {
      for (int s = 0; s < spec.samples_per_id_per_domain; ++s) {
        for (int64_t j = 0; j < spec.latent_dim; ++j) {
          latent[static_cast<size_t>(j)] =
              prototypes[static_cast<size_t>(id)][static_cast<size_t>(j)] +
              spec.noise_sigma * gauss(rng);
        }
        LabeledSample sample;
        sample.id_label = id;
        sample.domain_label = dom;
        sample.tokens = Tensor::zeros({spec.tokens, spec.channels});
        for (int64_t f = 0; f < flat; ++f) {
          double v = 0.0;
          for (int64_t j = 0; j < spec.latent_dim; ++j) {
            v += render[static_cast<size_t>(f * spec.latent_dim + j)] *
                 latent[static_cast<size_t>(j)];
          }
          const auto c = static_cast<size_t>(f % spec.channels);
          sample.tokens.values[static_cast<size_t>(f)] =
              v * dom_scale[static_cast<size_t>(dom)][c] + dom_shift[static_cast<size_t>(dom)][c];
        }
        const int index = static_cast<int>(ds.samples.size());
        ds.samples.push_back(std::move(sample));

        if (dom == heldout_domain) {
          ds.heldout_indices.push_back(index);
        } else if (spec.samples_per_id_per_domain >= 3 &&
                   s == spec.samples_per_id_per_domain - 1) {
          ds.heldin_test_indices.push_back(index);
        } else {
          ds.train_indices.push_back(index);
        }
      }
    }
  }
  return ds;
}

PkBatch pk_batch_sample(const SyntheticDataset& dataset, int ids_per_batch, int instances_per_id,
                        std::mt19937_64& rng) {
  if (ids_per_batch < 2 || instances_per_id < 2) {
    throw std::invalid_argument("pk_batch_sample: needs P >= 2 and K >= 2");
  }
  std::map<int, std::vector<int>> by_id;
  for (int idx : dataset.train_indices) {
    by_id[dataset.samples[static_cast<size_t>(idx)].id_label].push_back(idx);
  }
  std::vector<int> eligible;
  for (const auto& [id, indices] : by_id) {
    if (static_cast<int>(indices.size()) >= instances_per_id) eligible.push_back(id);
  }
  if (static_cast<int>(eligible.size()) < ids_per_batch) {
    throw std::invalid_argument("pk_batch_sample: only " + std::to_string(eligible.size()) +
                                " ids have " + std::to_string(instances_per_id) +
                                " training samples, need " + std::to_string(ids_per_batch));
  }
  std::shuffle(eligible.begin(), eligible.end(), rng);

  const auto& first = dataset.samples[static_cast<size_t>(dataset.train_indices[0])].tokens;
  const int64_t l = first.shape[0], d = first.shape[1];
  const int64_t n = static_cast<int64_t>(ids_per_batch) * instances_per_id;
  PkBatch batch;
  batch.tokens = Tensor::zeros({n, l, d});
  int64_t row = 0;
  for (int p = 0; p < ids_per_batch; ++p) {
    auto indices = by_id[eligible[static_cast<size_t>(p)]];
    std::shuffle(indices.begin(), indices.end(), rng);
    for (int k = 0; k < instances_per_id; ++k) {
      const auto& sample = dataset.samples[static_cast<size_t>(indices[static_cast<size_t>(k)])];
      std::copy(sample.tokens.values.begin(), sample.tokens.values.end(),
                batch.tokens.values.begin() + row * l * d);
      batch.labels.push_back(sample.id_label);
      ++row;
    }
  }
  return batch;
}

double average_precision_oracle(const std::vector<int>& ranked_relevance) {
  int relevant = 0;
  double ap = 0.0;
  for (size_t k = 0; k < ranked_relevance.size(); ++k) {
    if (ranked_relevance[k] != 0) {
      ++relevant;
      ap += static_cast<double>(relevant) / static_cast<double>(k + 1);
    }
  }
  if (relevant == 0) {
    throw std::invalid_argument("average_precision_oracle: no relevant entries");
  }
  return ap / static_cast<double>(relevant);
}

RetrievalMetrics evaluate_retrieval(const Tensor& query_feats, const std::vector<int>& query_ids,
                                    const std::vector<int>& query_domains,
                                    const Tensor& gallery_feats,
                                    const std::vector<int>& gallery_ids,
                                    const std::vector<int>& gallery_domains) {
  if (query_feats.rank() != 2 || gallery_feats.rank() != 2 ||
      query_feats.shape[1] != gallery_feats.shape[1]) {
    throw std::invalid_argument("evaluate_retrieval: feature shapes " +
                                shape_str(query_feats.shape) + " and " +
                                shape_str(gallery_feats.shape) + " are incompatible");
  }
  const int64_t nq = query_feats.shape[0], ng = gallery_feats.shape[0];
  const int64_t d = query_feats.shape[1];
  if (static_cast<int64_t>(query_ids.size()) != nq ||
      static_cast<int64_t>(query_domains.size()) != nq ||
      static_cast<int64_t>(gallery_ids.size()) != ng ||
      static_cast<int64_t>(gallery_domains.size()) != ng) {
    throw std::invalid_argument("evaluate_retrieval: label lists do not match feature counts");
  }

  auto normalized = [d](const Tensor& t) {
    std::vector<double> out = t.values;
    const int64_t n = t.shape[0];
    for (int64_t i = 0; i < n; ++i) {
      double norm = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        const double v = out[static_cast<size_t>(i * d + c)];
        norm += v * v;
      }
      norm = std::sqrt(norm);
      if (norm > 0.0) {
        for (int64_t c = 0; c < d; ++c) out[static_cast<size_t>(i * d + c)] /= norm;
      }
    }
    return out;
  };
  const std::vector<double> q = normalized(query_feats);
  const std::vector<double> g = normalized(gallery_feats);

  RetrievalMetrics metrics;
  int64_t rank1_hits = 0;
  for (int64_t i = 0; i < nq; ++i) {
    std::vector<std::pair<double, int64_t>> order;
    order.reserve(static_cast<size_t>(ng));
    for (int64_t j = 0; j < ng; ++j) {
      // Camera-analog exclusion: drop gallery items sharing both id and domain.
      if (gallery_ids[static_cast<size_t>(j)] == query_ids[static_cast<size_t>(i)] &&
          gallery_domains[static_cast<size_t>(j)] == query_domains[static_cast<size_t>(i)]) {
        continue;
      }
      double dist2 = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        const double diff =
            q[static_cast<size_t>(i * d + c)] - g[static_cast<size_t>(j * d + c)];
        dist2 += diff * diff;
      }
      order.emplace_back(dist2, j);
    }
    std::sort(order.begin(), order.end());

    int relevant_total = 0;
    double ap = 0.0;
    for (size_t k = 0; k < order.size(); ++k) {
      if (gallery_ids[static_cast<size_t>(order[k].second)] ==
          query_ids[static_cast<size_t>(i)]) {
        ++relevant_total;
        ap += static_cast<double>(relevant_total) / static_cast<double>(k + 1);
      }
    }
    if (relevant_total == 0) {
      throw std::runtime_error("evaluate_retrieval: query " + std::to_string(i) +
                               " has no relevant gallery item after exclusion");
    }
    metrics.per_query_ap.push_back(ap / static_cast<double>(relevant_total));
    if (!order.empty() && gallery_ids[static_cast<size_t>(order[0].second)] ==
                              query_ids[static_cast<size_t>(i)]) {
      ++rank1_hits;
    }
  }
  metrics.mAP = std::accumulate(metrics.per_query_ap.begin(), metrics.per_query_ap.end(), 0.0) /
                static_cast<double>(nq);
  metrics.rank1 = static_cast<double>(rank1_hits) / static_cast<double>(nq);
  return metrics;
}

void dump_dataset(const std::string& path, const SyntheticDataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("dump_dataset: cannot open " + path);
  std::ostringstream header;
  const SyntheticSpec& s = dataset.spec;
  header << "adp-dataset v1\n"
         << "num_ids " << s.num_ids << "\n"
         << "num_domains " << s.num_domains << "\n"
         << "samples_per_id_per_domain " << s.samples_per_id_per_domain << "\n"
         << "latent_dim " << s.latent_dim << "\n"
         << "tokens " << s.tokens << "\n"
         << "channels " << s.channels << "\n"
         << "noise_sigma " << s.noise_sigma << "\n"
         << "style_strength " << s.style_strength << "\n"
         << "seed " << s.seed << "\n"
         << "heldout_domain " << dataset.heldout_domain << "\n"
         << "records " << dataset.samples.size() << "\n"
         << "data\n";
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& sample : dataset.samples) {
    const int64_t labels[2] = {sample.id_label, sample.domain_label};
    out.write(reinterpret_cast<const char*>(labels), sizeof(labels));
    out.write(reinterpret_cast<const char*>(sample.tokens.values.data()),
              static_cast<std::streamsize>(sample.tokens.values.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("dump_dataset: write failed for " + path);
}

SyntheticDataset load_dataset_dump(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_dataset_dump: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "adp-dataset v1") {
    throw std::runtime_error("load_dataset_dump: " + path + " is not a dataset dump");
  }
  SyntheticSpec spec;
  int heldout = 0;
  size_t records = 0;
  while (std::getline(in, line) && line != "data") {
    std::istringstream fields(line);
    std::string key;
    fields >> key;
    if (key == "num_ids") fields >> spec.num_ids;
    else if (key == "num_domains") fields >> spec.num_domains;
    else if (key == "samples_per_id_per_domain") fields >> spec.samples_per_id_per_domain;
    else if (key == "latent_dim") fields >> spec.latent_dim;
    else if (key == "tokens") fields >> spec.tokens;
    else if (key == "channels") fields >> spec.channels;
    else if (key == "noise_sigma") fields >> spec.noise_sigma;
    else if (key == "style_strength") fields >> spec.style_strength;
    else if (key == "seed") fields >> spec.seed;
    else if (key == "heldout_domain") fields >> heldout;
    else if (key == "records") fields >> records;
    else throw std::runtime_error("load_dataset_dump: unknown header key '" + key + "'");
  }

  SyntheticDataset ds;
  ds.spec = spec;
  ds.heldout_domain = heldout;
  for (size_t r = 0; r < records; ++r) {
    int64_t labels[2];
    in.read(reinterpret_cast<char*>(labels), sizeof(labels));
    LabeledSample sample;
    sample.id_label = static_cast<int>(labels[0]);
    sample.domain_label = static_cast<int>(labels[1]);
    sample.tokens = Tensor::zeros({spec.tokens, spec.channels});
    in.read(reinterpret_cast<char*>(sample.tokens.values.data()),
            static_cast<std::streamsize>(sample.tokens.values.size() * sizeof(double)));
    if (!in) throw std::runtime_error("load_dataset_dump: truncated record in " + path);
    ds.samples.push_back(std::move(sample));
  }
  return ds;
}

}  // namespace adp

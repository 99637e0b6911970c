// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/attacks.hpp"
#include "c2r/synthetic.hpp"

#include <ostream>

namespace c2r {

struct CurriculumItem {
  std::int64_t sample_id = 0;
  Vector input;
  Vector delta;
  int label = 0;
  double margin_estimate = 0.0;
  double score = 0.0;
};

struct CurriculumBatch {
  std::vector<CurriculumItem> items;
  std::size_t position = 0;

  std::vector<int> labels() const {
    std::vector<int> out;
    for (const auto& it : items) out.push_back(it.label);
    return out;
  }
  std::vector<std::int64_t> ids() const {
    std::vector<std::int64_t> out;
    for (const auto& it : items) out.push_back(it.sample_id);
    return out;
  }
};

/// Scores a real batch with warm-started LS-PGD; the cache is updated in place.
inline std::vector<AdvCompanion> score_epoch(const Model& model, const LabeledBatch& batch, const ThreatSpec& threat,
                                             WarmStartCache& cache, GradientLedger* ledger = nullptr,
                                             LsPgdStats* stats = nullptr) {
  return ls_pgd(model, batch, threat, cache, ledger, stats);
}

/// Stable sort by descending score (ties by sample id), then chunked into
/// batches of at most batch_size. With sort_by_score = false the batch order
/// is kept as given.
inline std::vector<CurriculumBatch> order_by_score(const LabeledBatch& batch,
                                                   const std::vector<AdvCompanion>& companions,
                                                   std::size_t batch_size, bool sort_by_score = true) {
  require(batch_size >= 1, "order_by_score: batch_size must be >= 1");
  require(static_cast<Index>(companions.size()) == batch.size(), "order_by_score: companions misaligned");
  std::vector<std::size_t> order(companions.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  if (sort_by_score)
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      if (companions[a].score != companions[b].score) return companions[a].score > companions[b].score;
      return companions[a].sample_id < companions[b].sample_id;
    });
  std::vector<CurriculumBatch> out;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (k % batch_size == 0) out.push_back(CurriculumBatch{{}, out.size()});
    std::size_t i = order[k];
    require(companions[i].sample_id == batch.ids[i], "order_by_score: companion id does not match batch row");
    out.back().items.push_back(CurriculumItem{companions[i].sample_id, batch.inputs.row(static_cast<Index>(i)).transpose(),
                                              companions[i].delta, batch.labels[i], companions[i].margin_estimate,
                                              companions[i].score});
  }
  return out;
}

/// Per-label draws from the synthetic set: without replacement until a label's
/// pool is exhausted within the epoch, then with replacement.
class SyntheticSampler {
 public:
  SyntheticSampler(const SyntheticDataset& synthetic, std::uint64_t seed) : rng_(seed) {
    pools_.resize(static_cast<std::size_t>(synthetic.num_classes));
    for (std::size_t i = 0; i < synthetic.labels.size(); ++i)
      pools_[static_cast<std::size_t>(synthetic.labels[i])].push_back(i);
    reset_epoch();
  }

  void reset_epoch() {
    remaining_ = pools_;
    for (auto& r : remaining_) std::shuffle(r.begin(), r.end(), rng_);
  }

  std::size_t draw(int label) {
    if (label < 0 || static_cast<std::size_t>(label) >= pools_.size() || pools_[static_cast<std::size_t>(label)].empty())
      throw ConfigError("synthetic set has no image for label " + std::to_string(label));
    auto& rem = remaining_[static_cast<std::size_t>(label)];
    if (!rem.empty()) {
      std::size_t idx = rem.back();
      rem.pop_back();
      return idx;
    }
    const auto& pool = pools_[static_cast<std::size_t>(label)];
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    return pool[pick(rng_)];
  }

 private:
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> pools_;
  std::vector<std::vector<std::size_t>> remaining_;
};

struct SyntheticSelection {
  LabeledBatch batch;                // ids are synthetic row indices
  std::vector<std::size_t> indices;  // row of each element in the synthetic set
};

/// One same-label synthetic image per curriculum sample, in curriculum order.
inline SyntheticSelection match_synthetic_batch(const CurriculumBatch& cb, const SyntheticDataset& synthetic,
                                                SyntheticSampler& sampler) {
  SyntheticSelection sel;
  for (const auto& it : cb.items) sel.indices.push_back(sampler.draw(it.label));
  sel.batch.shape = synthetic.shape;
  sel.batch.inputs.resize(static_cast<Index>(sel.indices.size()), synthetic.images.cols());
  for (std::size_t k = 0; k < sel.indices.size(); ++k) {
    sel.batch.inputs.row(static_cast<Index>(k)) = synthetic.images.row(static_cast<Index>(sel.indices[k]));
    sel.batch.labels.push_back(synthetic.labels[sel.indices[k]]);
    sel.batch.ids.push_back(static_cast<std::int64_t>(sel.indices[k]));
  }
  return sel;
}

/// CSV rows: epoch,sample_id,margin_estimate,score,batch_index
inline void write_score_trace(std::ostream& os, std::size_t epoch, const std::vector<CurriculumBatch>& batches) {
  for (const auto& b : batches)
    for (const auto& it : b.items)
      os << epoch << ',' << it.sample_id << ',' << nlohmann::json(it.margin_estimate).dump() << ','
         << nlohmann::json(it.score).dump() << ',' << b.position << '\n';
}

}  // namespace c2r

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/contrastive.hpp"
#include "c2r/curriculum.hpp"
#include "c2r/data.hpp"

#include <chrono>
#include <sstream>

namespace c2r {

/// splitmix64 step; derives independent stream seeds from one run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct ModelSpec {
  std::string kind = "mlp";  // mlp | convnet3
  std::vector<Index> hidden{64, 64};
  Index channels = 8;

  std::unique_ptr<Model> build(SampleShape input, int num_classes, std::uint64_t seed) const {
    if (kind == "mlp") {
      std::vector<Index> widths{input.size()};
      widths.insert(widths.end(), hidden.begin(), hidden.end());
      return std::make_unique<Mlp>(widths, num_classes, seed);
    }
    if (kind == "convnet3") return std::make_unique<ConvNet3>(channels, num_classes, input, seed);
    throw ConfigError("model: unknown kind '" + kind + "'");
  }
};

struct DistillConfig {
  double eta = 0.4;
  double tau = 0.1;
  int ipc = 10;
  int iterations = 100;  // outer iterations I, one sampled real batch each
  std::size_t real_batch_size = 64;
  std::size_t curriculum_batch_size = 16;
  ThreatSpec threat = ThreatSpec::with_epsilon(2.0 / 255.0);
  std::size_t queue_capacity = 256;
  std::size_t hard_negatives = 16;
  Index proxy_dim = 32;
  double lr_model = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double lr_images = 0.01;
  std::uint64_t seed = 0;
  std::string init_mode = "real-sample";
  std::string robustness_loss = "crl";  // crl | rome
  ModelSpec model;
  int model_restart_every = 0;  // 0: theta is trained continuously
  int pretrain_epochs = 0;      // full-batch CE epochs of theta on the real train set before the loop

  bool curriculum = true;  // sort by perturbation score (off: sampled order)
  bool global_sort = false;
  bool symmetric_anchors = false;
  bool queue_only_negatives = false;
  bool enqueue_adversarial = false;
  bool mix_real_adversaries = false;

  void validate() const {
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("distill.eta must lie in [0, 1]");
    if (!(tau > 0.0)) throw ConfigError("distill.tau must be > 0");
    if (ipc < 1) throw ConfigError("distill.ipc must be >= 1");
    if (iterations < 0) throw ConfigError("distill.iterations must be >= 0");
    if (real_batch_size < 1) throw ConfigError("distill.real_batch_size must be >= 1");
    if (curriculum_batch_size < 1) throw ConfigError("distill.curriculum_batch_size must be >= 1");
    if (queue_capacity < 1 || hard_negatives < 1 || proxy_dim < 1)
      throw ConfigError("distill.queue: capacity, k and r must be >= 1");
    if (!(lr_model >= 0.0) || !(lr_images >= 0.0)) throw ConfigError("distill: learning rates must be >= 0");
    if (robustness_loss != "crl" && robustness_loss != "rome")
      throw ConfigError("distill.robustness_loss must be 'crl' or 'rome'");
    if (model_restart_every < 0) throw ConfigError("distill.model_restart_every must be >= 0");
    if (pretrain_epochs < 0) throw ConfigError("distill.pretrain_epochs must be >= 0");
    threat.validate();
  }
};

struct StepRecord {
  double perf = 0.0;
  double robust = 0.0;
  double total = 0.0;
  std::size_t anchors = 0;
  std::size_t max_candidates = 0;
};

struct EpochRecord {
  int epoch = 0;
  double perf = 0.0;  // means over the epoch's steps
  double robust = 0.0;
  double total = 0.0;
  std::size_t steps = 0;
  std::int64_t real_searched = 0;
  std::int64_t real_reused = 0;
  std::int64_t synthetic_searched = 0;
  std::int64_t synthetic_reused = 0;
  GradientLedger attack;
};

/// Mutable state of one distillation run.
struct DistillState {
  std::unique_ptr<Model> model;
  MomentumSgd optimizer{0.01, 0.9, 5e-4};
  SyntheticDataset synthetic;
  MemoryQueue queue;
  WarmStartCache real_cache;
  WarmStartCache synthetic_cache;
  SyntheticSampler sampler;
  std::mt19937_64 batch_rng;
  int epoch = 0;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

/// Full-batch CE training of theta on real data (teacher warm-up).
inline void pretrain_model(Model& model, const LabeledBatch& real, const DistillConfig& cfg) {
  MomentumSgd opt(cfg.lr_model, cfg.momentum, cfg.weight_decay);
  for (int e = 0; e < cfg.pretrain_epochs; ++e) {
    auto fwd = model.forward(real.inputs);
    auto ce = cross_entropy(fwd.logits, real.labels);
    opt.step(model.mutable_parameters(), model.backward(fwd, ce.grad, Matrix()).params);
  }
}

inline DistillState make_state(const DistillConfig& cfg, const Dataset& data) {
  cfg.validate();
  auto model = cfg.model.build(data.train.shape, data.num_classes, derive_seed(cfg.seed, 0));
  pretrain_model(*model, data.train, cfg);
  auto synthetic =
      init_synthetic(data.train, data.num_classes, data.range, cfg.ipc, cfg.init_mode, derive_seed(cfg.seed, 1));
  MemoryQueue queue(data.num_classes, model->embed_dim(), cfg.queue_capacity, cfg.proxy_dim, derive_seed(cfg.seed, 2));
  SyntheticSampler sampler(synthetic, derive_seed(cfg.seed, 3));
  return DistillState{std::move(model),
                      MomentumSgd(cfg.lr_model, cfg.momentum, cfg.weight_decay),
                      std::move(synthetic),
                      std::move(queue),
                      {},
                      {},
                      std::move(sampler),
                      std::mt19937_64(derive_seed(cfg.seed, 4)),
                      0,
                      {},
                      {}};
}

inline double combined_loss(double perf, double robust, double eta) {
  require(eta >= 0.0 && eta <= 1.0, "combined_loss: eta must lie in [0, 1]");
  return (1.0 - eta) * perf + eta * robust;
}

/// One joint update of theta and the synthetic images touched by the batch.
inline StepRecord distill_step(DistillState& st, const CurriculumBatch& cb, const DistillConfig& cfg,
                               GradientLedger* attack_ledger = nullptr, LsPgdStats* synth_stats = nullptr) {
  Model& model = *st.model;
  auto sel = match_synthetic_batch(cb, st.synthetic, st.sampler);
  const auto m = static_cast<Index>(sel.indices.size());
  const bool robust_on = cfg.eta > 0.0;

  auto clean = model.forward(sel.batch.inputs);
  auto perf = cross_entropy(clean.logits, sel.batch.labels);

  StepRecord rec;
  rec.perf = perf.value;
  Matrix dlogits = (1.0 - cfg.eta) * perf.grad;
  Matrix demb_clean = Matrix::Zero(m, model.embed_dim());
  Vector dparams = Vector::Zero(model.parameters().size());
  Matrix dimages = Matrix::Zero(m, sel.batch.inputs.cols());
  Matrix adv_embeddings;

  if (robust_on) {
    auto companions = ls_pgd(model, sel.batch, cfg.threat, st.synthetic_cache, attack_ledger, synth_stats);
    Matrix delta(m, sel.batch.inputs.cols());
    for (Index i = 0; i < m; ++i) delta.row(i) = companions[static_cast<std::size_t>(i)].delta.transpose();
    auto adv = model.forward(sel.batch.inputs + delta);
    adv_embeddings = adv.embeddings;
    Matrix demb_adv;

    if (cfg.robustness_loss == "rome") {
      auto [value, gc, ga] = rome_mean_match_loss(clean.embeddings, adv.embeddings, sel.batch.labels, sel.batch.labels);
      rec.robust = value;
      demb_clean = cfg.eta * gc;
      demb_adv = cfg.eta * ga;
    } else {
      // Extra labeled rows: real clean + adversarial embeddings (flag), gradient to theta only.
      std::vector<int> extra_labels;
      std::optional<ForwardResult> real_clean, real_adv;
      if (cfg.mix_real_adversaries) {
        Matrix rx(static_cast<Index>(cb.items.size()), sel.batch.inputs.cols());
        Matrix rd(rx.rows(), rx.cols());
        for (std::size_t k = 0; k < cb.items.size(); ++k) {
          rx.row(static_cast<Index>(k)) = cb.items[k].input.transpose();
          rd.row(static_cast<Index>(k)) = cb.items[k].delta.transpose();
        }
        real_clean = model.forward(rx);
        real_adv = model.forward(rx + rd);
        for (const auto& it : cb.items) extra_labels.push_back(it.label);
        for (const auto& it : cb.items) extra_labels.push_back(it.label);
      }

      std::vector<std::vector<std::size_t>> retrieved(static_cast<std::size_t>(m));
      std::vector<Vector> negatives;
      for (Index i = 0; i < m; ++i) {
        auto hits = st.queue.retrieve_hard_negatives(clean.embeddings.row(i).transpose(),
                                                     sel.batch.labels[static_cast<std::size_t>(i)], cfg.hard_negatives);
        for (auto& h : hits) {
          retrieved[static_cast<std::size_t>(i)].push_back(negatives.size());
          negatives.push_back(std::move(h.embedding));
        }
      }
      PairOptions opts{cfg.symmetric_anchors, cfg.queue_only_negatives};
      auto ps = build_pair_sets(sel.batch.labels, retrieved, negatives.size(), opts, extra_labels);

      Matrix bank(static_cast<Index>(ps.bank_rows()), model.embed_dim());
      bank.topRows(m) = clean.embeddings;
      bank.middleRows(m, m) = adv.embeddings;
      Index row = 2 * m;
      if (cfg.mix_real_adversaries) {
        bank.middleRows(row, real_clean->embeddings.rows()) = real_clean->embeddings;
        row += real_clean->embeddings.rows();
        bank.middleRows(row, real_adv->embeddings.rows()) = real_adv->embeddings;
        row += real_adv->embeddings.rows();
      }
      for (const auto& v : negatives) bank.row(row++) = v.transpose();

      auto [value, gbank] = crl_loss(bank, ps, cfg.tau);
      rec.robust = value;
      rec.anchors = ps.anchors.size();
      for (const auto& c : ps.candidates) rec.max_candidates = std::max(rec.max_candidates, c.size());
      demb_clean = cfg.eta * gbank.topRows(m);
      demb_adv = cfg.eta * gbank.middleRows(m, m);
      if (cfg.mix_real_adversaries) {
        const Index e = real_clean->embeddings.rows();
        dparams += model.backward(*real_clean, Matrix(), cfg.eta * gbank.middleRows(2 * m, e)).params;
        dparams += model.backward(*real_adv, Matrix(), cfg.eta * gbank.middleRows(2 * m + e, e)).params;
      }
    }
    // delta is held fixed, so d(x + delta)/dx = I.
    auto gadv = model.backward(adv, Matrix(), demb_adv);
    dparams += gadv.params;
    dimages += gadv.inputs;
  }

  rec.total = combined_loss(rec.perf, rec.robust, cfg.eta);
  if (!std::isfinite(rec.total)) {
    std::ostringstream os;
    os << "non-finite loss at epoch " << st.epoch << ", batch " << cb.position << ": perf=" << rec.perf
       << " robust=" << rec.robust << " eta=" << cfg.eta;
    throw NumericError(os.str());
  }

  auto gclean = model.backward(clean, dlogits, demb_clean);
  dparams += gclean.params;
  dimages += gclean.inputs;

  st.optimizer.step(model.mutable_parameters(), dparams);
  for (Index i = 0; i < m; ++i) {
    Index r = static_cast<Index>(sel.indices[static_cast<std::size_t>(i)]);
    st.synthetic.images.row(r) -= cfg.lr_images * dimages.row(i);
  }
  st.synthetic.images = clamp(st.synthetic.images, st.synthetic.range.lo, st.synthetic.range.hi);

  // Stored detached, from the pre-update forward pass.
  if (robust_on && cfg.robustness_loss == "crl") {
    for (Index i = 0; i < m; ++i) {
      st.queue.enqueue(sel.batch.labels[static_cast<std::size_t>(i)], clean.embeddings.row(i).transpose());
      if (cfg.enqueue_adversarial)
        st.queue.enqueue(sel.batch.labels[static_cast<std::size_t>(i)], adv_embeddings.row(i).transpose());
    }
  }
  return rec;
}

/// Scores the real batch, orders it into curriculum batches, and runs one
/// distill_step per curriculum batch.
inline EpochRecord distill_epoch(DistillState& st, const DistillConfig& cfg, const Dataset& data,
                                 std::ostream* trace = nullptr) {
  EpochRecord er;
  er.epoch = st.epoch;
  if (cfg.model_restart_every > 0 && st.epoch > 0 && st.epoch % cfg.model_restart_every == 0) {
    st.model = cfg.model.build(data.train.shape, data.num_classes,
                               derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(st.epoch)));
    pretrain_model(*st.model, data.train, cfg);
    st.optimizer.reset();
    st.synthetic_cache.clear();
  }
  LabeledBatch real = cfg.global_sort ? data.train : sample_batch(data.train, cfg.real_batch_size, st.batch_rng);
  LsPgdStats real_stats, synth_stats;
  auto companions = score_epoch(*st.model, real, cfg.threat, st.real_cache, &er.attack, &real_stats);
  auto batches = order_by_score(real, companions, cfg.curriculum_batch_size, cfg.curriculum);
  if (trace) write_score_trace(*trace, static_cast<std::size_t>(st.epoch), batches);
  st.sampler.reset_epoch();
  for (const auto& cb : batches) {
    auto rec = distill_step(st, cb, cfg, &er.attack, &synth_stats);
    st.steps.push_back(rec);
    er.perf += rec.perf;
    er.robust += rec.robust;
    er.total += rec.total;
    ++er.steps;
  }
  if (er.steps) {
    er.perf /= static_cast<double>(er.steps);
    er.robust /= static_cast<double>(er.steps);
    er.total /= static_cast<double>(er.steps);
  }
  er.real_searched = real_stats.searched;
  er.real_reused = real_stats.reused;
  er.synthetic_searched = synth_stats.searched;
  er.synthetic_reused = synth_stats.reused;
  st.epochs.push_back(er);
  ++st.epoch;
  return er;
}

struct DistillResult {
  SyntheticDataset synthetic;
  DistillState state;
  double seconds = 0.0;
};

inline DistillResult run_distillation(const DistillConfig& cfg, const Dataset& data, std::ostream* trace = nullptr) {
  auto t0 = std::chrono::steady_clock::now();
  DistillState st = make_state(cfg, data);
  for (int i = 0; i < cfg.iterations; ++i) distill_epoch(st, cfg, data, trace);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  SyntheticDataset out = st.synthetic;
  return DistillResult{std::move(out), std::move(st), secs};
}

/// Synthetic set + queue snapshot + provenance, in the container format.
inline Container make_checkpoint(const DistillState& st, const std::string& config_hash) {
  Container c;
  put_synthetic(c, st.synthetic);
  c.manifest["config_hash"] = config_hash;
  c.manifest["epoch"] = std::to_string(st.epoch);
  c.manifest["queue.capacity"] = std::to_string(st.queue.capacity());
  c.manifest["queue.seed"] = std::to_string(st.queue.seed());
  c.manifest["queue.next_id"] = std::to_string(st.queue.next_id());
  c.put("queue.projection", st.queue.projection());
  for (int k = 0; k < st.queue.num_classes(); ++k) {
    const auto& entries = st.queue.entries(k);
    Matrix emb(static_cast<Index>(entries.size()), st.queue.projection().cols());
    std::vector<std::int64_t> ages;
    for (std::size_t j = 0; j < entries.size(); ++j) {
      emb.row(static_cast<Index>(j)) = entries[j].embedding.transpose();
      ages.push_back(entries[j].id);
    }
    c.put("queue." + std::to_string(k) + ".embeddings", emb);
    c.put("queue." + std::to_string(k) + ".ids", ages);
  }
  return c;
}

/// Rebuilds the queue snapshot stored by make_checkpoint.
inline MemoryQueue load_queue(const Container& c, int num_classes) {
  Matrix proj = c.matrix("queue.projection");
  MemoryQueue q(num_classes, proj.cols(), std::stoull(c.meta("queue.capacity")), proj.rows(),
                std::stoull(c.meta("queue.seed")));
  for (int k = 0; k < num_classes; ++k) {
    Matrix emb = c.matrix("queue." + std::to_string(k) + ".embeddings");
    auto ids = c.ints("queue." + std::to_string(k) + ".ids");
    std::deque<MemoryQueue::Entry> entries;
    for (Index j = 0; j < emb.rows(); ++j) {
      Vector e = emb.row(j).transpose();
      entries.push_back({ids[static_cast<std::size_t>(j)], e, q.proxy(e)});
    }
    q.restore(k, std::move(entries), std::stoll(c.meta("queue.next_id")));
  }
  return q;
}

/// Key-value header followed by a per-epoch CSV block.
inline std::string render_manifest(const DistillConfig& cfg, const DistillState& st, const std::string& config_hash,
                                   double seconds) {
  std::ostringstream os;
  GradientLedger total;
  std::int64_t real_searched = 0, synth_searched = 0;
  for (const auto& e : st.epochs) {
    total += e.attack;
    real_searched += e.real_searched;
    synth_searched += e.synthetic_searched;
  }
  os << "config_hash=" << config_hash << "\n"
     << "seed=" << cfg.seed << "\n"
     << "model=" << st.model->architecture() << "\n"
     << "eta=" << cfg.eta << "\n"
     << "ipc=" << cfg.ipc << "\n"
     << "iterations=" << cfg.iterations << "\n"
     << "attack_backward_samples=" << total.backward_samples << "\n"
     << "attack_forward_samples=" << total.forward_samples << "\n"
     << "real_search_samples=" << real_searched << "\n"
     << "synthetic_search_samples=" << synth_searched << "\n"
     << "wall_seconds=" << seconds << "\n"
     << "[epochs]\n"
     << "epoch,steps,perf,robust,total,real_searched,real_reused,synthetic_searched,synthetic_reused,"
        "attack_backward,attack_forward\n";
  for (const auto& e : st.epochs)
    os << e.epoch << ',' << e.steps << ',' << nlohmann::json(e.perf).dump() << ','
       << nlohmann::json(e.robust).dump() << ',' << nlohmann::json(e.total).dump() << ',' << e.real_searched << ','
       << e.real_reused << ',' << e.synthetic_searched << ',' << e.synthetic_reused << ','
       << e.attack.backward_samples << ',' << e.attack.forward_samples << '\n';
  return os.str();
}

}  // namespace c2r

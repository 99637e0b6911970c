// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/margin.hpp"

#include <optional>

namespace c2r {

/// Clamp delta into [-eps, eps], then pull x + delta back into [lo, hi].
/// Coordinates already inside the range are left untouched, which makes the
/// projection exactly idempotent.
inline Matrix project_linf(const Matrix& delta, const Matrix& x, const ThreatSpec& threat) {
  require(delta.rows() == x.rows() && delta.cols() == x.cols(), "project_linf: shape mismatch");
  Matrix out = clamp(delta, -threat.epsilon, threat.epsilon);
  for (Index i = 0; i < out.size(); ++i) {
    double a = x.data()[i] + out.data()[i];
    if (a > threat.range.hi)
      out.data()[i] = threat.range.hi - x.data()[i];
    else if (a < threat.range.lo)
      out.data()[i] = threat.range.lo - x.data()[i];
  }
  return out;
}

namespace detail {

struct Probe {
  Matrix logits;
  Vector objective;  // per-sample value of the ascended objective
  Matrix grad;       // d objective / d input, per row
};

/// Objective ascended by an iterative sign attack; adds its backward rows to the ledger.
using Objective = std::function<Probe(const Model&, const Matrix&, std::span<const int>, GradientLedger&)>;

inline Probe ce_probe(const Model& model, const Matrix& x, std::span<const int> labels, GradientLedger& ledger) {
  auto fwd = model.forward(x);
  ledger.forward_samples += x.rows();
  Probe p;
  p.objective = per_sample_cross_entropy(fwd.logits, labels);
  p.grad = model.backward(fwd, cross_entropy_grad_sum(fwd.logits, labels), Matrix(), false).inputs;
  ledger.backward_samples += x.rows();
  p.logits = std::move(fwd.logits);
  return p;
}

inline std::vector<AdvCompanion> finalize(const Model& model, const LabeledBatch& batch, const Matrix& delta,
                                          GradientLedger& ledger) {
  Matrix z = model.logits(batch.inputs + delta);
  ledger.forward_samples += batch.size();
  Vector ce = per_sample_cross_entropy(z, batch.labels);
  std::vector<AdvCompanion> out(static_cast<std::size_t>(batch.size()));
  for (Index i = 0; i < batch.size(); ++i) {
    auto& c = out[static_cast<std::size_t>(i)];
    c.sample_id = batch.ids[static_cast<std::size_t>(i)];
    c.delta = delta.row(i).transpose();
    c.adv_loss = ce[i];
    c.margin_estimate = logit_margin(Eigen::RowVectorXd(z.row(i)), batch.labels[static_cast<std::size_t>(i)]);
    c.score = perturbation_score(c.margin_estimate);
  }
  return out;
}

inline Matrix initial_delta(const LabeledBatch& batch, const ThreatSpec& threat, const std::optional<Matrix>& init) {
  if (!init) return Matrix::Zero(batch.size(), batch.inputs.cols());
  require(init->rows() == batch.size() && init->cols() == batch.inputs.cols(), "attack: init_delta shape mismatch");
  return project_linf(*init, batch.inputs, threat);
}

inline Matrix sign_iterations(const Model& model, const LabeledBatch& batch, const ThreatSpec& threat,
                              Matrix delta, const Objective& objective, GradientLedger& ledger) {
  for (int t = 0; t < threat.steps; ++t) {
    auto p = objective(model, batch.inputs + delta, batch.labels, ledger);
    delta = project_linf(delta + threat.alpha * sign(p.grad), batch.inputs, threat);
  }
  return delta;
}

}  // namespace detail

inline std::vector<AdvCompanion> fgsm(const Model& model, const LabeledBatch& batch, const ThreatSpec& threat,
                                      GradientLedger* ledger = nullptr) {
  GradientLedger local;
  auto& led = ledger ? *ledger : local;
  auto p = detail::ce_probe(model, batch.inputs, batch.labels, led);
  Matrix delta = project_linf(threat.epsilon * sign(p.grad), batch.inputs, threat);
  return detail::finalize(model, batch, delta, led);
}

/// T steps of delta <- proj(delta + alpha * sign(grad CE)); T backward passes per sample.
inline std::vector<AdvCompanion> pgd(const Model& model, const LabeledBatch& batch, const ThreatSpec& threat,
                                     const std::optional<Matrix>& init_delta = std::nullopt,
                                     GradientLedger* ledger = nullptr) {
  GradientLedger local;
  auto& led = ledger ? *ledger : local;
  Matrix delta = detail::initial_delta(batch, threat, init_delta);
  delta = detail::sign_iterations(model, batch, threat, std::move(delta), detail::ce_probe, led);
  return detail::finalize(model, batch, delta, led);
}

/// Per-sample warm start: last perturbation and the loss it achieved.
class WarmStartCache {
 public:
  struct Entry {
    Vector delta;
    double last_loss = -std::numeric_limits<double>::infinity();
  };

  const Entry* find(std::int64_t id) const {
    auto it = entries_.find(id);
    return it == entries_.end() ? nullptr : &it->second;
  }

  void store(std::int64_t id, Vector delta, double loss) { entries_[id] = Entry{std::move(delta), loss}; }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  const std::unordered_map<std::int64_t, Entry>& entries() const { return entries_; }

 private:
  std::unordered_map<std::int64_t, Entry> entries_;
};

struct LsPgdStats {
  std::int64_t reused = 0;
  std::int64_t searched = 0;
};

/// Warm-started line-search PGD.
///
/// Per sample: evaluate the loss at the cached perturbation. A cached entry whose
/// loss has not decreased is reused as-is. Otherwise take one gradient sign
/// direction v and keep the best of proj(delta + alpha * beta^q * v), q < Z, by
/// forward passes only. Missing cache entries always take the search branch.
/// At most one backward pass per sample per call.
inline std::vector<AdvCompanion> ls_pgd(const Model& model, const LabeledBatch& batch, const ThreatSpec& threat,
                                        WarmStartCache& cache, GradientLedger* ledger = nullptr,
                                        LsPgdStats* stats = nullptr) {
  GradientLedger local;
  auto& led = ledger ? *ledger : local;
  const Index m = batch.size();
  const Index d = batch.inputs.cols();

  // Stored deltas are re-projected: the sample itself may have moved since (synthetic images do).
  Matrix warm = Matrix::Zero(m, d);
  std::vector<const WarmStartCache::Entry*> hits(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) {
    hits[static_cast<std::size_t>(i)] = cache.find(batch.ids[static_cast<std::size_t>(i)]);
    if (auto* e = hits[static_cast<std::size_t>(i)]) {
      require(e->delta.size() == d, "ls_pgd: cached delta has wrong size");
      warm.row(i) = e->delta.transpose();
    }
  }
  warm = project_linf(warm, batch.inputs, threat);

  auto fwd = model.forward(batch.inputs + warm);
  led.forward_samples += m;
  Vector current = per_sample_cross_entropy(fwd.logits, batch.labels);

  std::vector<std::size_t> search;
  for (Index i = 0; i < m; ++i) {
    auto* e = hits[static_cast<std::size_t>(i)];
    if (!e || current[i] < e->last_loss) search.push_back(static_cast<std::size_t>(i));
  }

  Matrix delta = warm;
  Matrix logits = fwd.logits;
  Vector loss = current;

  if (!search.empty()) {
    const auto s = static_cast<Index>(search.size());
    LabeledBatch sub = batch.take(search);
    Matrix warm_sub(s, d);
    for (Index r = 0; r < s; ++r) warm_sub.row(r) = warm.row(static_cast<Index>(search[static_cast<std::size_t>(r)]));

    Matrix grad;
    if (s == m) {
      grad = model.backward(fwd, cross_entropy_grad_sum(fwd.logits, batch.labels), Matrix(), false).inputs;
      led.backward_samples += m;
    } else {
      grad = detail::ce_probe(model, sub.inputs + warm_sub, sub.labels, led).grad;
    }
    Matrix direction = sign(grad);

    Vector best_loss = Vector::Constant(s, -std::numeric_limits<double>::infinity());
    Matrix best_delta(s, d), best_logits(s, model.num_classes());
    double step = threat.alpha;
    for (int q = 0; q < threat.shortlist_len; ++q, step *= threat.shortlist_beta) {
      Matrix cand = project_linf(warm_sub + step * direction, sub.inputs, threat);
      Matrix z = model.logits(sub.inputs + cand);
      led.forward_samples += s;
      Vector l = per_sample_cross_entropy(z, sub.labels);
      for (Index r = 0; r < s; ++r) {
        if (l[r] > best_loss[r]) {
          best_loss[r] = l[r];
          best_delta.row(r) = cand.row(r);
          best_logits.row(r) = z.row(r);
        }
      }
    }
    for (Index r = 0; r < s; ++r) {
      Index i = static_cast<Index>(search[static_cast<std::size_t>(r)]);
      delta.row(i) = best_delta.row(r);
      logits.row(i) = best_logits.row(r);
      loss[i] = best_loss[r];
    }
  }

  if (stats) {
    stats->searched += static_cast<std::int64_t>(search.size());
    stats->reused += m - static_cast<std::int64_t>(search.size());
  }

  std::vector<AdvCompanion> out(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) {
    auto& c = out[static_cast<std::size_t>(i)];
    c.sample_id = batch.ids[static_cast<std::size_t>(i)];
    c.delta = delta.row(i).transpose();
    c.adv_loss = loss[i];
    c.margin_estimate = logit_margin(Eigen::RowVectorXd(logits.row(i)), batch.labels[static_cast<std::size_t>(i)]);
    c.score = perturbation_score(c.margin_estimate);
    cache.store(c.sample_id, c.delta, c.adv_loss);
  }
  return out;
}

/// m <- decay * m + g / ||g||_1, row by row. Zero-gradient rows add nothing.
inline void accumulate_momentum(Matrix& momentum, const Matrix& grad, double decay) {
  for (Index i = 0; i < grad.rows(); ++i) {
    double l1 = grad.row(i).lpNorm<1>();
    momentum.row(i) *= decay;
    if (l1 > 0.0) momentum.row(i) += grad.row(i) / l1;
  }
}

/// Momentum iterative FGSM with step alpha for T steps.
inline std::vector<AdvCompanion> mim(const Model& model, const LabeledBatch& batch, const ThreatSpec& threat,
                                     double decay = 1.0, GradientLedger* ledger = nullptr) {
  require(decay >= 0.0, "mim: decay must be >= 0");
  GradientLedger local;
  auto& led = ledger ? *ledger : local;
  Matrix delta = Matrix::Zero(batch.size(), batch.inputs.cols());
  Matrix momentum = Matrix::Zero(batch.size(), batch.inputs.cols());
  for (int t = 0; t < threat.steps; ++t) {
    auto p = detail::ce_probe(model, batch.inputs + delta, batch.labels, led);
    accumulate_momentum(momentum, p.grad, decay);
    delta = project_linf(delta + threat.alpha * sign(momentum), batch.inputs, threat);
  }
  return detail::finalize(model, batch, delta, led);
}

/// l_inf margin variant of CW: ascend -max(g(x + delta), -kappa). Once the
/// margin falls below -kappa the surrogate is flat and the sample stops moving.
inline std::vector<AdvCompanion> cw_linf(const Model& model, const LabeledBatch& batch, const ThreatSpec& threat,
                                         double kappa = 0.0, GradientLedger* ledger = nullptr) {
  require(kappa >= 0.0, "cw_linf: kappa must be >= 0");
  GradientLedger local;
  auto& led = ledger ? *ledger : local;
  auto objective = [kappa](const Model& mdl, const Matrix& x, std::span<const int> labels, GradientLedger& l) {
    auto fwd = mdl.forward(x);
    l.forward_samples += x.rows();
    detail::Probe p;
    p.objective.resize(x.rows());
    Matrix dlogits = Matrix::Zero(x.rows(), mdl.num_classes());
    for (Index i = 0; i < x.rows(); ++i) {
      int y = labels[static_cast<std::size_t>(i)];
      Index rival = -1;
      for (Index k = 0; k < fwd.logits.cols(); ++k)
        if (k != y && (rival < 0 || fwd.logits(i, k) > fwd.logits(i, rival))) rival = k;
      double g = fwd.logits(i, y) - fwd.logits(i, rival);
      p.objective[i] = -std::max(g, -kappa);
      if (g > -kappa) {
        dlogits(i, y) = -1.0;
        dlogits(i, rival) = 1.0;
      }
    }
    p.grad = mdl.backward(fwd, dlogits, Matrix(), false).inputs;
    l.backward_samples += x.rows();
    p.logits = std::move(fwd.logits);
    return p;
  };
  Matrix delta = detail::sign_iterations(model, batch, threat, Matrix::Zero(batch.size(), batch.inputs.cols()),
                                         objective, led);
  return detail::finalize(model, batch, delta, led);
}

/// Variance-tuned momentum iterative FGSM. Each step's gradient is corrected by
/// the previous step's variance term: mean neighbor gradient minus the center
/// gradient, neighbors drawn uniformly in +-neighborhood_scale * epsilon.
inline std::vector<AdvCompanion> vmi_fgsm(const Model& model, const LabeledBatch& batch, const ThreatSpec& threat,
                                          int neighbors = 5, double neighborhood_scale = 1.5, double decay = 1.0,
                                          std::uint64_t seed = 0, GradientLedger* ledger = nullptr) {
  require(neighbors >= 1, "vmi_fgsm: neighbors must be >= 1");
  GradientLedger local;
  auto& led = ledger ? *ledger : local;
  std::mt19937_64 rng(seed);
  const double radius = neighborhood_scale * threat.epsilon;
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  Matrix delta = Matrix::Zero(batch.size(), batch.inputs.cols());
  Matrix momentum = Matrix::Zero(batch.size(), batch.inputs.cols());
  Matrix variance = Matrix::Zero(batch.size(), batch.inputs.cols());
  for (int t = 0; t < threat.steps; ++t) {
    Matrix x = batch.inputs + delta;
    auto p = detail::ce_probe(model, x, batch.labels, led);
    accumulate_momentum(momentum, p.grad + variance, decay);
    Matrix neighbor_sum = Matrix::Zero(x.rows(), x.cols());
    for (int n = 0; n < neighbors; ++n) {
      Matrix noise = Matrix::NullaryExpr(x.rows(), x.cols(), [&] { return radius * unif(rng); });
      neighbor_sum += detail::ce_probe(model, x + noise, batch.labels, led).grad;
    }
    variance = neighbor_sum / static_cast<double>(neighbors) - p.grad;
    delta = project_linf(delta + threat.alpha * sign(momentum), batch.inputs, threat);
  }
  return detail::finalize(model, batch, delta, led);
}

/// PGD on CE of jittered logits: optionally rescaled to scale * z / ||z||_inf,
/// then perturbed by N(0, noise_std^2) noise drawn fresh every step.
inline std::vector<AdvCompanion> jitter(const Model& model, const LabeledBatch& batch, const ThreatSpec& threat,
                                        double noise_std = 0.05, bool rescale = true, double scale = 10.0,
                                        std::uint64_t seed = 0, GradientLedger* ledger = nullptr) {
  require(noise_std >= 0.0, "jitter: noise_std must be >= 0");
  GradientLedger local;
  auto& led = ledger ? *ledger : local;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto objective = [&](const Model& mdl, const Matrix& x, std::span<const int> labels, GradientLedger& l) {
    auto fwd = mdl.forward(x);
    l.forward_samples += x.rows();
    const Index k = fwd.logits.cols();
    Matrix zhat = fwd.logits;
    std::vector<double> norms(static_cast<std::size_t>(x.rows()), 0.0);
    std::vector<Index> peaks(static_cast<std::size_t>(x.rows()), 0);
    if (rescale) {
      for (Index i = 0; i < x.rows(); ++i) {
        double n = fwd.logits.row(i).cwiseAbs().maxCoeff(&peaks[static_cast<std::size_t>(i)]);
        norms[static_cast<std::size_t>(i)] = n;
        if (n > 0.0) zhat.row(i) *= scale / n;
      }
    }
    if (noise_std > 0.0) zhat += Matrix::NullaryExpr(x.rows(), k, [&] { return noise_std * gauss(rng); });
    detail::Probe p;
    p.objective = per_sample_cross_entropy(zhat, labels);
    Matrix dzhat = cross_entropy_grad_sum(zhat, labels);
    Matrix dz = dzhat;
    if (rescale) {
      for (Index i = 0; i < x.rows(); ++i) {
        double n = norms[static_cast<std::size_t>(i)];
        if (n <= 0.0) continue;
        Index j = peaks[static_cast<std::size_t>(i)];
        double coupling = dzhat.row(i).dot(fwd.logits.row(i));
        dz.row(i) = dzhat.row(i) * (scale / n);
        dz(i, j) -= scale * sign(fwd.logits(i, j)) * coupling / (n * n);
      }
    }
    p.grad = mdl.backward(fwd, dz, Matrix(), false).inputs;
    l.backward_samples += x.rows();
    p.logits = std::move(fwd.logits);
    return p;
  };
  Matrix delta = detail::sign_iterations(model, batch, threat, Matrix::Zero(batch.size(), batch.inputs.cols()),
                                         objective, led);
  return detail::finalize(model, batch, delta, led);
}

/// Named evaluation attack with its knobs.
struct AttackSpec {
  std::string name;  // fgsm | pgd | mim | cw | vmi-fgsm | jitter | ls-pgd
  ThreatSpec threat;
  double decay = 1.0;
  double kappa = 0.0;
  int neighbors = 5;
  double neighborhood_scale = 1.5;
  double noise_std = 0.05;
  bool rescale = true;
  double jitter_scale = 10.0;
  std::uint64_t seed = 0;

  static bool known(const std::string& n) {
    return n == "fgsm" || n == "pgd" || n == "mim" || n == "cw" || n == "vmi-fgsm" || n == "jitter" ||
           n == "ls-pgd";
  }
};

inline std::vector<AdvCompanion> run_attack(const AttackSpec& spec, const Model& model, const LabeledBatch& batch,
                                            GradientLedger* ledger = nullptr) {
  const auto& t = spec.threat;
  if (spec.name == "fgsm") return fgsm(model, batch, t, ledger);
  if (spec.name == "pgd") return pgd(model, batch, t, std::nullopt, ledger);
  if (spec.name == "mim") return mim(model, batch, t, spec.decay, ledger);
  if (spec.name == "cw") return cw_linf(model, batch, t, spec.kappa, ledger);
  if (spec.name == "vmi-fgsm")
    return vmi_fgsm(model, batch, t, spec.neighbors, spec.neighborhood_scale, spec.decay, spec.seed, ledger);
  if (spec.name == "jitter")
    return jitter(model, batch, t, spec.noise_std, spec.rescale, spec.jitter_scale, spec.seed, ledger);
  if (spec.name == "ls-pgd") {
    WarmStartCache cache;
    return ls_pgd(model, batch, t, cache, ledger);
  }
  throw ConfigError("unknown attack '" + spec.name + "'");
}

inline Attacker make_attacker(const AttackSpec& spec) {
  return [spec](const Model& m, const LabeledBatch& b) { return run_attack(spec, m, b); };
}

}  // namespace c2r

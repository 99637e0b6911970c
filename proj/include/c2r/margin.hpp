// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/model.hpp"

#include <functional>
#include <limits>
#include <unordered_map>

namespace c2r {

/// l_inf threat model: ball of radius epsilon intersected with the input range.
struct ThreatSpec {
  double epsilon = 2.0 / 255.0;
  double alpha = 0.5 / 255.0;  // default epsilon / 4
  int steps = 10;
  InputRange range{};
  double shortlist_beta = 2.0;
  int shortlist_len = 3;

  /// Defaults alpha = epsilon / 4, T = 10, beta = 2, Z = 3. The empty ball keeps the default alpha.
  static ThreatSpec with_epsilon(double eps, InputRange range = {}) {
    ThreatSpec t;
    t.epsilon = eps;
    if (eps > 0.0) t.alpha = eps / 4.0;
    t.range = range;
    return t;
  }

  void validate() const {
    // epsilon == 0 is accepted: it is the empty-ball baseline used in evaluation.
    if (!(epsilon >= 0.0) || epsilon > range.width())
      throw ConfigError("threat: epsilon must satisfy 0 <= epsilon <= hi - lo");
    if (!(alpha > 0.0)) throw ConfigError("threat: alpha must be > 0");
    if (steps < 1) throw ConfigError("threat: steps must be >= 1");
    if (!(shortlist_beta > 1.0)) throw ConfigError("threat: shortlist beta must be > 1");
    if (shortlist_len < 1 || shortlist_len > 8) throw ConfigError("threat: shortlist length must be in [1, 8]");
    if (!(range.hi > range.lo)) throw ConfigError("threat: empty input range");
  }
};

/// A sample's adversarial perturbation and what the attack measured there.
struct AdvCompanion {
  std::int64_t sample_id = 0;
  Vector delta;
  double adv_loss = 0.0;  // cross-entropy at x + delta
  double margin_estimate = 0.0;
  double score = 0.0;
};

/// g(x) = f_y(x) - max_{k != y} f_k(x).
inline double logit_margin(std::span<const double> logits, int label) {
  require(logits.size() >= 2, "logit_margin: need at least two classes");
  require(label >= 0 && static_cast<std::size_t>(label) < logits.size(), "logit_margin: label out of range");
  double other = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < logits.size(); ++k)
    if (static_cast<int>(k) != label) other = std::max(other, logits[k]);
  return logits[static_cast<std::size_t>(label)] - other;
}

inline double logit_margin(const Eigen::RowVectorXd& logits, int label) {
  return logit_margin(std::span<const double>(logits.data(), static_cast<std::size_t>(logits.size())), label);
}

/// [1 - m]_+ with the unit threshold.
inline double robust_hinge(double margin) { return std::max(0.0, 1.0 - margin); }

/// Robust hinge evaluated at the attack-estimated margin.
inline double perturbation_score(double margin_estimate) { return robust_hinge(margin_estimate); }

/// argmax of the hinge values, lowest index on ties.
inline std::size_t worst_case_index(std::span<const double> hinges) {
  require(!hinges.empty(), "worst_case_index: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < hinges.size(); ++i)
    if (hinges[i] > hinges[best]) best = i;
  return best;
}

struct MarginRecord {
  std::int64_t sample_id = 0;
  double clean_margin = 0.0;
  double margin_estimate = 0.0;
  double hinge = 0.0;
  double score = 0.0;
};

using Attacker = std::function<std::vector<AdvCompanion>(const Model&, const LabeledBatch&)>;

/// Runs the attacker on one sample and records m-hat = g at the returned point.
inline MarginRecord estimate_robust_margin(const Model& model, const Vector& sample, int label,
                                           const Attacker& attack, std::int64_t sample_id = 0) {
  LabeledBatch b;
  b.inputs = sample.transpose();
  b.labels = {label};
  b.ids = {sample_id};
  b.shape = {1, 1, sample.size()};
  auto companions = attack(model, b);
  require(companions.size() == 1, "estimate_robust_margin: attacker returned wrong count");
  MarginRecord r;
  r.sample_id = sample_id;
  r.clean_margin = logit_margin(Eigen::RowVectorXd(model.logits(b.inputs).row(0)), label);
  Matrix adv = b.inputs + companions[0].delta.transpose();
  r.margin_estimate = logit_margin(Eigen::RowVectorXd(model.logits(adv).row(0)), label);
  r.hinge = robust_hinge(r.margin_estimate);
  r.score = perturbation_score(r.margin_estimate);
  return r;
}

}  // namespace c2r

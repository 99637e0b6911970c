// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/core.hpp"

#include <deque>
#include <functional>
#include <iostream>
#include <map>
#include <random>

namespace c2r {

/// Sink for degenerate-input warnings (zero embeddings, empty classes).
inline std::function<void(const std::string&)>& trace_warning() {
  static std::function<void(const std::string&)> sink = [](const std::string&) {};
  return sink;
}

/// u.v / (|u||v|); a zero vector yields 0.
inline double cosine_similarity(const Vector& u, const Vector& v) {
  require(u.size() == v.size(), "cosine_similarity: size mismatch");
  double nu = u.norm(), nv = v.norm();
  if (nu == 0.0 || nv == 0.0) {
    trace_warning()("cosine_similarity: zero-norm embedding");
    return 0.0;
  }
  return u.dot(v) / (nu * nv);
}

/// d cos(u, v) / du. Zero when either vector is zero.
inline Vector cosine_grad_u(const Vector& u, const Vector& v) {
  double nu = u.norm(), nv = v.norm();
  if (nu == 0.0 || nv == 0.0) return Vector::Zero(u.size());
  double c = u.dot(v) / (nu * nv);
  return v / (nu * nv) - c * u / (nu * nu);
}

/// Per-class FIFO of detached embeddings with random-projection proxies.
class MemoryQueue {
 public:
  struct Entry {
    std::int64_t id = 0;  // enqueue counter, global across classes
    Vector embedding;
    Vector proxy;
  };

  struct Retrieved {
    int cls = 0;
    std::int64_t id = 0;
    double similarity = 0.0;
    Vector embedding;
  };

  MemoryQueue(int num_classes, Index embed_dim, std::size_t capacity, Index proxy_dim, std::uint64_t seed)
      : capacity_(capacity), queues_(static_cast<std::size_t>(num_classes)), seed_(seed) {
    if (num_classes < 1 || embed_dim < 1 || capacity < 1 || proxy_dim < 1)
      throw ConfigError("memory queue: classes, dims and capacity must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    projection_ = Matrix::NullaryExpr(proxy_dim, embed_dim, [&] { return gauss(rng); }) /
                  std::sqrt(static_cast<double>(proxy_dim));
  }

  int num_classes() const { return static_cast<int>(queues_.size()); }
  std::size_t capacity() const { return capacity_; }
  const Matrix& projection() const { return projection_; }
  std::uint64_t seed() const { return seed_; }
  std::int64_t next_id() const { return next_id_; }

  const std::deque<Entry>& entries(int cls) const { return queues_.at(static_cast<std::size_t>(cls)); }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& q : queues_) n += q.size();
    return n;
  }

  Vector proxy(const Vector& embedding) const {
    require(embedding.size() == projection_.cols(), "memory queue: embedding dimension mismatch");
    return projection_ * embedding;
  }

  void enqueue(int cls, const Vector& embedding) {
    require(cls >= 0 && cls < num_classes(), "memory queue: class " + std::to_string(cls) + " out of range");
    auto& q = queues_[static_cast<std::size_t>(cls)];
    q.push_back(Entry{next_id_++, embedding, proxy(embedding)});
    while (q.size() > capacity_) q.pop_front();
  }

  /// Top-k entries from classes other than anchor_class, ranked by proxy
  /// cosine similarity (ties: lower class, then older entry). Full embeddings
  /// are returned; proxies are only used for ranking.
  std::vector<Retrieved> retrieve_hard_negatives(const Vector& anchor, int anchor_class, std::size_t k) const {
    require(k >= 1, "retrieve_hard_negatives: k must be >= 1");
    Vector probe = proxy(anchor);
    std::vector<Retrieved> all;
    for (int c = 0; c < num_classes(); ++c) {
      if (c == anchor_class) continue;
      for (const auto& e : queues_[static_cast<std::size_t>(c)])
        all.push_back(Retrieved{c, e.id, cosine_similarity(probe, e.proxy), Vector()});
    }
    auto better = [](const Retrieved& a, const Retrieved& b) {
      if (a.similarity != b.similarity) return a.similarity > b.similarity;
      if (a.cls != b.cls) return a.cls < b.cls;
      return a.id < b.id;
    };
    std::size_t keep = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), better);
    all.resize(keep);
    for (auto& r : all) {
      for (const auto& e : queues_[static_cast<std::size_t>(r.cls)])
        if (e.id == r.id) {
          r.embedding = e.embedding;
          break;
        }
    }
    return all;
  }

  /// Restores queue contents (used when reloading a checkpoint).
  void restore(int cls, std::deque<Entry> entries, std::int64_t next_id) {
    require(cls >= 0 && cls < num_classes(), "memory queue: class out of range");
    require(entries.size() <= capacity_, "memory queue: snapshot exceeds capacity");
    queues_[static_cast<std::size_t>(cls)] = std::move(entries);
    next_id_ = std::max(next_id_, next_id);
  }

 private:
  std::size_t capacity_;
  std::vector<std::deque<Entry>> queues_;
  Matrix projection_;
  std::uint64_t seed_;
  std::int64_t next_id_ = 0;
};

/// Index space for contrastive pairs. Rows of the embedding bank are laid out as
///   [0, M)            clean in-batch samples
///   [M, 2M)           their adversarial counterparts
///   [2M, 2M+E)        extra labeled entries (e.g. real samples), optional
///   [2M+E, ...)       retrieved queue negatives (constants)
struct PairSets {
  std::vector<std::size_t> anchors;
  std::vector<std::vector<std::size_t>> positives;
  std::vector<std::vector<std::size_t>> candidates;
  std::size_t batch = 0;
  std::size_t extras = 0;
  std::size_t retrieved = 0;

  std::size_t bank_rows() const { return 2 * batch + extras + retrieved; }
};

struct PairOptions {
  bool symmetric_anchors = false;     // adversarial rows also act as anchors
  bool queue_only_negatives = false;  // drop in-batch different-class entries from A(i)
};

/// P(i) = {adv_i} + {clean_j, adv_j : y_j = y_i, j != i};
/// A(i) = P(i) + {clean_k, adv_k : y_k != y_i} + retrieved(i).
/// retrieved[i] lists bank offsets (relative to the retrieved block) for anchor i.
inline PairSets build_pair_sets(std::span<const int> labels, const std::vector<std::vector<std::size_t>>& retrieved,
                                std::size_t retrieved_total, const PairOptions& opts = {},
                                std::span<const int> extra_labels = {}) {
  const std::size_t m = labels.size();
  require(retrieved.empty() || retrieved.size() == m, "build_pair_sets: retrieved lists misaligned with batch");
  PairSets ps;
  ps.batch = m;
  ps.extras = extra_labels.size();
  ps.retrieved = retrieved_total;
  const std::size_t extra_base = 2 * m;
  const std::size_t queue_base = 2 * m + ps.extras;

  auto add_anchor = [&](std::size_t anchor, std::size_t i) {
    std::vector<std::size_t> pos, cand;
    std::size_t partner = anchor < m ? m + i : i;
    pos.push_back(partner);
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i || labels[j] != labels[i]) continue;
      pos.push_back(j);
      pos.push_back(m + j);
    }
    for (std::size_t e = 0; e < ps.extras; ++e)
      if (extra_labels[e] == labels[i]) pos.push_back(extra_base + e);
    cand = pos;
    if (!opts.queue_only_negatives) {
      for (std::size_t k = 0; k < m; ++k) {
        if (labels[k] == labels[i]) continue;
        cand.push_back(k);
        cand.push_back(m + k);
      }
      for (std::size_t e = 0; e < ps.extras; ++e)
        if (extra_labels[e] != labels[i]) cand.push_back(extra_base + e);
    }
    if (!retrieved.empty())
      for (auto r : retrieved[i]) {
        require(r < retrieved_total, "build_pair_sets: retrieved offset out of range");
        cand.push_back(queue_base + r);
      }
    ps.anchors.push_back(anchor);
    ps.positives.push_back(std::move(pos));
    ps.candidates.push_back(std::move(cand));
  };

  for (std::size_t i = 0; i < m; ++i) add_anchor(i, i);
  if (opts.symmetric_anchors)
    for (std::size_t i = 0; i < m; ++i) add_anchor(m + i, i);
  return ps;
}

/// Supervised contrastive loss over cosine similarities:
///   (1/|anchors|) sum_i -(1/|P(i)|) sum_{a in P(i)} log softmax_{b in A(i)}(g_ib / tau)[a]
/// Returns the value and its gradient w.r.t. every bank row.
inline std::pair<double, Matrix> crl_loss(const Matrix& bank, const PairSets& ps, double tau) {
  require(tau > 0.0, "crl_loss: tau must be > 0");
  require(static_cast<std::size_t>(bank.rows()) == ps.bank_rows(), "crl_loss: bank rows do not match pair sets");
  require(!ps.anchors.empty(), "crl_loss: no anchors");
  Matrix grad = Matrix::Zero(bank.rows(), bank.cols());
  double total = 0.0;
  const double scale = 1.0 / static_cast<double>(ps.anchors.size());
  for (std::size_t n = 0; n < ps.anchors.size(); ++n) {
    const auto& pos = ps.positives[n];
    const auto& cand = ps.candidates[n];
    require(!pos.empty(), "crl_loss: empty positive set for anchor " + std::to_string(n));
    const Index anchor = static_cast<Index>(ps.anchors[n]);
    Vector u = bank.row(anchor).transpose();

    Vector sims(static_cast<Index>(cand.size()));
    for (std::size_t c = 0; c < cand.size(); ++c)
      sims[static_cast<Index>(c)] = cosine_similarity(u, bank.row(static_cast<Index>(cand[c])).transpose());
    Vector logits = sims / tau;
    double mx = logits.maxCoeff();
    double lse = mx + std::log((logits.array() - mx).exp().sum());
    Vector prob = (logits.array() - lse).exp();

    // Position of each candidate row, to credit positives.
    std::map<std::size_t, double> weight;  // d loss / d logit per candidate row
    for (std::size_t c = 0; c < cand.size(); ++c) weight[cand[c]] += prob[static_cast<Index>(c)];
    const double inv_p = 1.0 / static_cast<double>(pos.size());
    double anchor_loss = 0.0;
    for (auto a : pos) {
      double s = cosine_similarity(u, bank.row(static_cast<Index>(a)).transpose()) / tau;
      anchor_loss -= inv_p * (s - lse);
      weight[a] -= inv_p;
    }
    total += scale * anchor_loss;

    for (const auto& [row, w] : weight) {
      if (w == 0.0) continue;
      Vector v = bank.row(static_cast<Index>(row)).transpose();
      double coef = scale * w / tau;
      grad.row(anchor) += coef * cosine_grad_u(u, v).transpose();
      grad.row(static_cast<Index>(row)) += coef * cosine_grad_u(v, u).transpose();
    }
  }
  return {total, grad};
}

/// Sum over classes of |mean clean embedding - mean adversarial embedding|^2,
/// with gradients for both sides. Classes missing either side are skipped.
inline std::tuple<double, Matrix, Matrix> rome_mean_match_loss(const Matrix& clean, const Matrix& adv,
                                                              std::span<const int> clean_labels,
                                                              std::span<const int> adv_labels) {
  require(clean.cols() == adv.cols(), "rome_mean_match_loss: embedding widths differ");
  require(static_cast<Index>(clean_labels.size()) == clean.rows() &&
              static_cast<Index>(adv_labels.size()) == adv.rows(),
          "rome_mean_match_loss: labels misaligned");
  std::map<int, std::pair<std::vector<Index>, std::vector<Index>>> groups;
  for (Index i = 0; i < clean.rows(); ++i) groups[clean_labels[static_cast<std::size_t>(i)]].first.push_back(i);
  for (Index i = 0; i < adv.rows(); ++i) groups[adv_labels[static_cast<std::size_t>(i)]].second.push_back(i);
  Matrix gc = Matrix::Zero(clean.rows(), clean.cols());
  Matrix ga = Matrix::Zero(adv.rows(), adv.cols());
  double total = 0.0;
  for (const auto& [cls, idx] : groups) {
    if (idx.first.empty() || idx.second.empty()) {
      trace_warning()("rome_mean_match_loss: class " + std::to_string(cls) + " lacks clean or adversarial rows");
      continue;
    }
    Eigen::RowVectorXd mc = Eigen::RowVectorXd::Zero(clean.cols()), ma = mc;
    for (auto i : idx.first) mc += clean.row(i);
    for (auto i : idx.second) ma += adv.row(i);
    mc /= static_cast<double>(idx.first.size());
    ma /= static_cast<double>(idx.second.size());
    Eigen::RowVectorXd diff = mc - ma;
    total += diff.squaredNorm();
    for (auto i : idx.first) gc.row(i) += 2.0 * diff / static_cast<double>(idx.first.size());
    for (auto i : idx.second) ga.row(i) -= 2.0 * diff / static_cast<double>(idx.second.size());
  }
  return {total, gc, ga};
}

}  // namespace c2r

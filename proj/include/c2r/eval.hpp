// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/distill.hpp"

#include <optional>

namespace c2r {

/// (clean - robust) / clean * 100. Undefined (nullopt) when clean accuracy is 0.
inline std::optional<double> drop_rate(double clean_percent, double robust_percent) {
  if (!(clean_percent > 0.0)) return std::nullopt;
  return (clean_percent - robust_percent) / clean_percent * 100.0;
}

struct StudentConfig {
  ModelSpec model;
  int epochs = 300;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 0;  // 0: full batch
};

/// Fresh seeded model trained with CE + momentum SGD on the synthetic set only.
inline std::unique_ptr<Model> train_student(const SyntheticDataset& synthetic, const StudentConfig& cfg,
                                            std::uint64_t seed) {
  require(synthetic.size() > 0, "train_student: empty synthetic set");
  auto model = cfg.model.build(synthetic.shape, synthetic.num_classes, derive_seed(seed, 100));
  MomentumSgd opt(cfg.lr, cfg.momentum, cfg.weight_decay);
  std::mt19937_64 rng(derive_seed(seed, 101));
  std::vector<std::size_t> order(static_cast<std::size_t>(synthetic.size()));
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t bs = cfg.batch_size == 0 ? order.size() : cfg.batch_size;
  LabeledBatch all = synthetic.as_batch();
  for (int e = 0; e < cfg.epochs; ++e) {
    if (bs < order.size()) std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::span<const std::size_t> rows(order.data() + start, std::min(bs, order.size() - start));
      LabeledBatch b = bs < order.size() ? all.take(rows) : all;
      auto fwd = model->forward(b.inputs);
      auto ce = cross_entropy(fwd.logits, b.labels);
      if (!std::isfinite(ce.value)) throw NumericError("train_student: non-finite loss at epoch " + std::to_string(e));
      opt.step(model->mutable_parameters(), model->backward(fwd, ce.grad, Matrix()).params);
    }
  }
  return model;
}

inline double accuracy_percent(const std::vector<int>& predicted, std::span<const int> labels) {
  require(predicted.size() == labels.size(), "accuracy: size mismatch");
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return 100.0 * static_cast<double>(hit) / static_cast<double>(labels.size());
}

struct AttackResult {
  std::string name;
  double epsilon = 0.0;
  double robust_accuracy = 0.0;
  std::optional<double> drop_rate;
  double seconds = 0.0;
};

struct EvalReport {
  double clean_accuracy = 0.0;
  std::vector<AttackResult> attacks;
  std::string student_hash;
  std::uint64_t seed = 0;

  static constexpr const char* kCsvHeader = "attack,epsilon,clean_accuracy,robust_accuracy,drop_rate";

  /// One row per attack x epsilon. A missing drop rate is written as "NA".
  std::string to_csv() const {
    std::ostringstream os;
    os << kCsvHeader << "\n";
    for (const auto& a : attacks)
      os << a.name << ',' << nlohmann::json(a.epsilon).dump() << ',' << nlohmann::json(clean_accuracy).dump() << ','
         << nlohmann::json(a.robust_accuracy).dump() << ','
         << (a.drop_rate ? nlohmann::json(*a.drop_rate).dump() : std::string("NA")) << '\n';
    return os.str();
  }

  nlohmann::json summary() const {
    nlohmann::json j;
    j["clean_accuracy"] = clean_accuracy;
    j["student_hash"] = student_hash;
    j["seed"] = seed;
    j["attacks"] = nlohmann::json::array();
    for (const auto& a : attacks)
      j["attacks"].push_back({{"name", a.name},
                              {"epsilon", a.epsilon},
                              {"robust_accuracy", a.robust_accuracy},
                              {"drop_rate", a.drop_rate ? nlohmann::json(*a.drop_rate) : nlohmann::json()}});
    return j;
  }
};

/// Clean accuracy plus robust accuracy per attack: a sample counts as robust
/// iff the prediction at the attack's returned point is its label.
inline EvalReport evaluate(const Model& model, const LabeledBatch& test, const std::vector<AttackSpec>& attacks,
                           std::size_t chunk = 256) {
  for (const auto& a : attacks)
    if (!AttackSpec::known(a.name)) throw ConfigError("unknown attack '" + a.name + "'");
  EvalReport rep;
  rep.clean_accuracy = accuracy_percent(predict(model, test.inputs), test.labels);
  rep.student_hash = hex64(fnv1a(std::string_view(reinterpret_cast<const char*>(model.parameters().data()),
                                                  static_cast<std::size_t>(model.parameters().size()) * 8)));
  for (const auto& spec : attacks) {
    auto t0 = std::chrono::steady_clock::now();
    std::size_t robust = 0;
    for (Index start = 0; start < test.size(); start += static_cast<Index>(chunk)) {
      Index n = std::min<Index>(static_cast<Index>(chunk), test.size() - start);
      std::vector<std::size_t> rows(static_cast<std::size_t>(n));
      std::iota(rows.begin(), rows.end(), static_cast<std::size_t>(start));
      LabeledBatch part = test.take(rows);
      auto adv = run_attack(spec, model, part);
      Matrix x = part.inputs;
      for (Index i = 0; i < n; ++i) x.row(i) += adv[static_cast<std::size_t>(i)].delta.transpose();
      auto pred = predict(model, x);
      for (Index i = 0; i < n; ++i) robust += pred[static_cast<std::size_t>(i)] == part.labels[static_cast<std::size_t>(i)];
    }
    AttackResult r;
    r.name = spec.name;
    r.epsilon = spec.threat.epsilon;
    r.robust_accuracy = test.size() ? 100.0 * static_cast<double>(robust) / static_cast<double>(test.size()) : 0.0;
    r.drop_rate = drop_rate(rep.clean_accuracy, r.robust_accuracy);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.attacks.push_back(r);
  }
  return rep;
}

}  // namespace c2r

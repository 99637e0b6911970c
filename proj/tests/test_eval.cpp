// SPDX-License-Identifier: Apache-2.0
#include "c2r/config.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace c2r;
using namespace c2r::testing;

TEST(DropRate, Formula) {
  EXPECT_EQ(*drop_rate(60.0, 24.0), 60.0);
  EXPECT_NEAR(*drop_rate(48.31, 29.12), 39.72, 0.01);
  EXPECT_EQ(*drop_rate(50.0, 50.0), 0.0);
  EXPECT_FALSE(drop_rate(0.0, 0.0).has_value());
}

TEST(DropRate, AntitoneInRobustAccuracy) {
  for (double r = 0.0; r < 70.0; r += 0.5) EXPECT_GT(*drop_rate(70.0, r), *drop_rate(70.0, r + 0.5));
}

namespace {

Dataset toy(std::uint64_t seed = 0) {
  DatasetDescriptor d;
  d.samples_per_class = 60;
  d.seed = seed;
  return generate(d);
}

SyntheticDataset as_synthetic(const LabeledBatch& b, int k) {
  SyntheticDataset s;
  s.images = b.inputs;
  s.labels = b.labels;
  s.num_classes = k;
  s.shape = b.shape;
  s.ipc = static_cast<int>(b.size() / k);
  return s;
}

}  // namespace

TEST(Student, ZeroEpochsReturnsInitialModel) {
  auto ds = toy();
  StudentConfig cfg;
  cfg.epochs = 0;
  auto s = train_student(as_synthetic(ds.train, 3), cfg, 5);
  auto fresh = cfg.model.build(ds.train.shape, 3, derive_seed(5, 100));
  EXPECT_EQ(s->parameters(), fresh->parameters());
}

TEST(Student, SameSeedSameStudent) {
  auto ds = toy();
  StudentConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 16;
  auto a = train_student(as_synthetic(ds.train, 3), cfg, 3);
  auto b = train_student(as_synthetic(ds.train, 3), cfg, 3);
  EXPECT_EQ(a->parameters(), b->parameters());
}

TEST(Student, FitsLinearlySeparableData) {
  LabeledBatch b;
  b.shape = {1, 1, 2};
  b.inputs.resize(6, 2);
  b.inputs << 0.1, 0.1, 0.2, 0.15, 0.9, 0.1, 0.85, 0.2, 0.5, 0.9, 0.45, 0.8;
  b.labels = {0, 0, 1, 1, 2, 2};
  StudentConfig cfg;
  cfg.epochs = 300;
  auto s = train_student(as_synthetic(b, 3), cfg, 1);
  EXPECT_EQ(accuracy_percent(predict(*s, b.inputs), b.labels), 100.0);
}

TEST(Evaluate, EmptyBallGivesZeroDropRate) {
  auto ds = toy();
  StudentConfig cfg;
  cfg.epochs = 50;
  auto s = train_student(as_synthetic(ds.train, 3), cfg, 1);
  auto rep = evaluate(*s, ds.test, default_attacks(0.0, ds.range));
  for (const auto& a : rep.attacks) {
    EXPECT_EQ(a.robust_accuracy, rep.clean_accuracy) << a.name;
    EXPECT_EQ(*a.drop_rate, 0.0) << a.name;
  }
}

TEST(Evaluate, ConstantModelScoresMajorityShare) {
  auto model = linear_model(Matrix::Zero(3, 2), Eigen::RowVector3d(0.0, 1.0, 0.0));
  LabeledBatch b = make_batch(Matrix::Constant(10, 2, 0.5), {1, 1, 1, 1, 0, 0, 2, 2, 2, 0});
  auto rep = evaluate(*model, b, {{"pgd", ThreatSpec::with_epsilon(0.1)}});
  EXPECT_DOUBLE_EQ(rep.clean_accuracy, 40.0);
  EXPECT_DOUBLE_EQ(rep.attacks[0].robust_accuracy, 40.0);
}

TEST(Evaluate, FgsmAccuracyNonIncreasingInEpsilon) {
  auto ds = toy(2);
  StudentConfig cfg;
  cfg.epochs = 100;
  auto s = train_student(as_synthetic(ds.train, 3), cfg, 2);
  double prev = 101.0;
  for (double k : {1.0, 2.0, 4.0, 8.0}) {
    auto rep = evaluate(*s, ds.test, {{"fgsm", ThreatSpec::with_epsilon(k / 255.0)}});
    EXPECT_LE(rep.attacks[0].robust_accuracy, prev + 0.5) << "eps " << k << "/255";
    prev = rep.attacks[0].robust_accuracy;
  }
}

TEST(Evaluate, RobustSamplesAreCorrectAtAttackedPoint) {
  auto ds = toy(3);
  StudentConfig cfg;
  cfg.epochs = 60;
  auto s = train_student(as_synthetic(ds.train, 3), cfg, 3);
  AttackSpec pgd_spec{"pgd", ThreatSpec::with_epsilon(0.05)};
  auto rep = evaluate(*s, ds.test, {pgd_spec}, 17);
  auto adv = run_attack(pgd_spec, *s, ds.test);
  Matrix x = ds.test.inputs;
  for (Index i = 0; i < x.rows(); ++i) x.row(i) += adv[static_cast<std::size_t>(i)].delta.transpose();
  EXPECT_DOUBLE_EQ(rep.attacks[0].robust_accuracy, accuracy_percent(predict(*s, x), ds.test.labels));
}

TEST(Evaluate, ReportIsInternallyConsistent) {
  auto ds = toy(4);
  StudentConfig cfg;
  cfg.epochs = 40;
  auto s = train_student(as_synthetic(ds.train, 3), cfg, 4);
  auto rep = evaluate(*s, ds.test, default_attacks(0.05, ds.range));
  std::istringstream csv(rep.to_csv());
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, EvalReport::kCsvHeader);
  int rows = 0;
  while (std::getline(csv, line)) {
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) f.push_back(c);
    ASSERT_EQ(f.size(), 5u);
    double clean = std::stod(f[2]), robust = std::stod(f[3]), dr = std::stod(f[4]);
    EXPECT_GE(robust, 0.0);
    EXPECT_LE(robust, 100.0);
    EXPECT_NEAR(dr, *drop_rate(clean, robust), 1e-6);
    ++rows;
  }
  EXPECT_EQ(rows, 6);
  EXPECT_EQ(rep.summary().dump(), evaluate(*s, ds.test, default_attacks(0.05, ds.range)).summary().dump());
}

TEST(Evaluate, MissingDropRateIsWrittenAsNa) {
  auto model = linear_model(Matrix::Zero(2, 2), Eigen::RowVector2d(1.0, 0.0));
  LabeledBatch b = make_batch(Matrix::Constant(3, 2, 0.5), {1, 1, 1});
  auto rep = evaluate(*model, b, {{"fgsm", ThreatSpec::with_epsilon(0.1)}});
  EXPECT_EQ(rep.clean_accuracy, 0.0);
  EXPECT_NE(rep.to_csv().find(",NA\n"), std::string::npos);
  EXPECT_TRUE(rep.summary()["attacks"][0]["drop_rate"].is_null());
}

TEST(Evaluate, UnknownAttackIsConfigError) {
  auto model = linear_model(Matrix::Zero(2, 2), Eigen::RowVector2d(1.0, 0.0));
  LabeledBatch b = make_batch(Matrix::Constant(3, 2, 0.5), {1, 1, 1});
  EXPECT_THROW(evaluate(*model, b, {{"square", ThreatSpec::with_epsilon(0.1)}}), ConfigError);
}

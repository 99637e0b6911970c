// SPDX-License-Identifier: Apache-2.0
#include "c2r/curriculum.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <set>
#include <sstream>

using namespace c2r;
using namespace c2r::testing;

namespace {

std::vector<AdvCompanion> companions_with_scores(const LabeledBatch& b, const std::vector<double>& scores) {
  std::vector<AdvCompanion> out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    AdvCompanion c;
    c.sample_id = b.ids[i];
    c.delta = Vector::Zero(b.inputs.cols());
    c.score = scores[i];
    c.margin_estimate = 1.0 - scores[i];
    out.push_back(c);
  }
  return out;
}

}  // namespace

TEST(Curriculum, OrderMatchesIndependentSort) {
  std::mt19937_64 rng(1);
  for (int n = 0; n < 500; ++n) {
    const Index m = 1 + n % 23;
    auto batch = make_batch(random_matrix(m, 2, rng), random_labels(m, 3, rng));
    std::vector<double> scores;
    std::uniform_int_distribution<int> coarse(0, 4);
    for (Index i = 0; i < m; ++i) scores.push_back(n % 2 ? coarse(rng) * 0.5 : std::uniform_real_distribution<double>(0, 3)(rng));
    auto comps = companions_with_scores(batch, scores);
    const std::size_t bs = 1 + n % 5;
    auto batches = order_by_score(batch, comps, bs);

    std::vector<std::pair<double, std::int64_t>> expect;
    for (Index i = 0; i < m; ++i) expect.push_back({perturbation_score(comps[static_cast<std::size_t>(i)].margin_estimate), batch.ids[static_cast<std::size_t>(i)]});
    std::sort(expect.begin(), expect.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });

    std::vector<std::pair<double, std::int64_t>> got;
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < batches.size(); ++k) {
      ASSERT_EQ(batches[k].position, k);
      ASSERT_LE(batches[k].items.size(), bs);
      for (const auto& it : batches[k].items) {
        ASSERT_LE(it.score, prev);
        prev = it.score;
        got.push_back({it.score, it.sample_id});
      }
    }
    ASSERT_EQ(got.size(), expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      ASSERT_NEAR(got[i].first, expect[i].first, 1e-12);
      ASSERT_EQ(got[i].second, expect[i].second);
    }
  }
}

TEST(Curriculum, UnsortedModeKeepsBatchOrder) {
  auto batch = make_batch(Matrix::Zero(5, 2), {0, 1, 2, 0, 1});
  auto comps = companions_with_scores(batch, {0.1, 0.9, 0.5, 0.7, 0.3});
  auto batches = order_by_score(batch, comps, 2, false);
  std::vector<std::int64_t> ids;
  for (const auto& b : batches)
    for (auto id : b.ids()) ids.push_back(id);
  EXPECT_EQ(ids, (std::vector<std::int64_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(batches.size(), 3u);
}

TEST(Curriculum, ScoresComeFromAttackMargins) {
  std::mt19937_64 rng(2);
  Mlp model({2, 8}, 3, 3);
  auto batch = make_batch(random_matrix(10, 2, rng), random_labels(10, 3, rng));
  WarmStartCache cache;
  auto comps = score_epoch(model, batch, ThreatSpec::with_epsilon(0.05), cache);
  for (std::size_t i = 0; i < comps.size(); ++i) {
    Matrix adv = batch.inputs.row(static_cast<Index>(i)) + comps[i].delta.transpose();
    double m = logit_margin(Eigen::RowVectorXd(model.logits(adv).row(0)), batch.labels[i]);
    EXPECT_NEAR(comps[i].margin_estimate, m, 1e-12);
    EXPECT_DOUBLE_EQ(comps[i].score, robust_hinge(m));
  }
}

TEST(Curriculum, RejectsMisalignedCompanions) {
  auto batch = make_batch(Matrix::Zero(3, 2), {0, 1, 2});
  auto comps = companions_with_scores(batch, {0.1, 0.2});
  EXPECT_THROW(order_by_score(batch, comps, 2), ContractError);
  auto ok = companions_with_scores(batch, {0.1, 0.2, 0.3});
  EXPECT_THROW(order_by_score(batch, ok, 0), ContractError);
}

TEST(Sampler, DrawsWithoutReplacementThenWithReplacement) {
  auto real = make_batch(Matrix::Random(30, 2).cwiseAbs(), std::vector<int>(30, 0));
  for (int i = 0; i < 30; ++i) real.labels[static_cast<std::size_t>(i)] = i % 2;
  auto syn = init_synthetic(real, 2, {0.0, 1.0}, 3, "real-sample", 5);
  SyntheticSampler s(syn, 9);
  std::set<std::size_t> first;
  for (int i = 0; i < 3; ++i) first.insert(s.draw(1));
  EXPECT_EQ(first, (std::set<std::size_t>{3, 4, 5}));
  for (int i = 0; i < 10; ++i) {
    auto idx = s.draw(1);
    EXPECT_EQ(syn.labels[idx], 1);
  }
  s.reset_epoch();
  std::set<std::size_t> again;
  for (int i = 0; i < 3; ++i) again.insert(s.draw(0));
  EXPECT_EQ(again, (std::set<std::size_t>{0, 1, 2}));
  EXPECT_THROW(s.draw(2), ConfigError);
}

TEST(Sampler, MatchedBatchHasCurriculumLabels) {
  std::mt19937_64 rng(3);
  auto real = make_batch(random_matrix(40, 2, rng), random_labels(40, 4, rng));
  for (int c = 0; c < 4; ++c) real.labels[static_cast<std::size_t>(c)] = c;
  for (int c = 0; c < 4; ++c) real.labels[static_cast<std::size_t>(4 + c)] = c;
  auto syn = init_synthetic(real, 4, {0.0, 1.0}, 2, "real-sample", 1);
  SyntheticSampler sampler(syn, 2);
  auto comps = companions_with_scores(real, std::vector<double>(40, 0.5));
  auto batches = order_by_score(real, comps, 8);
  for (const auto& cb : batches) {
    auto sel = match_synthetic_batch(cb, syn, sampler);
    EXPECT_EQ(sel.batch.labels, cb.labels());
    for (std::size_t k = 0; k < sel.indices.size(); ++k)
      EXPECT_EQ(Eigen::RowVectorXd(sel.batch.inputs.row(static_cast<Index>(k))),
                Eigen::RowVectorXd(syn.images.row(static_cast<Index>(sel.indices[k]))));
  }
}

TEST(Curriculum, TraceHasOneRowPerItem) {
  auto batch = make_batch(Matrix::Zero(3, 2), {0, 1, 2});
  auto batches = order_by_score(batch, companions_with_scores(batch, {0.25, 1.5, 0.0}), 2);
  std::ostringstream os;
  write_score_trace(os, 4, batches);
  EXPECT_EQ(os.str(), "4,1,-0.5,1.5,0\n4,0,0.75,0.25,0\n4,2,1.0,0.0,1\n");
}

// SPDX-License-Identifier: Apache-2.0
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace c2r;
using namespace c2r::testing;

namespace {

// Scalar probe mixing logits and embeddings so both backward paths are exercised.
struct Probe {
  Matrix wl, we;
  double operator()(const Model& m, const Matrix& x) const {
    auto f = m.forward(x);
    return (f.logits.array() * wl.array()).sum() + (f.embeddings.array() * we.array()).sum();
  }
};

void check_gradients(Model& model, Index rows, std::mt19937_64& rng, int instances) {
  for (int n = 0; n < instances; ++n) {
    Matrix x = random_matrix(rows, model.input_dim(), rng);
    Probe p{random_matrix(rows, model.num_classes(), rng, -1, 1), random_matrix(rows, model.embed_dim(), rng, -1, 1)};
    auto fwd = model.forward(x);
    auto g = model.backward(fwd, p.wl, p.we);

    Vector flat = Eigen::Map<const Vector>(x.data(), x.size());
    auto fx = [&](const Vector& v) { return p(model, Eigen::Map<const Matrix>(v.data(), rows, model.input_dim())); };
    Vector gx = Eigen::Map<const Vector>(g.inputs.data(), g.inputs.size());
    EXPECT_LT(grad_rel_err(gx, central_diff(fx, flat)), 1e-4) << model.architecture() << " input, instance " << n;

    Vector theta = model.parameters();
    auto fp = [&](const Vector& v) {
      model.mutable_parameters() = v;
      double r = p(model, x);
      model.mutable_parameters() = theta;
      return r;
    };
    EXPECT_LT(grad_rel_err(g.params, central_diff(fp, theta)), 1e-4) << model.architecture() << " params, instance " << n;
  }
}

}  // namespace

TEST(Model, MlpGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(11);
  Mlp m({5, 7, 6}, 3, 4);
  check_gradients(m, 3, rng, 20);
}

TEST(Model, ConvNetGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(12);
  ConvNet3 m(2, 3, {2, 16, 16}, 5);
  check_gradients(m, 2, rng, 20);
}

TEST(Model, CrossEntropyInputGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  Mlp m({4, 8}, 3, 2);
  for (int n = 0; n < 20; ++n) {
    Matrix x = random_matrix(1, 4, rng);
    std::vector<int> y{static_cast<int>(n % 3)};
    auto fwd = m.forward(x);
    Vector g = m.backward(fwd, cross_entropy(fwd.logits, y).grad, Matrix(), false).inputs.row(0).transpose();
    auto f = [&](const Vector& v) { return cross_entropy(m.logits(v.transpose()), y).value; };
    EXPECT_LT(grad_rel_err(g, central_diff(f, x.row(0).transpose())), 1e-4);
  }
}

TEST(Model, ForwardIsDeterministicAndSeeded) {
  Mlp a({3, 8}, 4, 99), b({3, 8}, 4, 99), c({3, 8}, 4, 100);
  Matrix x = Matrix::Constant(2, 3, 0.3);
  EXPECT_EQ(a.parameters(), b.parameters());
  EXPECT_NE(a.parameters(), c.parameters());
  EXPECT_EQ(a.logits(x), a.logits(x));
  EXPECT_EQ(a.logits(x), b.logits(x));
}

TEST(Model, CrossEntropyScalarExamples) {
  // Ten equal logits: ln 10.
  Matrix z = Matrix::Zero(1, 10);
  std::vector<int> y{3};
  EXPECT_NEAR(cross_entropy(z, y).value, std::log(10.0), 1e-12);
  EXPECT_NEAR(cross_entropy(z, y).value, ce_oracle(std::vector<double>(10, 0.0), 3), 1e-12);
  Matrix z2(1, 2);
  z2 << 2.0, 0.0;
  std::vector<int> y2{0};
  EXPECT_NEAR(cross_entropy(z2, y2).value, std::log1p(std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(cross_entropy(z2, y2).value, 0.126928, 1e-6);
}

TEST(Model, CrossEntropyIsShiftInvariantAndStable) {
  Matrix z(2, 3);
  z << 1.0, -2.0, 0.5, 800.0, 799.0, 790.0;
  std::vector<int> y{2, 0};
  Matrix shifted = z.array() + 1234.5;
  EXPECT_NEAR(cross_entropy(z, y).value, cross_entropy(shifted, y).value, 1e-9);
  EXPECT_TRUE(std::isfinite(cross_entropy(z, y).value));
  EXPECT_NEAR(per_sample_cross_entropy(z, y)[1], ce_oracle({0.0, -1.0, -10.0}, 0), 1e-12);
}

TEST(Model, ZeroHeadGivesUniformLogits) {
  Mlp m({3, 5}, 4, 1);
  m.view(m.block("head.weight")).setZero();
  m.view(m.block("head.bias")).setZero();
  Matrix z = m.logits(Matrix::Random(3, 3));
  EXPECT_TRUE((z.array() == 0.0).all());
  std::vector<int> y{0, 1, 2};
  EXPECT_NEAR(cross_entropy(z, y).value, std::log(4.0), 1e-12);
}

TEST(Model, InvalidArchitecturesAreConfigErrors) {
  EXPECT_THROW(Mlp({}, 3, 0), ConfigError);
  EXPECT_THROW(Mlp({2, 0}, 3, 0), ConfigError);
  EXPECT_THROW(Mlp({2}, 1, 0), ConfigError);
  EXPECT_THROW(ConvNet3(4, 3, {3, 12, 12}, 0), ConfigError);
  EXPECT_THROW(ConvNet3(4, 3, {3, 4, 4}, 0), ConfigError);
  EXPECT_THROW(build_from_architecture("resnet", 0), ConfigError);
  Mlp m({2, 4}, 3, 0);
  EXPECT_THROW(m.forward(Matrix::Zero(1, 3)), ContractError);
}

TEST(Model, ArchitectureStringRebuildsModel) {
  ConvNet3 c(4, 5, {3, 16, 8}, 2);
  auto r = build_from_architecture(c.architecture(), 2);
  EXPECT_EQ(r->architecture(), c.architecture());
  EXPECT_EQ(r->parameters(), c.parameters());
  Mlp m({2, 8, 8}, 3, 9);
  EXPECT_EQ(build_from_architecture(m.architecture(), 9)->parameters(), m.parameters());
}

TEST(Model, CheckpointRoundTripIsBitExact) {
  auto dir = std::filesystem::temp_directory_path() / "c2r_test_model";
  std::filesystem::create_directories(dir);
  ConvNet3 a(3, 3, {1, 8, 8}, 21);
  a.mutable_parameters() *= 1.0 / 3.0;
  a.save(dir / "m.c2r");
  ConvNet3 b(3, 3, {1, 8, 8}, 22);
  b.load(dir / "m.c2r");
  EXPECT_EQ(std::memcmp(a.parameters().data(), b.parameters().data(), sizeof(double) * a.parameters().size()), 0);
  Mlp other({64, 4}, 3, 0);
  EXPECT_THROW(other.load(dir / "m.c2r"), IngestionError);
}

TEST(Model, MomentumSgdMatchesHandRecursion) {
  MomentumSgd opt(0.1, 0.9, 0.01);
  Vector p(1), g(1);
  p << 1.0;
  g << 0.5;
  opt.step(p, g);  // v = 0.5 + 0.01, p = 1 - 0.051
  EXPECT_NEAR(p[0], 0.949, 1e-12);
  opt.step(p, g);  // v = 0.9 * 0.51 + 0.5 + 0.01 * 0.949
  EXPECT_NEAR(p[0], 0.949 - 0.1 * (0.459 + 0.5 + 0.00949), 1e-12);
}

// SPDX-License-Identifier: Apache-2.0
// Independent reference computations shared by the test suites.
#pragma once

#include "c2r/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace c2r::testing {

/// logits = x W^T + b, built as an Mlp with no hidden layer.
inline std::unique_ptr<Mlp> linear_model(const Matrix& w, const Eigen::RowVectorXd& b) {
  auto m = std::make_unique<Mlp>(std::vector<Index>{w.cols()}, static_cast<int>(w.rows()), 1);
  m->view(m->block("head.weight")) = w;
  m->view(m->block("head.bias")) = b;
  return m;
}

/// Scalar softmax cross-entropy written out term by term.
inline double ce_oracle(const std::vector<double>& z, int y) {
  double s = 0.0;
  for (double v : z) s += std::exp(v);
  return -std::log(std::exp(z[static_cast<std::size_t>(y)]) / s);
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({1e-8, std::abs(a), std::abs(b)}); }

/// Central differences of a scalar function of a vector.
inline Vector central_diff(const std::function<double(const Vector&)>& f, Vector x, double h = 1e-5) {
  Vector g(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    double keep = x[i];
    x[i] = keep + h;
    double up = f(x);
    x[i] = keep - h;
    double dn = f(x);
    x[i] = keep;
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

/// Max relative error over coordinates, relative to the larger gradient norm.
inline double grad_rel_err(const Vector& analytic, const Vector& numeric) {
  double scale = std::max({analytic.lpNorm<Eigen::Infinity>(), numeric.lpNorm<Eigen::Infinity>(), 1e-8});
  return (analytic - numeric).lpNorm<Eigen::Infinity>() / scale;
}

inline Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  return Matrix::NullaryExpr(r, c, [&] { return u(rng); });
}

inline LabeledBatch make_batch(const Matrix& x, std::vector<int> labels, SampleShape shape = {}) {
  LabeledBatch b;
  b.inputs = x;
  b.labels = std::move(labels);
  b.shape = shape.size() == x.cols() ? shape : SampleShape{1, 1, x.cols()};
  for (Index i = 0; i < x.rows(); ++i) b.ids.push_back(i);
  return b;
}

inline std::vector<int> random_labels(Index n, int k, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, k - 1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& y : out) y = u(rng);
  return out;
}

}  // namespace c2r::testing

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/container.hpp"
#include "c2r/core.hpp"

#include <numbers>
#include <numeric>
#include <random>

namespace c2r {

struct DatasetDescriptor {
  std::string kind = "gaussians";  // gaussians | rings | patch-images | file
  int num_classes = 3;
  Index samples_per_class = 1000;
  SampleShape shape{1, 1, 2};
  InputRange range{0.0, 1.0};
  std::uint64_t seed = 0;
  double train_fraction = 0.5;
  double sigma = 0.35;
  std::string path;  // kind == file

  void validate() const {
    if (kind != "gaussians" && kind != "rings" && kind != "patch-images" && kind != "file")
      throw ConfigError("dataset: unknown kind '" + kind + "'");
    if (num_classes < 2) throw ConfigError("dataset: num_classes must be >= 2");
    if (kind != "file" && samples_per_class < 2) throw ConfigError("dataset: samples_per_class must be >= 2");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
      throw ConfigError("dataset: train_fraction must lie in (0, 1)");
    if (!(range.hi > range.lo)) throw ConfigError("dataset: empty value range");
    if (sigma < 0.0) throw ConfigError("dataset: sigma must be >= 0");
    if ((kind == "gaussians" || kind == "rings") && shape.size() < 2)
      throw ConfigError("dataset: vector data needs at least 2 dimensions");
    if (kind == "file" && path.empty()) throw ConfigError("dataset: file kind needs a path");
  }
};

struct Dataset {
  LabeledBatch train;
  LabeledBatch test;
  int num_classes = 0;
  InputRange range;
};

namespace detail {

// Per class, the first round(fraction * n) rows (in order) go to train.
inline Dataset split_by_class(const Matrix& x, const std::vector<int>& y, int num_classes, double fraction,
                              SampleShape shape, InputRange range) {
  std::vector<std::vector<std::size_t>> per_class(static_cast<std::size_t>(num_classes));
  for (std::size_t i = 0; i < y.size(); ++i) per_class[static_cast<std::size_t>(y[i])].push_back(i);
  std::vector<std::size_t> tr, te;
  for (const auto& rows : per_class) {
    auto ntr = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(rows.size())));
    for (std::size_t k = 0; k < rows.size(); ++k) (k < ntr ? tr : te).push_back(rows[k]);
  }
  std::sort(tr.begin(), tr.end());
  std::sort(te.begin(), te.end());
  LabeledBatch all;
  all.inputs = x;
  all.labels = y;
  all.shape = shape;
  all.ids.resize(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) all.ids[i] = static_cast<std::int64_t>(i);
  return Dataset{all.take(tr), all.take(te), num_classes, range};
}

// Isotropic affine map of raw 2-d points into [lo, hi], centered, padded by 3 sigma.
inline void rescale_points(Matrix& x, const Matrix& centers, double pad, InputRange range) {
  Eigen::RowVectorXd mn = centers.colwise().minCoeff().array() - pad;
  Eigen::RowVectorXd mx = centers.colwise().maxCoeff().array() + pad;
  double span = (mx - mn).maxCoeff();
  if (span <= 0.0) span = 1.0;
  double s = range.width() / span;
  Eigen::RowVectorXd mid = 0.5 * (mn + mx);
  for (Index i = 0; i < x.rows(); ++i)
    x.row(i) = ((x.row(i) - mid) * s).array() + 0.5 * (range.lo + range.hi);
  x = clamp(x, range.lo, range.hi);
}

}  // namespace detail

/// Seeded, class-balanced synthetic data normalized into the descriptor's range.
inline Dataset generate(const DatasetDescriptor& desc) {
  desc.validate();
  if (desc.kind == "file") throw ConfigError("dataset: file kind is loaded, not generated");
  std::mt19937_64 rng(desc.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Index n = desc.samples_per_class * desc.num_classes;
  const Index dim = desc.shape.size();
  Matrix x(n, dim);
  std::vector<int> y(static_cast<std::size_t>(n));
  // Samples interleave classes so that any prefix stays roughly balanced.
  for (Index i = 0; i < n; ++i) y[static_cast<std::size_t>(i)] = static_cast<int>(i % desc.num_classes);

  if (desc.kind == "gaussians") {
    // Class means on a regular polygon with unit side, in the first two coordinates.
    const double k = desc.num_classes;
    const double radius = 0.5 / std::sin(std::numbers::pi / k);
    Matrix centers = Matrix::Zero(desc.num_classes, dim);
    for (int c = 0; c < desc.num_classes; ++c) {
      centers(c, 0) = radius * std::cos(2.0 * std::numbers::pi * c / k);
      centers(c, 1) = radius * std::sin(2.0 * std::numbers::pi * c / k);
    }
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < dim; ++j) x(i, j) = centers(y[static_cast<std::size_t>(i)], j) + desc.sigma * gauss(rng);
    detail::rescale_points(x, centers, 3.0 * desc.sigma, desc.range);
  } else if (desc.kind == "rings") {
    std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
    for (Index i = 0; i < n; ++i) {
      double r = 1.0 + y[static_cast<std::size_t>(i)] + desc.sigma * gauss(rng);
      double a = angle(rng);
      x.row(i).setZero();
      x(i, 0) = r * std::cos(a);
      x(i, 1) = r * std::sin(a);
      for (Index j = 2; j < dim; ++j) x(i, j) = desc.sigma * gauss(rng);
    }
    double outer = desc.num_classes;
    Matrix box(2, dim);
    box.setZero();
    box.row(0).head(2).setConstant(-outer);
    box.row(1).head(2).setConstant(outer);
    detail::rescale_points(x, box, 3.0 * desc.sigma, desc.range);
  } else {  // patch-images
    // Class template: 0.5 + 0.3 * sin(fx * u + fy * v + phase) per channel; pixels add N(0, sigma^2).
    std::uniform_real_distribution<double> freq(0.5, 3.0), phase(0.0, 2.0 * std::numbers::pi);
    const auto& s = desc.shape;
    Matrix templates(desc.num_classes, dim);
    for (int c = 0; c < desc.num_classes; ++c)
      for (Index ch = 0; ch < s.channels; ++ch) {
        double fx = freq(rng), fy = freq(rng), ph = phase(rng);
        for (Index v = 0; v < s.height; ++v)
          for (Index u = 0; u < s.width; ++u)
            templates(c, ch * s.height * s.width + v * s.width + u) =
                0.5 + 0.3 * std::sin(fx * u / static_cast<double>(s.width) * 2.0 * std::numbers::pi +
                                     fy * v / static_cast<double>(s.height) * 2.0 * std::numbers::pi + ph);
      }
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < dim; ++j)
        x(i, j) = templates(y[static_cast<std::size_t>(i)], j) + desc.sigma * gauss(rng);
    x = clamp(x, 0.0, 1.0).array() * desc.range.width() + desc.range.lo;
    x = clamp(x, desc.range.lo, desc.range.hi);
  }
  return detail::split_by_class(x, y, desc.num_classes, desc.train_fraction, desc.shape, desc.range);
}

/// Writes images (rows) and labels as a dataset container.
inline void save_image_array(const std::filesystem::path& path, const Matrix& images, const std::vector<int>& labels,
                             SampleShape shape, InputRange stored_range) {
  require(static_cast<Index>(labels.size()) == images.rows(), "save_image_array: labels misaligned");
  Container c;
  c.manifest["kind"] = "image-array";
  c.manifest["shape"] = std::to_string(shape.channels) + "x" + std::to_string(shape.height) + "x" +
                        std::to_string(shape.width);
  c.manifest["value_lo"] = nlohmann::json(stored_range.lo).dump();
  c.manifest["value_hi"] = nlohmann::json(stored_range.hi).dump();
  c.put("images", images);
  c.put_ints("labels", labels);
  c.save(path);
}

/// Loads a dataset container; values are mapped from the stored range into
/// the descriptor's range (identity when the ranges agree).
inline Dataset load_image_array(const std::filesystem::path& path, const DatasetDescriptor& desc) {
  Container c;
  try {
    c = Container::load(path);
  } catch (const IngestionError& e) {
    throw IngestionError("dataset '" + path.string() + "': " + e.what());
  }
  Matrix images = c.matrix("images");
  auto raw_labels = c.ints("labels");
  if (images.rows() == 0) throw IngestionError("dataset '" + path.string() + "': no records");
  if (images.cols() != desc.shape.size())
    throw IngestionError("dataset '" + path.string() + "': record width " + std::to_string(images.cols()) +
                         " does not match declared shape (" + std::to_string(desc.shape.size()) + ")");
  if (static_cast<Index>(raw_labels.size()) != images.rows())
    throw IngestionError("dataset '" + path.string() + "': label count does not match record count");
  std::vector<int> labels(raw_labels.size());
  for (std::size_t j = 0; j < raw_labels.size(); ++j) {
    if (raw_labels[j] < 0 || raw_labels[j] >= desc.num_classes)
      throw IngestionError("dataset '" + path.string() + "': record " + std::to_string(j) + " has label " +
                           std::to_string(raw_labels[j]) + " outside [0, " + std::to_string(desc.num_classes) + ")");
    labels[j] = static_cast<int>(raw_labels[j]);
  }
  double lo = nlohmann::json::parse(c.meta("value_lo")).get<double>();
  double hi = nlohmann::json::parse(c.meta("value_hi")).get<double>();
  if (!(hi > lo)) throw IngestionError("dataset '" + path.string() + "': empty stored value range");
  if (lo != desc.range.lo || hi != desc.range.hi) {
    images = (images.array() - lo) * (desc.range.width() / (hi - lo)) + desc.range.lo;
    images = clamp(images, desc.range.lo, desc.range.hi);
  }
  for (Index j = 0; j < images.rows(); ++j)
    if (!((images.row(j).array() >= desc.range.lo).all() && (images.row(j).array() <= desc.range.hi).all()))
      throw IngestionError("dataset '" + path.string() + "': record " + std::to_string(j) + " outside value range");
  return detail::split_by_class(images, labels, desc.num_classes, desc.train_fraction, desc.shape, desc.range);
}

inline Dataset load_dataset(const DatasetDescriptor& desc) {
  if (desc.kind == "file") {
    desc.validate();
    return load_image_array(desc.path, desc);
  }
  return generate(desc);
}

/// Seeded sample of `size` distinct rows (all rows when size >= batch size).
inline LabeledBatch sample_batch(const LabeledBatch& data, std::size_t size, std::mt19937_64& rng) {
  std::vector<std::size_t> rows(static_cast<std::size_t>(data.size()));
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  std::shuffle(rows.begin(), rows.end(), rng);
  rows.resize(std::min(size, rows.size()));
  return data.take(rows);
}

}  // namespace c2r

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace c2r {

// Row-major so that one sample is one contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Invalid user-facing configuration (bad widths, unknown names, missing labels).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Violated precondition of a library call (shape mismatch, empty input).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed data on disk.
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or state during optimization.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

struct InputRange {
  double lo = 0.0;
  double hi = 1.0;

  double width() const { return hi - lo; }
  bool contains(double v) const { return v >= lo && v <= hi; }
};

// sign(0) == 0: no move on dead coordinates.
inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline Matrix sign(const Matrix& m) {
  return m.unaryExpr([](double v) { return sign(v); });
}

inline Matrix clamp(const Matrix& m, double lo, double hi) {
  return m.cwiseMax(lo).cwiseMin(hi);
}

/// Per-shape of a single sample, channel-major. Vector data uses {1, 1, d}.
struct SampleShape {
  Index channels = 1;
  Index height = 1;
  Index width = 1;

  Index size() const { return channels * height * width; }
  bool operator==(const SampleShape&) const = default;
};

/// Inputs are rows of `inputs`; ids key the warm-start cache.
struct LabeledBatch {
  Matrix inputs;
  std::vector<int> labels;
  std::vector<std::int64_t> ids;
  SampleShape shape;

  Index size() const { return inputs.rows(); }

  LabeledBatch take(std::span<const std::size_t> rows) const {
    LabeledBatch out;
    out.shape = shape;
    out.inputs.resize(static_cast<Index>(rows.size()), inputs.cols());
    out.labels.reserve(rows.size());
    out.ids.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.inputs.row(static_cast<Index>(i)) = inputs.row(static_cast<Index>(rows[i]));
      out.labels.push_back(labels[rows[i]]);
      out.ids.push_back(ids[rows[i]]);
    }
    return out;
  }

  void validate(int num_classes, InputRange range) const {
    require(static_cast<Index>(labels.size()) == inputs.rows() &&
                static_cast<Index>(ids.size()) == inputs.rows(),
            "LabeledBatch: inputs, labels and ids must be aligned");
    require(inputs.cols() == shape.size(), "LabeledBatch: row width does not match sample shape");
    for (std::size_t i = 0; i < labels.size(); ++i)
      require(labels[i] >= 0 && labels[i] < num_classes,
              "LabeledBatch: label out of range at row " + std::to_string(i));
    require((inputs.array() >= range.lo).all() && (inputs.array() <= range.hi).all(),
            "LabeledBatch: input outside declared range");
    std::vector<std::int64_t> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
            "LabeledBatch: duplicate sample id");
  }
};

/// 64-bit FNV-1a. Used for config and checkpoint fingerprints only.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

/// Counts per-sample forward and backward passes through a model.
struct GradientLedger {
  std::int64_t forward_samples = 0;
  std::int64_t backward_samples = 0;

  GradientLedger& operator+=(const GradientLedger& o) {
    forward_samples += o.forward_samples;
    backward_samples += o.backward_samples;
    return *this;
  }
};

}  // namespace c2r

// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/container.hpp"
#include "c2r/core.hpp"

#include <random>

namespace c2r {

/// The learnable distilled set: ipc images per class, class-major, fixed hard labels.
struct SyntheticDataset {
  Matrix images;
  std::vector<int> labels;
  int ipc = 0;
  int num_classes = 0;
  SampleShape shape;
  InputRange range;
  std::string init_mode = "real-sample";
  std::uint64_t seed = 0;

  Index size() const { return images.rows(); }

  LabeledBatch as_batch() const {
    LabeledBatch b;
    b.inputs = images;
    b.labels = labels;
    b.shape = shape;
    b.ids.resize(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) b.ids[i] = static_cast<std::int64_t>(i);
    return b;
  }

  void validate() const {
    require(static_cast<Index>(labels.size()) == images.rows(), "synthetic: labels misaligned with images");
    require(images.rows() == static_cast<Index>(ipc) * num_classes, "synthetic: expected ipc * classes images");
    std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
    for (int y : labels) {
      require(y >= 0 && y < num_classes, "synthetic: label out of range");
      ++counts[static_cast<std::size_t>(y)];
    }
    for (int c : counts) require(c == ipc, "synthetic: every class must hold exactly ipc images");
    require((images.array() >= range.lo).all() && (images.array() <= range.hi).all(),
            "synthetic: image outside value range");
  }
};

/// real-sample: seeded per-class draw of ipc distinct training rows.
/// noise: uniform in the value range.
inline SyntheticDataset init_synthetic(const LabeledBatch& real, int num_classes, InputRange range, int ipc,
                                       const std::string& mode, std::uint64_t seed) {
  if (ipc < 1) throw ConfigError("synthetic: ipc must be >= 1");
  if (mode != "real-sample" && mode != "noise") throw ConfigError("synthetic: unknown init mode '" + mode + "'");
  SyntheticDataset s;
  s.ipc = ipc;
  s.num_classes = num_classes;
  s.shape = real.shape;
  s.range = range;
  s.init_mode = mode;
  s.seed = seed;
  s.images.resize(static_cast<Index>(ipc) * num_classes, real.inputs.cols());
  s.labels.resize(static_cast<std::size_t>(ipc * num_classes));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(range.lo, range.hi);
  for (int c = 0; c < num_classes; ++c) {
    std::vector<Index> rows;
    if (mode == "real-sample") {
      for (Index i = 0; i < real.size(); ++i)
        if (real.labels[static_cast<std::size_t>(i)] == c) rows.push_back(i);
      if (static_cast<int>(rows.size()) < ipc)
        throw ConfigError("synthetic: class " + std::to_string(c) + " has " + std::to_string(rows.size()) +
                          " real samples, fewer than ipc = " + std::to_string(ipc));
      std::shuffle(rows.begin(), rows.end(), rng);
    }
    for (int k = 0; k < ipc; ++k) {
      Index r = static_cast<Index>(c) * ipc + k;
      s.labels[static_cast<std::size_t>(r)] = c;
      if (mode == "real-sample")
        s.images.row(r) = real.inputs.row(rows[static_cast<std::size_t>(k)]);
      else
        for (Index j = 0; j < s.images.cols(); ++j) s.images(r, j) = unif(rng);
    }
  }
  return s;
}

inline void put_synthetic(Container& c, const SyntheticDataset& s) {
  c.manifest["ipc"] = std::to_string(s.ipc);
  c.manifest["num_classes"] = std::to_string(s.num_classes);
  c.manifest["shape"] = std::to_string(s.shape.channels) + "x" + std::to_string(s.shape.height) + "x" +
                        std::to_string(s.shape.width);
  c.manifest["range"] = nlohmann::json::array({s.range.lo, s.range.hi}).dump();
  c.manifest["init_mode"] = s.init_mode;
  c.manifest["init_seed"] = std::to_string(s.seed);
  c.put("synthetic.images", s.images);
  c.put_ints("synthetic.labels", s.labels);
}

inline SyntheticDataset get_synthetic(const Container& c) {
  SyntheticDataset s;
  s.ipc = std::stoi(c.meta("ipc"));
  s.num_classes = std::stoi(c.meta("num_classes"));
  if (std::sscanf(c.meta("shape").c_str(), "%ldx%ldx%ld", &s.shape.channels, &s.shape.height, &s.shape.width) != 3)
    throw IngestionError("synthetic: bad shape in manifest");
  auto r = nlohmann::json::parse(c.meta("range"));
  s.range = {r.at(0).get<double>(), r.at(1).get<double>()};
  s.init_mode = c.meta("init_mode");
  s.seed = std::stoull(c.meta("init_seed"));
  s.images = c.matrix("synthetic.images");
  auto labels = c.ints("synthetic.labels");
  s.labels.assign(labels.begin(), labels.end());
  try {
    s.validate();
  } catch (const ContractError& e) {
    throw IngestionError(std::string("synthetic checkpoint: ") + e.what());
  }
  return s;
}

}  // namespace c2r

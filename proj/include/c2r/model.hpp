// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "c2r/container.hpp"
#include "c2r/core.hpp"

#include <any>
#include <array>
#include <cstdio>
#include <memory>
#include <random>

namespace c2r {

/// A named slice of the flat parameter vector, viewed as rows x cols.
struct ParameterBlock {
  std::string name;
  Index offset = 0;
  Index rows = 0;
  Index cols = 0;

  Index size() const { return rows * cols; }
};

struct ForwardResult {
  Matrix logits;      // M x K
  Matrix embeddings;  // M x d, penultimate features
  std::any tape;      // body activations kept for backward
};

struct Gradients {
  Matrix inputs;  // M x D
  Vector params;  // same layout as Model::parameters(); empty when not requested
};

/// Differentiable classifier: a feature body followed by a linear head.
///
/// forward/embed are pure functions of (parameters, inputs). backward takes
/// upstream gradients for both outputs, so any scalar loss built from logits
/// and embeddings can be differentiated w.r.t. inputs and parameters.
class Model {
 public:
  virtual ~Model() = default;

  virtual std::string architecture() const = 0;
  virtual std::unique_ptr<Model> clone() const = 0;

  Index input_dim() const { return input_dim_; }
  Index embed_dim() const { return embed_dim_; }
  int num_classes() const { return num_classes_; }
  std::uint64_t seed() const { return seed_; }

  const Vector& parameters() const { return params_; }
  Vector& mutable_parameters() { return params_; }
  const std::vector<ParameterBlock>& blocks() const { return blocks_; }

  const ParameterBlock& block(const std::string& name) const {
    for (const auto& b : blocks_)
      if (b.name == name) return b;
    throw ContractError("model: no parameter block '" + name + "'");
  }

  Eigen::Map<Matrix> view(const ParameterBlock& b) {
    return Eigen::Map<Matrix>(params_.data() + b.offset, b.rows, b.cols);
  }
  Eigen::Map<const Matrix> view(const ParameterBlock& b) const {
    return Eigen::Map<const Matrix>(params_.data() + b.offset, b.rows, b.cols);
  }

  ForwardResult forward(const Matrix& inputs) const {
    require(inputs.cols() == input_dim_, "model: input width " + std::to_string(inputs.cols()) +
                                             " != " + std::to_string(input_dim_));
    ForwardResult out;
    out.embeddings = body_forward(inputs, out.tape);
    auto w = view(block("head.weight"));
    auto b = view(block("head.bias"));
    out.logits = out.embeddings * w.transpose();
    out.logits.rowwise() += b.row(0);
    return out;
  }

  Matrix logits(const Matrix& inputs) const { return forward(inputs).logits; }
  Matrix embed(const Matrix& inputs) const { return forward(inputs).embeddings; }

  /// Either upstream gradient may be empty (0 x 0), meaning zero.
  Gradients backward(const ForwardResult& fwd, const Matrix& dlogits, const Matrix& dembed,
                     bool want_params = true) const {
    const Index m = fwd.embeddings.rows();
    Matrix demb = Matrix::Zero(m, embed_dim_);
    if (dembed.size() != 0) {
      require(dembed.rows() == m && dembed.cols() == embed_dim_, "model: dembed shape mismatch");
      demb = dembed;
    }
    Gradients g;
    if (want_params) g.params = Vector::Zero(params_.size());
    if (dlogits.size() != 0) {
      require(dlogits.rows() == m && dlogits.cols() == num_classes_, "model: dlogits shape mismatch");
      auto w = view(block("head.weight"));
      demb.noalias() += dlogits * w;
      if (want_params) {
        const auto& wb = block("head.weight");
        const auto& bb = block("head.bias");
        Eigen::Map<Matrix>(g.params.data() + wb.offset, wb.rows, wb.cols) =
            dlogits.transpose() * fwd.embeddings;
        Eigen::Map<Matrix>(g.params.data() + bb.offset, 1, bb.cols) = dlogits.colwise().sum();
      }
    }
    g.inputs = body_backward(fwd.tape, demb, want_params ? &g.params : nullptr);
    return g;
  }

  void save(const std::filesystem::path& path) const {
    Container c;
    c.manifest["architecture"] = architecture();
    c.manifest["seed"] = std::to_string(seed_);
    c.manifest["num_classes"] = std::to_string(num_classes_);
    for (const auto& b : blocks_) {
      c.manifest["shape." + b.name] = std::to_string(b.rows) + "x" + std::to_string(b.cols);
      c.put(b.name, Matrix(view(b)));
    }
    c.save(path);
  }

  /// Loads parameters into an already-built model of the same architecture.
  void load(const std::filesystem::path& path) {
    auto c = Container::load(path);
    if (c.meta("architecture") != architecture())
      throw IngestionError("model: checkpoint architecture '" + c.meta("architecture") +
                           "' does not match '" + architecture() + "'");
    for (const auto& b : blocks_) {
      Matrix m = c.matrix(b.name);
      if (m.rows() != b.rows || m.cols() != b.cols)
        throw IngestionError("model: block '" + b.name + "' has wrong shape");
      view(b) = m;
    }
  }

 protected:
  Model(Index input_dim, int num_classes, std::uint64_t seed)
      : input_dim_(input_dim), num_classes_(num_classes), seed_(seed) {}

  Model(const Model&) = default;
  Model& operator=(const Model&) = default;

  virtual Matrix body_forward(const Matrix& inputs, std::any& tape) const = 0;
  // Adds body parameter gradients into *dparams when non-null; returns d/dinputs.
  virtual Matrix body_backward(const std::any& tape, const Matrix& dembed, Vector* dparams) const = 0;

  Index add_block(const std::string& name, Index rows, Index cols) {
    blocks_.push_back({name, total_, rows, cols});
    total_ += rows * cols;
    return static_cast<Index>(blocks_.size()) - 1;
  }

  // Call after all blocks (including the head) are registered.
  void allocate() { params_ = Vector::Zero(total_); }

  void init_normal(const ParameterBlock& b, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (Index i = 0; i < b.size(); ++i) params_[b.offset + i] = dist(rng);
  }

  void add_head() {
    add_block("head.weight", num_classes_, embed_dim_);
    add_block("head.bias", 1, num_classes_);
  }

  Index input_dim_ = 0;
  Index embed_dim_ = 0;
  int num_classes_ = 0;
  std::uint64_t seed_ = 0;
  Vector params_;
  std::vector<ParameterBlock> blocks_;
  Index total_ = 0;
};

/// Fully connected ReLU network. widths[0] is the input dimension; the
/// embedding is the last hidden activation (the input itself when there is
/// no hidden layer).
class Mlp final : public Model {
 public:
  Mlp(std::vector<Index> widths, int num_classes, std::uint64_t seed)
      : Model(widths.empty() ? 0 : widths.front(), num_classes, seed), widths_(std::move(widths)) {
    if (widths_.empty()) throw ConfigError("mlp: layer widths must be non-empty");
    for (auto w : widths_)
      if (w < 1) throw ConfigError("mlp: every layer width must be >= 1");
    if (num_classes < 2) throw ConfigError("mlp: num_classes must be >= 2");
    embed_dim_ = widths_.back();
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      add_block("fc" + std::to_string(l) + ".weight", widths_[l + 1], widths_[l]);
      add_block("fc" + std::to_string(l) + ".bias", 1, widths_[l + 1]);
    }
    add_head();
    allocate();
    std::mt19937_64 rng(seed);
    for (const auto& b : blocks_) {
      if (b.name.ends_with(".weight")) init_normal(b, std::sqrt(2.0 / static_cast<double>(b.cols)), rng);
    }
  }

  std::string architecture() const override {
    std::string s = "mlp[";
    for (std::size_t i = 0; i < widths_.size(); ++i) s += (i ? "," : "") + std::to_string(widths_[i]);
    return s + "]->" + std::to_string(num_classes_);
  }

  std::unique_ptr<Model> clone() const override { return std::make_unique<Mlp>(*this); }

  const std::vector<Index>& widths() const { return widths_; }

 protected:
  struct Tape {
    std::vector<Matrix> activations;  // activations[0] = input, then post-ReLU per layer
  };

  Matrix body_forward(const Matrix& inputs, std::any& tape) const override {
    Tape t;
    t.activations.push_back(inputs);
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
      auto w = view(blocks_[2 * l]);
      auto b = view(blocks_[2 * l + 1]);
      Matrix z = t.activations.back() * w.transpose();
      z.rowwise() += b.row(0);
      t.activations.push_back(z.cwiseMax(0.0));
    }
    Matrix emb = t.activations.back();
    tape = std::move(t);
    return emb;
  }

  Matrix body_backward(const std::any& tape, const Matrix& dembed, Vector* dparams) const override {
    const auto& t = std::any_cast<const Tape&>(tape);
    Matrix grad = dembed;
    for (std::size_t l = widths_.size() - 1; l-- > 0;) {
      const Matrix& out = t.activations[l + 1];
      Matrix dz = grad.cwiseProduct((out.array() > 0.0).cast<double>().matrix());
      const auto& wb = blocks_[2 * l];
      const auto& bb = blocks_[2 * l + 1];
      if (dparams) {
        Eigen::Map<Matrix>(dparams->data() + wb.offset, wb.rows, wb.cols) +=
            dz.transpose() * t.activations[l];
        Eigen::Map<Matrix>(dparams->data() + bb.offset, 1, bb.cols) += dz.colwise().sum();
      }
      grad = dz * view(wb);
    }
    return grad;
  }

 private:
  std::vector<Index> widths_;
};

/// Three blocks of conv3x3(pad 1) -> instance norm -> ReLU -> avgpool 2x2, then
/// a linear head. Instance norm uses per-sample statistics, so the output of
/// one sample never depends on the rest of the batch.
class ConvNet3 final : public Model {
 public:
  static constexpr double kNormEps = 1e-5;

  ConvNet3(Index channels, int num_classes, SampleShape input_shape, std::uint64_t seed)
      : Model(input_shape.size(), num_classes, seed), width_(channels), in_(input_shape) {
    if (channels < 1) throw ConfigError("convnet3: channels must be >= 1");
    if (num_classes < 2) throw ConfigError("convnet3: num_classes must be >= 2");
    if (in_.channels < 1 || in_.height < 8 || in_.width < 8 || in_.height > 64 || in_.width > 64)
      throw ConfigError("convnet3: input must be C x H x W with 8 <= H, W <= 64");
    if (in_.height % 8 != 0 || in_.width % 8 != 0)
      throw ConfigError("convnet3: height and width must be divisible by 8 (three 2x2 pools)");
    embed_dim_ = width_ * (in_.height / 8) * (in_.width / 8);
    for (int l = 0; l < 3; ++l) {
      Index cin = l == 0 ? in_.channels : width_;
      add_block("conv" + std::to_string(l) + ".weight", width_, cin * 9);
      add_block("conv" + std::to_string(l) + ".bias", 1, width_);
      add_block("norm" + std::to_string(l) + ".gamma", 1, width_);
      add_block("norm" + std::to_string(l) + ".beta", 1, width_);
    }
    add_head();
    allocate();
    std::mt19937_64 rng(seed);
    for (const auto& b : blocks_) {
      if (b.name.ends_with(".weight"))
        init_normal(b, std::sqrt(2.0 / static_cast<double>(b.cols)), rng);
      else if (b.name.ends_with(".gamma"))
        view(b).setOnes();
    }
  }

  std::string architecture() const override {
    return "convnet3[" + std::to_string(width_) + "]:" + std::to_string(in_.channels) + "x" +
           std::to_string(in_.height) + "x" + std::to_string(in_.width) + "->" +
           std::to_string(num_classes_);
  }

  std::unique_ptr<Model> clone() const override { return std::make_unique<ConvNet3>(*this); }

  SampleShape input_shape() const { return in_; }

 protected:
  struct BlockTape {
    Matrix cols;     // (cin*9) x (h*w), im2col of the block input
    Matrix normed;   // c x (h*w), x-hat
    Vector inv_std;  // c
    Matrix act;      // c x (h*w), post-ReLU
  };
  struct SampleTape {
    std::array<BlockTape, 3> blocks;
  };
  struct Tape {
    std::vector<SampleTape> samples;
  };

  Matrix body_forward(const Matrix& inputs, std::any& tape) const override {
    Tape t;
    t.samples.resize(static_cast<std::size_t>(inputs.rows()));
    Matrix emb(inputs.rows(), embed_dim_);
    for (Index s = 0; s < inputs.rows(); ++s) {
      Matrix x = Eigen::Map<const Matrix>(inputs.row(s).data(), in_.channels, in_.height * in_.width);
      Index h = in_.height, w = in_.width;
      for (int l = 0; l < 3; ++l) {
        auto& bt = t.samples[static_cast<std::size_t>(s)].blocks[static_cast<std::size_t>(l)];
        bt.cols = im2col(x, h, w);
        auto wv = view(blocks_[4 * l]);
        auto bv = view(blocks_[4 * l + 1]);
        auto gamma = view(blocks_[4 * l + 2]);
        auto beta = view(blocks_[4 * l + 3]);
        Matrix conv = wv * bt.cols;
        conv.colwise() += bv.row(0).transpose();
        const double n = static_cast<double>(h * w);
        bt.normed.resize(conv.rows(), conv.cols());
        bt.inv_std.resize(conv.rows());
        for (Index c = 0; c < conv.rows(); ++c) {
          double mean = conv.row(c).sum() / n;
          double var = (conv.row(c).array() - mean).square().sum() / n;
          bt.inv_std[c] = 1.0 / std::sqrt(var + kNormEps);
          bt.normed.row(c) = (conv.row(c).array() - mean) * bt.inv_std[c];
        }
        Matrix y = bt.normed;
        for (Index c = 0; c < y.rows(); ++c) y.row(c) = y.row(c) * gamma(0, c) + Eigen::RowVectorXd::Constant(y.cols(), beta(0, c));
        bt.act = y.cwiseMax(0.0);
        x = avgpool(bt.act, h, w);
        h /= 2;
        w /= 2;
      }
      emb.row(s) = Eigen::Map<const Eigen::RowVectorXd>(x.data(), x.size());
    }
    tape = std::move(t);
    return emb;
  }

  Matrix body_backward(const std::any& tape, const Matrix& dembed, Vector* dparams) const override {
    const auto& t = std::any_cast<const Tape&>(tape);
    Matrix dinputs(dembed.rows(), input_dim_);
    for (Index s = 0; s < dembed.rows(); ++s) {
      const auto& st = t.samples[static_cast<std::size_t>(s)];
      Index h = in_.height / 8, w = in_.width / 8;
      Matrix grad = Eigen::Map<const Matrix>(dembed.row(s).data(), width_, h * w);
      for (int l = 2; l >= 0; --l) {
        const auto& bt = st.blocks[static_cast<std::size_t>(l)];
        h *= 2;
        w *= 2;
        Matrix dact = avgpool_backward(grad, h, w);
        Matrix dy = dact.cwiseProduct((bt.act.array() > 0.0).cast<double>().matrix());
        auto gamma = view(blocks_[4 * l + 2]);
        const double n = static_cast<double>(h * w);
        Matrix dconv(dy.rows(), dy.cols());
        for (Index c = 0; c < dy.rows(); ++c) {
          Eigen::RowVectorXd dxhat = dy.row(c) * gamma(0, c);
          double sum_d = dxhat.sum();
          double sum_dx = dxhat.dot(bt.normed.row(c));
          dconv.row(c) = (bt.inv_std[c] / n) *
                         (n * dxhat.array() - sum_d - bt.normed.row(c).array() * sum_dx);
          if (dparams) {
            (*dparams)[blocks_[4 * l + 2].offset + c] += dy.row(c).dot(bt.normed.row(c));
            (*dparams)[blocks_[4 * l + 3].offset + c] += dy.row(c).sum();
          }
        }
        const auto& wb = blocks_[4 * l];
        if (dparams) {
          Eigen::Map<Matrix>(dparams->data() + wb.offset, wb.rows, wb.cols) += dconv * bt.cols.transpose();
          Eigen::Map<Matrix>(dparams->data() + blocks_[4 * l + 1].offset, 1, width_) +=
              dconv.rowwise().sum().transpose();
        }
        Matrix dcols = view(wb).transpose() * dconv;
        grad = col2im(dcols, bt.cols.rows() / 9, h, w);
      }
      dinputs.row(s) = Eigen::Map<const Eigen::RowVectorXd>(grad.data(), grad.size());
    }
    return dinputs;
  }

 private:
  // x: c x (h*w) -> (c*9) x (h*w), zero padding 1.
  static Matrix im2col(const Matrix& x, Index h, Index w) {
    const Index c = x.rows();
    Matrix cols = Matrix::Zero(c * 9, h * w);
    for (Index ch = 0; ch < c; ++ch)
      for (Index ky = 0; ky < 3; ++ky)
        for (Index kx = 0; kx < 3; ++kx) {
          Index r = ch * 9 + ky * 3 + kx;
          for (Index y = 0; y < h; ++y) {
            Index sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (Index xx = 0; xx < w; ++xx) {
              Index sx = xx + kx - 1;
              if (sx < 0 || sx >= w) continue;
              cols(r, y * w + xx) = x(ch, sy * w + sx);
            }
          }
        }
    return cols;
  }

  static Matrix col2im(const Matrix& cols, Index c, Index h, Index w) {
    Matrix x = Matrix::Zero(c, h * w);
    for (Index ch = 0; ch < c; ++ch)
      for (Index ky = 0; ky < 3; ++ky)
        for (Index kx = 0; kx < 3; ++kx) {
          Index r = ch * 9 + ky * 3 + kx;
          for (Index y = 0; y < h; ++y) {
            Index sy = y + ky - 1;
            if (sy < 0 || sy >= h) continue;
            for (Index xx = 0; xx < w; ++xx) {
              Index sx = xx + kx - 1;
              if (sx < 0 || sx >= w) continue;
              x(ch, sy * w + sx) += cols(r, y * w + xx);
            }
          }
        }
    return x;
  }

  static Matrix avgpool(const Matrix& x, Index h, Index w) {
    Matrix out(x.rows(), (h / 2) * (w / 2));
    for (Index c = 0; c < x.rows(); ++c)
      for (Index y = 0; y < h / 2; ++y)
        for (Index xx = 0; xx < w / 2; ++xx)
          out(c, y * (w / 2) + xx) = 0.25 * (x(c, 2 * y * w + 2 * xx) + x(c, 2 * y * w + 2 * xx + 1) +
                                              x(c, (2 * y + 1) * w + 2 * xx) +
                                              x(c, (2 * y + 1) * w + 2 * xx + 1));
    return out;
  }

  // h, w: spatial size of the pool input.
  static Matrix avgpool_backward(const Matrix& g, Index h, Index w) {
    Matrix out(g.rows(), h * w);
    for (Index c = 0; c < g.rows(); ++c)
      for (Index y = 0; y < h; ++y)
        for (Index xx = 0; xx < w; ++xx) out(c, y * w + xx) = 0.25 * g(c, (y / 2) * (w / 2) + xx / 2);
    return out;
  }

  Index width_;
  SampleShape in_;
};

/// Rebuilds a model from its architecture string (as written by architecture()).
inline std::unique_ptr<Model> build_from_architecture(const std::string& arch, std::uint64_t seed) {
  auto fail = [&] { return ConfigError("unrecognized architecture '" + arch + "'"); };
  auto arrow = arch.rfind("->");
  if (arrow == std::string::npos) throw fail();
  int k = std::stoi(arch.substr(arrow + 2));
  if (arch.starts_with("mlp[")) {
    std::vector<Index> widths;
    std::stringstream ss(arch.substr(4, arch.find(']') - 4));
    std::string tok;
    while (std::getline(ss, tok, ',')) widths.push_back(std::stoll(tok));
    return std::make_unique<Mlp>(widths, k, seed);
  }
  if (arch.starts_with("convnet3[")) {
    Index ch = std::stoll(arch.substr(9, arch.find(']') - 9));
    auto colon = arch.find(':');
    std::string dims = arch.substr(colon + 1, arrow - colon - 1);
    SampleShape s;
    if (std::sscanf(dims.c_str(), "%ldx%ldx%ld", &s.channels, &s.height, &s.width) != 3) throw fail();
    return std::make_unique<ConvNet3>(ch, k, s, seed);
  }
  throw fail();
}

struct LossWithGrad {
  double value = 0.0;
  Matrix grad;  // same shape as the differentiated input
};

/// Per-sample -log softmax(logits)[label], log-sum-exp stabilized.
inline Vector per_sample_cross_entropy(const Matrix& logits, std::span<const int> labels) {
  require(static_cast<Index>(labels.size()) == logits.rows(), "cross_entropy: label count mismatch");
  Vector out(logits.rows());
  for (Index i = 0; i < logits.rows(); ++i) {
    double mx = logits.row(i).maxCoeff();
    double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out[i] = lse - logits(i, labels[static_cast<std::size_t>(i)]);
  }
  return out;
}

/// Gradient of the per-sample CE summed over the batch (softmax - onehot).
inline Matrix cross_entropy_grad_sum(const Matrix& logits, std::span<const int> labels) {
  Matrix g(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    double mx = logits.row(i).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
    g.row(i) = e / e.sum();
    g(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
  }
  return g;
}

/// Mean cross-entropy and its gradient w.r.t. logits.
inline LossWithGrad cross_entropy(const Matrix& logits, std::span<const int> labels) {
  require(logits.rows() > 0, "cross_entropy: empty batch");
  LossWithGrad out;
  out.value = per_sample_cross_entropy(logits, labels).mean();
  out.grad = cross_entropy_grad_sum(logits, labels) / static_cast<double>(logits.rows());
  return out;
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
class MomentumSgd {
 public:
  MomentumSgd(double lr, double momentum, double weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

  void step(Vector& params, const Vector& grad) {
    if (velocity_.size() != params.size()) velocity_ = Vector::Zero(params.size());
    velocity_ = momentum_ * velocity_ + grad + weight_decay_ * params;
    params -= lr_ * velocity_;
  }

  void reset() { velocity_.resize(0); }

 private:
  double lr_, momentum_, weight_decay_;
  Vector velocity_;
};

inline std::vector<int> predict(const Model& model, const Matrix& inputs) {
  Matrix z = model.logits(inputs);
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Index i = 0; i < z.rows(); ++i) {
    Index arg = 0;
    z.row(i).maxCoeff(&arg);
    out[static_cast<std::size_t>(i)] = static_cast<int>(arg);
  }
  return out;
}

}  // namespace c2r

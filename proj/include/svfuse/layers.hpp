#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "svfuse/rng.hpp"
#include "svfuse/tape.hpp"

namespace svfuse::nn {

template <typename Scalar>
using ParamList = std::vector<Tensor<Scalar>*>;

/// Glorot-uniform fill from the given stream.
template <typename Scalar>
void init_uniform(Tensor<Scalar>& t, Rng& rng, double fan_in, double fan_out) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = static_cast<Scalar>(rng.uniform(-a, a));
}

template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;
  Tensor<Scalar> bias;

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng)
      : weight(name + ".weight", in, out), bias(name + ".bias", 1, out) {
    init_uniform(weight, rng, static_cast<double>(in), static_cast<double>(out));
  }

  Eigen::Index in_features() const { return weight.value.rows(); }
  Eigen::Index out_features() const { return weight.value.cols(); }

  Var<Scalar> operator()(const Var<Scalar>& x) const {
    Tape<Scalar>& t = *x.tape;
    return add_row(matmul(x, t.param(weight)), t.param(bias));
  }

  void collect(ParamList<Scalar>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  void zero() {
    weight.value.setZero();
    bias.value.setZero();
  }
};

/// ReLU perceptron; the final layer is linear.
template <typename Scalar>
struct Mlp {
  std::vector<Linear<Scalar>> layers;

  Mlp() = default;
  Mlp(const std::string& name, const std::vector<Eigen::Index>& widths, Rng& rng) {
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      layers.emplace_back(name + ".l" + std::to_string(i), widths[i], widths[i + 1], rng);
    }
  }

  Var<Scalar> operator()(Var<Scalar> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](x);
      if (i + 1 < layers.size()) x = relu(x);
    }
    return x;
  }

  void collect(ParamList<Scalar>& out) {
    for (auto& l : layers) l.collect(out);
  }

  Linear<Scalar>& last() { return layers.back(); }
};

/// Minimal gated unit: a single forget gate f drives both the candidate's
/// reset and the state interpolation.
///   f  = sigmoid([h, x] Wf + bf)
///   h~ = tanh([f*h, x] Wh + bh)
///   h' = (1 - f) * h + f * h~
template <typename Scalar>
struct MguCell {
  Tensor<Scalar> w_forget;
  Tensor<Scalar> b_forget;
  Tensor<Scalar> w_cand;
  Tensor<Scalar> b_cand;

  MguCell() = default;
  MguCell(const std::string& name, Eigen::Index input, Eigen::Index hidden, Rng& rng)
      : w_forget(name + ".w_forget", hidden + input, hidden),
        b_forget(name + ".b_forget", 1, hidden),
        w_cand(name + ".w_cand", hidden + input, hidden),
        b_cand(name + ".b_cand", 1, hidden) {
    init_uniform(w_forget, rng, double(hidden + input), double(hidden));
    init_uniform(w_cand, rng, double(hidden + input), double(hidden));
  }

  Eigen::Index hidden_size() const { return w_forget.value.cols(); }
  Eigen::Index input_size() const { return w_forget.value.rows() - hidden_size(); }

  Var<Scalar> operator()(const Var<Scalar>& x, const Var<Scalar>& h) const {
    if (h.cols() != hidden_size() || x.cols() != input_size() || x.rows() != h.rows()) {
      throw ShapeError("mgu_cell: shape mismatch x" + shape_str(x.rows(), x.cols()) + " h" +
                       shape_str(h.rows(), h.cols()) + " for input " + std::to_string(input_size()) + ", hidden " +
                       std::to_string(hidden_size()));
    }
    Tape<Scalar>& t = *x.tape;
    auto P = [&t](const Tensor<Scalar>& p) { return t.param(p); };
    const Var<Scalar> f = sigmoid(add_row(matmul(concat_cols<Scalar>({h, x}), P(w_forget)), P(b_forget)));
    const Var<Scalar> cand = tanh(add_row(matmul(concat_cols<Scalar>({mul(f, h), x}), P(w_cand)), P(b_cand)));
    return add(h, mul(f, sub(cand, h)));
  }

  void collect(ParamList<Scalar>& out) {
    out.insert(out.end(), {&w_forget, &b_forget, &w_cand, &b_cand});
  }

  Eigen::Index parameter_count() const { return w_forget.size() + b_forget.size() + w_cand.size() + b_cand.size(); }
};

template <typename Scalar>
Var<Scalar> mgu_cell(const Var<Scalar>& x, const Var<Scalar>& h, const MguCell<Scalar>& weights) {
  return weights(x, h);
}

/// Parameters of a standard GRU (update, reset, candidate) with the same shapes.
inline Eigen::Index gru_parameter_count(Eigen::Index input, Eigen::Index hidden) {
  return 3 * (hidden * (hidden + input) + hidden);
}

// ---------------------------------------------------------------------------
// Image convolution helpers (images are HW x C matrices, row = y * W + x)
// ---------------------------------------------------------------------------

/// 3x3 neighbourhood table with zero padding, cached per (H, W).
inline std::shared_ptr<const IndexTable> conv3x3_table(int height, int width) {
  static std::mutex mu;
  static std::map<std::pair<int, int>, std::shared_ptr<const IndexTable>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_pair(height, width);
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  auto t = std::make_shared<IndexTable>(height * width, 9);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      int k = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx, ++k) {
          const int yy = y + dy, xx = x + dx;
          (*t)(y * width + x, k) = (yy >= 0 && yy < height && xx >= 0 && xx < width) ? yy * width + xx : -1;
        }
      }
    }
  }
  cache[key] = t;
  return t;
}

template <typename Scalar>
struct Conv2d {
  Linear<Scalar> lin;  // (9 C_in) -> C_out

  Conv2d() = default;
  Conv2d(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng) : lin(name, 9 * in, out, rng) {}

  Var<Scalar> operator()(const Var<Scalar>& x, int height, int width) const {
    if (x.rows() != Eigen::Index(height) * width) {
      throw ShapeError("conv2d: " + shape_str(x.rows(), x.cols()) + " is not an image of " + std::to_string(height) +
                       "x" + std::to_string(width));
    }
    return lin(gather_neighbors(x, conv3x3_table(height, width)));
  }

  void collect(ParamList<Scalar>& out) { lin.collect(out); }
};

/// 2x2 average pooling operator (H, W even).
template <typename Scalar>
std::shared_ptr<const SpMat<Scalar>> avgpool2_operator(int height, int width) {
  const int h2 = height / 2, w2 = width / 2;
  std::vector<Eigen::Triplet<Scalar>> trip;
  trip.reserve(std::size_t(h2) * w2 * 4);
  for (int y = 0; y < h2; ++y)
    for (int x = 0; x < w2; ++x)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) trip.emplace_back(y * w2 + x, (2 * y + dy) * width + (2 * x + dx), Scalar(0.25));
  auto S = std::make_shared<SpMat<Scalar>>(h2 * w2, height * width);
  S->setFromTriplets(trip.begin(), trip.end());
  return S;
}

/// Bilinear x2 upsampling operator (half-pixel aligned, edge clamped).
template <typename Scalar>
std::shared_ptr<const SpMat<Scalar>> upsample2_operator(int height, int width) {
  const int H = height * 2, W = width * 2;
  std::vector<Eigen::Triplet<Scalar>> trip;
  for (int y = 0; y < H; ++y) {
    const double sy = std::clamp((y + 0.5) / 2.0 - 0.5, 0.0, double(height - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, height - 1);
    const double fy = sy - y0;
    for (int x = 0; x < W; ++x) {
      const double sx = std::clamp((x + 0.5) / 2.0 - 0.5, 0.0, double(width - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, width - 1);
      const double fx = sx - x0;
      const int r = y * W + x;
      trip.emplace_back(r, y0 * width + x0, Scalar((1 - fy) * (1 - fx)));
      trip.emplace_back(r, y0 * width + x1, Scalar((1 - fy) * fx));
      trip.emplace_back(r, y1 * width + x0, Scalar(fy * (1 - fx)));
      trip.emplace_back(r, y1 * width + x1, Scalar(fy * fx));
    }
  }
  auto S = std::make_shared<SpMat<Scalar>>(H * W, height * width);
  S->setFromTriplets(trip.begin(), trip.end());  // duplicates are summed
  return S;
}

// ---------------------------------------------------------------------------
// Batch normalisation over rows (occupied cells)
// ---------------------------------------------------------------------------

template <typename Scalar>
struct BatchNorm {
  Tensor<Scalar> gamma;
  Tensor<Scalar> beta;
  Tensor<Scalar> running_mean;
  Tensor<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);

  BatchNorm() = default;
  BatchNorm(const std::string& name, Eigen::Index channels)
      : gamma(name + ".gamma", 1, channels),
        beta(name + ".beta", 1, channels),
        running_mean(name + ".running_mean", 1, channels),
        running_var(name + ".running_var", 1, channels) {
    gamma.value.setOnes();
    running_var.value.setOnes();
    running_mean.requires_grad = false;
    running_var.requires_grad = false;
  }

  /// Training mode uses batch statistics and updates the running ones;
  /// evaluation mode uses the frozen running statistics.
  Var<Scalar> operator()(const Var<Scalar>& x, bool training) {
    Tape<Scalar>& t = *x.tape;
    if (x.rows() == 0) return x;
    Var<Scalar> xn;
    if (training) {
      const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> mu = x.value().colwise().mean();
      const Eigen::Matrix<Scalar, 1, Eigen::Dynamic> var =
          (x.value().rowwise() - mu).array().square().colwise().mean();
      running_mean.value = (Scalar(1) - momentum) * running_mean.value + momentum * mu;
      running_var.value = (Scalar(1) - momentum) * running_var.value + momentum * var;
      xn = normalize_cols(x, eps);
    } else {
      Mat<Scalar> shift = -running_mean.value;
      Mat<Scalar> inv = (running_var.value.array() + eps).rsqrt().matrix();
      xn = mul_row(add_row(x, t.constant(shift)), t.constant(inv));
    }
    return add_row(mul_row(xn, t.param(gamma)), t.param(beta));
  }

  void collect(ParamList<Scalar>& out) { out.insert(out.end(), {&gamma, &beta, &running_mean, &running_var}); }
};

// ---------------------------------------------------------------------------
// Optimisation
// ---------------------------------------------------------------------------

/// p <- p - lr * g for every parameter that requires a gradient.
template <typename Scalar>
void sgd_step(const ParamList<Scalar>& params, Scalar lr) {
  if (!(lr >= Scalar(0))) throw std::invalid_argument("sgd_step: learning rate must be non-negative");
  for (Tensor<Scalar>* p : params) {
    if (!p->requires_grad || p->grad.size() == 0) continue;
    p->value -= lr * p->grad;
  }
}

template <typename Scalar>
void zero_grads(const ParamList<Scalar>& params) {
  for (Tensor<Scalar>* p : params) p->zero_grad();
}

template <typename Scalar>
double grad_norm(const ParamList<Scalar>& params) {
  double s = 0;
  for (const Tensor<Scalar>* p : params)
    if (p->requires_grad && p->grad.size()) s += double(p->grad.squaredNorm());
  return std::sqrt(s);
}

/// SGD with heavy-ball momentum and optional global-norm clipping.
template <typename Scalar>
class Sgd {
 public:
  Sgd(Scalar lr, Scalar momentum = Scalar(0), Scalar clip_norm = Scalar(0))
      : lr_(lr), momentum_(momentum), clip_(clip_norm) {}

  void step(const ParamList<Scalar>& params) {
    Scalar factor = Scalar(1);
    if (clip_ > Scalar(0)) {
      const double n = grad_norm(params);
      if (n > double(clip_)) factor = static_cast<Scalar>(double(clip_) / n);
    }
    for (Tensor<Scalar>* p : params) {
      if (!p->requires_grad || p->grad.size() == 0) continue;
      Mat<Scalar>& vel = velocity_[p->name];
      if (vel.size() == 0) vel = Mat<Scalar>::Zero(p->value.rows(), p->value.cols());
      vel = momentum_ * vel + factor * p->grad;
      p->value -= lr_ * vel;
    }
  }

  void set_lr(Scalar lr) { lr_ = lr; }
  Scalar lr() const { return lr_; }

 private:
  Scalar lr_;
  Scalar momentum_;
  Scalar clip_;
  std::map<std::string, Mat<Scalar>> velocity_;
};

/// Adam with bias correction and optional global-norm clipping.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(Scalar lr, Scalar clip_norm = Scalar(0), Scalar beta1 = Scalar(0.9), Scalar beta2 = Scalar(0.999),
                Scalar eps = Scalar(1e-8))
      : lr_(lr), clip_(clip_norm), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(const ParamList<Scalar>& params) {
    ++t_;
    Scalar factor = Scalar(1);
    if (clip_ > Scalar(0)) {
      const double n = grad_norm(params);
      if (n > double(clip_)) factor = static_cast<Scalar>(double(clip_) / n);
    }
    const Scalar c1 = Scalar(1) - std::pow(b1_, Scalar(t_));
    const Scalar c2 = Scalar(1) - std::pow(b2_, Scalar(t_));
    for (Tensor<Scalar>* p : params) {
      if (!p->requires_grad || p->grad.size() == 0) continue;
      auto& [m, v] = moments_[p->name];
      if (m.size() == 0) {
        m = Mat<Scalar>::Zero(p->value.rows(), p->value.cols());
        v = m;
      }
      const Mat<Scalar> g = factor * p->grad;
      m = b1_ * m + (Scalar(1) - b1_) * g;
      v = b2_ * v + (Scalar(1) - b2_) * g.cwiseProduct(g);
      p->value.array() -= lr_ * (m.array() / c1) / ((v.array() / c2).sqrt() + eps_);
    }
  }

  void set_lr(Scalar lr) { lr_ = lr; }
  Scalar lr() const { return lr_; }

 private:
  Scalar lr_, clip_, b1_, b2_, eps_;
  long t_ = 0;
  std::map<std::string, std::pair<Mat<Scalar>, Mat<Scalar>>> moments_;
};

}  // namespace svfuse::nn

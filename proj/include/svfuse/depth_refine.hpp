#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <vector>

#include "svfuse/geometry.hpp"
#include "svfuse/layers.hpp"

namespace svfuse {

using nn::Mat;
using nn::SpMat;

inline constexpr int kDepthScales = 4;

/// Row-major pixel vector (row = y * W + x) of an H x W map.
inline Eigen::VectorXd pixels_of(const Eigen::MatrixXd& map) {
  Eigen::VectorXd v(map.size());
  for (Eigen::Index y = 0; y < map.rows(); ++y)
    for (Eigen::Index x = 0; x < map.cols(); ++x) v(y * map.cols() + x) = map(y, x);
  return v;
}

inline Eigen::MatrixXd map_of(const Eigen::VectorXd& pixels, int height, int width) {
  if (pixels.size() != Eigen::Index(height) * width) throw std::invalid_argument("map_of: size mismatch");
  Eigen::MatrixXd m(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) m(y, x) = pixels(Eigen::Index(y) * width + x);
  return m;
}

/// RGB (HW x 3 in [0, 1], row = y * W + x) plus sparse depth (H x W metres,
/// 0 = missing). The valid mask is s_d > 0.
struct ImageFrame {
  Eigen::MatrixXd rgb;
  Eigen::MatrixXd sparse_depth;

  int height() const { return int(sparse_depth.rows()); }
  int width() const { return int(sparse_depth.cols()); }
  Eigen::MatrixXd mask() const { return (sparse_depth.array() > 0).cast<double>().matrix(); }
  Eigen::Index valid_count() const { return (sparse_depth.array() > 0).count(); }
};

/// Nearest-valid-pixel fill (exact Euclidean, two-pass lower envelope).
inline Eigen::MatrixXd init_depth(const Eigen::MatrixXd& sparse) {
  const int H = int(sparse.rows()), W = int(sparse.cols());
  if ((sparse.array() > 0).count() == 0) throw std::invalid_argument("no sparse depth");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  // column pass: nearest valid row per (y, x)
  Eigen::MatrixXd f(H, W);
  Eigen::MatrixXi src_row(H, W);
  for (int x = 0; x < W; ++x) {
    int last = -1;
    for (int y = 0; y < H; ++y) {
      if (sparse(y, x) > 0) last = y;
      src_row(y, x) = last;
    }
    int next = -1;
    for (int y = H - 1; y >= 0; --y) {
      if (sparse(y, x) > 0) next = y;
      const int a = src_row(y, x);
      int best = a;
      if (next >= 0 && (a < 0 || next - y < y - a)) best = next;
      src_row(y, x) = best;
      f(y, x) = best < 0 ? kInf : double(best - y) * (best - y);
    }
  }
  // row pass over parabolas (x - q)^2 + f(y, q)
  Eigen::MatrixXd out(H, W);
  std::vector<int> v(static_cast<std::size_t>(W));
  std::vector<double> z(static_cast<std::size_t>(W) + 1);
  for (int y = 0; y < H; ++y) {
    int k = -1;
    for (int q = 0; q < W; ++q) {
      if (f(y, q) == kInf) continue;
      double s = -kInf;
      while (k >= 0) {
        const int p = v[std::size_t(k)];
        s = ((f(y, q) + double(q) * q) - (f(y, p) + double(p) * p)) / (2.0 * (q - p));
        if (s <= z[std::size_t(k)]) {
          --k;
          continue;
        }
        break;
      }
      ++k;
      v[std::size_t(k)] = q;
      z[std::size_t(k)] = k == 0 ? -kInf : s;
      z[std::size_t(k) + 1] = kInf;
    }
    int j = 0;
    for (int x = 0; x < W; ++x) {
      while (z[std::size_t(j) + 1] < x) ++j;
      const int q = v[std::size_t(j)];
      out(y, x) = sparse(src_row(y, q), q);
    }
  }
  return out;
}

/// 2x2 mean over valid children; missing where no child is valid.
inline Eigen::MatrixXd downsample_sparse(const Eigen::MatrixXd& sparse) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(sparse.rows() / 2, sparse.cols() / 2);
  for (Eigen::Index y = 0; y < out.rows(); ++y)
    for (Eigen::Index x = 0; x < out.cols(); ++x) {
      double s = 0;
      int n = 0;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx)
          if (const double d = sparse(2 * y + dy, 2 * x + dx); d > 0) {
            s += d;
            ++n;
          }
      if (n) out(y, x) = s / n;
    }
  return out;
}

inline Eigen::MatrixXd downsample_dense(const Eigen::MatrixXd& m) {
  Eigen::MatrixXd out(m.rows() / 2, m.cols() / 2);
  for (Eigen::Index y = 0; y < out.rows(); ++y)
    for (Eigen::Index x = 0; x < out.cols(); ++x)
      out(y, x) = 0.25 * (m(2 * y, 2 * x) + m(2 * y + 1, 2 * x) + m(2 * y, 2 * x + 1) + m(2 * y + 1, 2 * x + 1));
  return out;
}

/// Bilinear x2 upsampling of an H x W map (same operator as the tape path).
inline Eigen::MatrixXd upsample_map(const Eigen::MatrixXd& m) {
  const int H = int(m.rows()), W = int(m.cols());
  const Eigen::VectorXd up = *nn::upsample2_operator<double>(H, W) * pixels_of(m);
  return map_of(up, 2 * H, 2 * W);
}

/// Forward differences (d/dx, d/dy) with replicate boundary: HW x 2.
template <typename Scalar>
std::shared_ptr<const SpMat<Scalar>> forward_difference_operator(int height, int width, int axis) {
  std::vector<Eigen::Triplet<Scalar>> trip;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const int r = y * width + x;
      const bool edge = axis == 0 ? x + 1 >= width : y + 1 >= height;
      if (edge) continue;
      trip.emplace_back(r, axis == 0 ? r + 1 : r + width, Scalar(1));
      trip.emplace_back(r, r, Scalar(-1));
    }
  auto S = std::make_shared<SpMat<Scalar>>(height * width, height * width);
  S->setFromTriplets(trip.begin(), trip.end());
  return S;
}

template <typename Scalar>
nn::Var<Scalar> depth_gradient(const nn::Var<Scalar>& d, int height, int width) {
  return nn::concat_cols<Scalar>({nn::spmm(forward_difference_operator<Scalar>(height, width, 0), d),
                                  nn::spmm(forward_difference_operator<Scalar>(height, width, 1), d)});
}

struct DepthConfig {
  Eigen::Index channels = 16;
  Eigen::Index camera_embedding = 8;
  double depth_scale = 10.0;  // metres per network unit
  std::array<int, kDepthScales> iterations{4, 4, 4, 4};  // per scale, finest first
  std::array<double, kDepthScales> scale_weights{1.0, 0.5, 0.25, 0.125};
  double min_depth = 0.1;
  double max_depth = 500.0;
};

/// Normalized calibration values fed to the camera embedding.
template <typename Scalar>
Eigen::Matrix<double, 1, 16> camera_token(const CameraModel<Scalar>& cam) {
  Eigen::Matrix<double, 16, 1> v = cam.calibration_vector().template cast<double>();
  v(0) /= cam.width;
  v(1) /= cam.height;
  v(2) /= cam.width;
  v(3) /= cam.height;
  v.tail<3>() /= 10.0;
  return v.transpose();
}

template <typename Scalar>
struct FeatureMaps {
  std::array<nn::Var<Scalar>, kDepthScales> maps;  // strides 1, 2, 4, 8
  std::array<int, kDepthScales> heights{}, widths{};
};

/// Per-scale depth after refinement (finest first) and the final C_dg.
template <typename Scalar>
struct RefinementTrace {
  std::array<nn::Var<Scalar>, kDepthScales> depth;  // HW_s x 1
  nn::Var<Scalar> confidence;                       // HW x 1 at full resolution
  std::array<int, kDepthScales> heights{}, widths{};
};

template <typename Scalar>
struct DepthRefiner {
  DepthConfig cfg;
  nn::Linear<Scalar> camera_proj;
  std::array<nn::Conv2d<Scalar>, kDepthScales> encoder;
  nn::Linear<Scalar> context;  // C_inp head
  nn::MguCell<Scalar> mgu;
  nn::Linear<Scalar> f_g;
  nn::Conv2d<Scalar> f_conf;
  nn::Conv2d<Scalar> update1, update2;
  nn::Linear<Scalar> update_head;

  DepthRefiner() = default;
  DepthRefiner(const std::string& name, const DepthConfig& c, Rng& rng) : cfg(c) {
    const Eigen::Index C = c.channels;
    camera_proj = nn::Linear<Scalar>(name + ".camera_proj", 16, c.camera_embedding, rng);
    encoder[0] = nn::Conv2d<Scalar>(name + ".enc0", 5 + c.camera_embedding, C, rng);
    for (std::size_t s = 1; s < encoder.size(); ++s)
      encoder[s] = nn::Conv2d<Scalar>(name + ".enc" + std::to_string(s), C, C, rng);
    context = nn::Linear<Scalar>(name + ".context", C, 1, rng);
    mgu = nn::MguCell<Scalar>(name + ".mgu", C + 4, C, rng);
    f_g = nn::Linear<Scalar>(name + ".f_g", C, 2, rng);
    f_conf = nn::Conv2d<Scalar>(name + ".f_conf", C, 1, rng);
    update1 = nn::Conv2d<Scalar>(name + ".update1", 5, C, rng);
    update2 = nn::Conv2d<Scalar>(name + ".update2", C, C, rng);
    update_head = nn::Linear<Scalar>(name + ".update_head", C, 1, rng);
    update_head.zero();  // refinement starts as the identity
  }

  void collect(nn::ParamList<Scalar>& out) {
    camera_proj.collect(out);
    for (auto& e : encoder) e.collect(out);
    context.collect(out);
    mgu.collect(out);
    f_g.collect(out);
    f_conf.collect(out);
    update1.collect(out);
    update2.collect(out);
    update_head.collect(out);
  }
};

template <typename Scalar>
void check_frame(const ImageFrame& frame, const CameraModel<Scalar>& cam) {
  const int H = frame.height(), W = frame.width();
  if (H != cam.height || W != cam.width) throw std::invalid_argument("depth_refine: frame does not match the camera");
  if (frame.rgb.rows() != Eigen::Index(H) * W || frame.rgb.cols() != 3)
    throw std::invalid_argument("depth_refine: rgb must be HW x 3");
  if (H % 8 || W % 8) throw std::invalid_argument("depth_refine: image size must be a multiple of 8");
}

template <typename Scalar>
FeatureMaps<Scalar> encode_image(nn::Tape<Scalar>& t, const DepthRefiner<Scalar>& m, const ImageFrame& frame,
                                 const CameraModel<Scalar>& cam) {
  check_frame(frame, cam);
  const int H = frame.height(), W = frame.width();
  const Eigen::Index HW = Eigen::Index(H) * W;
  Mat<Scalar> inputs(HW, 5);
  inputs.leftCols(3) = frame.rgb.cast<Scalar>();
  inputs.col(3) = (pixels_of(frame.sparse_depth) / m.cfg.depth_scale).template cast<Scalar>();
  inputs.col(4) = pixels_of(frame.mask()).cast<Scalar>();
  auto token = m.camera_proj(t.constant(camera_token(cam).template cast<Scalar>().eval()));
  auto tokens = nn::matmul(t.constant(Mat<Scalar>::Ones(HW, 1)), token);
  FeatureMaps<Scalar> f;
  f.heights[0] = H;
  f.widths[0] = W;
  f.maps[0] = nn::relu(m.encoder[0](nn::concat_cols<Scalar>({t.constant(inputs), tokens}), H, W));
  for (std::size_t s = 1; s < std::size_t(kDepthScales); ++s) {
    const int h = f.heights[s - 1], w = f.widths[s - 1];
    f.heights[s] = h / 2;
    f.widths[s] = w / 2;
    auto pooled = nn::spmm(nn::avgpool2_operator<Scalar>(h, w), f.maps[s - 1]);
    f.maps[s] = nn::relu(m.encoder[s](pooled, h / 2, w / 2));
  }
  return f;
}

/// State of one scale: depth, hidden grid, confidences, all HW_s rows.
template <typename Scalar>
struct DepthState {
  nn::Var<Scalar> depth;
  nn::Var<Scalar> hidden;
  nn::Var<Scalar> c_inp;
  nn::Var<Scalar> c_dg;
};

/// One MGU-gated update at a given scale.
template <typename Scalar>
DepthState<Scalar> refine_step(const DepthRefiner<Scalar>& m, const DepthState<Scalar>& state,
                               const nn::Var<Scalar>& feats, const Eigen::VectorXd& sparse, const Eigen::VectorXd& mask,
                               int height, int width) {
  nn::Tape<Scalar>& t = *state.depth.tape;
  const Scalar inv = Scalar(1.0 / m.cfg.depth_scale);
  auto d = state.depth;
  auto grad = nn::scale(depth_gradient(d, height, width), inv);
  auto residual = nn::scale(nn::mul(nn::sub(d, t.constant(sparse.cast<Scalar>().eval())), t.constant(mask.cast<Scalar>().eval())), inv);
  auto x = nn::concat_cols<Scalar>({feats, nn::scale(d, inv), grad, residual});
  DepthState<Scalar> next;
  next.hidden = m.mgu(x, state.hidden);
  auto g = m.f_g(next.hidden);
  next.c_dg = nn::sigmoid(m.f_conf(next.hidden, height, width));
  next.c_inp = state.c_inp;
  auto u = nn::concat_cols<Scalar>({nn::sub(grad, g), residual, next.c_dg, state.c_inp});
  u = nn::relu(m.update1(u, height, width));
  u = nn::relu(m.update2(u, height, width));
  auto delta = m.update_head(u);
  next.depth = nn::clamp(nn::sub(d, nn::scale(delta, Scalar(m.cfg.depth_scale))), Scalar(m.cfg.min_depth),
                         Scalar(m.cfg.max_depth));
  return next;
}

/// Coarse-to-fine refinement on a tape. The coarsest scale starts from the
/// nearest-neighbour fill of the downsampled sparse depth.
template <typename Scalar>
RefinementTrace<Scalar> refine_on_tape(nn::Tape<Scalar>& t, const DepthRefiner<Scalar>& m, const ImageFrame& frame,
                                       const CameraModel<Scalar>& cam) {
  const FeatureMaps<Scalar> f = encode_image(t, m, frame, cam);
  std::array<Eigen::MatrixXd, kDepthScales> sparse;
  sparse[0] = frame.sparse_depth;
  for (std::size_t s = 1; s < sparse.size(); ++s) sparse[s] = downsample_sparse(sparse[s - 1]);
  RefinementTrace<Scalar> trace;
  trace.heights = f.heights;
  trace.widths = f.widths;
  const Eigen::MatrixXd d0 = init_depth(sparse[kDepthScales - 1]);
  nn::Var<Scalar> d = t.constant(pixels_of(d0).cast<Scalar>().eval());
  for (int s = kDepthScales - 1; s >= 0; --s) {
    const auto si = std::size_t(s);
    const int h = f.heights[si], w = f.widths[si];
    const Eigen::VectorXd sd = pixels_of(sparse[si]);
    const Eigen::VectorXd mk = (sd.array() > 0).cast<double>().matrix();
    DepthState<Scalar> st;
    st.depth = d;
    st.hidden = t.constant(Mat<Scalar>::Zero(Eigen::Index(h) * w, m.cfg.channels));
    st.c_inp = nn::sigmoid(m.context(f.maps[si]));
    for (int it = 0; it < m.cfg.iterations[si]; ++it) st = refine_step(m, st, f.maps[si], sd, mk, h, w);
    trace.depth[si] = st.depth;
    if (s == 0) {
      trace.confidence = st.c_dg.valid() ? st.c_dg : t.constant(Mat<Scalar>::Zero(Eigen::Index(h) * w, 1));
    } else {
      d = nn::spmm(nn::upsample2_operator<Scalar>(h, w), st.depth);
    }
  }
  return trace;
}

/// Weighted per-scale L1 against ground truth (block-averaged per scale).
/// Pixels with gt <= 0 carry no depth; a coarse pixel counts only when all
/// of its fine pixels do.
template <typename Scalar>
nn::Var<Scalar> depth_loss(const RefinementTrace<Scalar>& trace, const Eigen::MatrixXd& gt, const DepthConfig& cfg) {
  nn::Tape<Scalar>& t = *trace.depth[0].tape;
  Eigen::MatrixXd g = gt;
  Eigen::MatrixXd valid = (gt.array() > 0).cast<double>().matrix();
  nn::Var<Scalar> total;
  for (std::size_t s = 0; s < std::size_t(kDepthScales); ++s) {
    if (s > 0) {
      g = downsample_dense(g);
      valid = (downsample_dense(valid).array() > 1 - 1e-9).cast<double>().matrix();
    }
    const double n = valid.sum();
    if (cfg.scale_weights[s] == 0 || n == 0) continue;
    const Eigen::VectorXd mask = pixels_of(valid);
    auto masked = nn::mul(trace.depth[s], t.constant(mask.cast<Scalar>().eval()));
    auto target = t.constant(pixels_of(g).cwiseProduct(mask).cast<Scalar>().eval());
    auto l = nn::scale(nn::l1(masked, target), Scalar(cfg.scale_weights[s] * double(mask.size()) / n));
    total = total.valid() ? nn::add(total, l) : l;
  }
  if (!total.valid()) throw std::invalid_argument("depth_loss: no scale has weight and valid ground truth");
  return total;
}

struct DepthResult {
  Eigen::MatrixXd depth;
  Eigen::MatrixXd confidence;
};

template <typename Scalar>
DepthResult run_refinement(const DepthRefiner<Scalar>& m, const ImageFrame& frame, const CameraModel<Scalar>& cam) {
  nn::Tape<Scalar> t(false);
  const auto trace = refine_on_tape(t, m, frame, cam);
  const int H = frame.height(), W = frame.width();
  return {map_of(trace.depth[0].value().template cast<double>(), H, W),
          map_of(trace.confidence.value().template cast<double>(), H, W)};
}

struct DepthMetrics {
  double mae = 0.0;
  double mse = 0.0;
};

inline DepthMetrics depth_metrics(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, const Eigen::MatrixXd& mask) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols() || mask.rows() != gt.rows() || mask.cols() != gt.cols())
    throw std::invalid_argument("depth_metrics: shape mismatch");
  const auto m = (mask.array() != 0);
  const Eigen::Index n = m.count();
  if (n == 0) throw std::invalid_argument("depth_metrics: empty mask");
  const Eigen::ArrayXXd e = m.select(pred.array() - gt.array(), 0.0);
  return {e.abs().sum() / double(n), e.square().sum() / double(n)};
}

}  // namespace svfuse

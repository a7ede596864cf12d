#pragma once

// Random inputs and reference implementations shared by the unit tests and
// the acceptance binary.

#include <cmath>
#include <string>
#include <vector>

#include "svfuse/rng.hpp"
#include "svfuse/temporal.hpp"

namespace svfuse::testing {

inline GridSpec cube_spec(double base, double half) {
  GridSpec s;
  s.base_size = base;
  s.extent = Eigen::AlignedBox3d(Eigen::Vector3d::Constant(-half), Eigen::Vector3d::Constant(half));
  return s;
}

/// Random subset of an n^3 block centred on the origin, random features in
/// [-1, 1] and velocities in [-vmax, vmax].
inline SparseVoxelGrid<double> random_block(Rng& rng, const GridSpec& spec, int scale, int n, double fill,
                                            Eigen::Index dim, double vmax = 0) {
  std::vector<Eigen::Vector3i> coords;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        if (rng.uniform() < fill) coords.emplace_back(i - n / 2, j - n / 2, k - n / 2);
  const auto m = Eigen::Index(coords.size());
  nn::Mat<double> f(m, dim), v(m, 3);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.uniform(-1, 1);
  for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.uniform(-vmax, vmax);
  return SparseVoxelGrid<double>::from_sorted(spec, scale, coords, f, v, std::vector<int>(std::size_t(m), 1));
}

/// Pyramid over `base` (scale 1); coarser levels are downsampled and, with
/// `rng`, get fresh random features.
inline FeaturePyramid<double> pyramid_from(const SparseVoxelGrid<double>& base, Rng* rng) {
  FeaturePyramid<double> p;
  p.levels[0] = base;
  for (std::size_t l = 1; l < p.levels.size(); ++l) {
    p.levels[l] = downsample(p.levels[l - 1]);
    if (rng) {
      nn::Mat<double> f = p.levels[l].features();
      for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng->uniform(-1, 1);
      p.levels[l] = p.levels[l].with_features(f);
    }
  }
  return p;
}

inline FeaturePyramid<double> random_pyramid(Rng& rng, const GridSpec& spec, int n, double fill, Eigen::Index C) {
  std::vector<Eigen::Vector3i> coords;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        if (rng.uniform() < fill) coords.emplace_back(i - n / 2, j - n / 2, k - n / 2);
  const auto m = Eigen::Index(coords.size());
  nn::Mat<double> f(m, C);
  for (Eigen::Index i = 0; i < f.size(); ++i) f.data()[i] = rng.uniform(-1, 1);
  auto base = SparseVoxelGrid<double>::from_sorted(spec, 1, coords, f, nn::Mat<double>::Zero(m, 3),
                                                   std::vector<int>(std::size_t(m), 1));
  return pyramid_from(base, &rng);
}

/// Full attention over every (query, key) pair with out-of-window pairs masked.
inline nn::Mat<double> dense_masked_attention(const SparseVoxelGrid<double>& cur, const SparseVoxelGrid<double>& past,
                                              const TemporalAttention<double>& attn) {
  const nn::Mat<double> X = cur.features(), Y = past.features();
  const int H = attn.heads;
  const Eigen::Index d = X.cols(), dh = d / H;
  const nn::Mat<double> Q = X * attn.wq.value, K = Y * attn.wk.value, V = Y * attn.wv.value;
  nn::Mat<double> out = X;
  for (int h = 0; h < H; ++h) {
    Eigen::MatrixXd S = Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose() / std::sqrt(double(dh));
    for (Eigen::Index i = 0; i < S.rows(); ++i) {
      Eigen::VectorXd w = Eigen::VectorXd::Zero(S.cols());
      double z = 0;
      for (Eigen::Index j = 0; j < S.cols(); ++j) {
        const Eigen::Vector3i diff = cur.coords()[std::size_t(i)] - past.coords()[std::size_t(j)];
        if (diff.cwiseAbs().maxCoeff() <= attn.window.radius) z += (w(j) = std::exp(S(i, j)));
      }
      if (z > 0) out.block(i, h * dh, 1, dh) += (w / z).transpose() * V.middleCols(h * dh, dh);
    }
  }
  return out;
}

inline nn::Tensor<double> random_tensor(const std::string& name, Eigen::Index r, Eigen::Index c, Rng& rng,
                                        double lo = -1, double hi = 1) {
  nn::Tensor<double> t(name, r, c);
  for (Eigen::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = rng.uniform(lo, hi);
  return t;
}

/// Overwrites every value with U(-a, a).
inline void randomize(const nn::ParamList<double>& params, Rng& rng, double a) {
  for (auto* p : params)
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = rng.uniform(-a, a);
}

inline PointCloud random_points(Rng& rng, int n, double half) {
  PointCloud c(n);
  for (int i = 0; i < n; ++i) {
    c.xyz.col(i) = Eigen::Vector3d(rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(-half, half));
    c.radial_velocity(i) = rng.uniform(-30, 30);
    c.intensity(i) = rng.uniform();
  }
  return c;
}

}  // namespace svfuse::testing

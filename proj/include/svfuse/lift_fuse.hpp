#pragma once

#include <array>
#include <memory>
#include <stdexcept>
#include <vector>

#include "svfuse/geometry.hpp"
#include "svfuse/layers.hpp"
#include "svfuse/point_cloud.hpp"
#include "svfuse/sparse_grid.hpp"

namespace svfuse {

// ---------------------------------------------------------------------------
// Camera lifting
// ---------------------------------------------------------------------------

/// Lifting structure for one camera: the occupied cells and the mean
/// operator from image rows (y * W + x) to cells.
template <typename Scalar>
struct LiftPlan {
  SparseVoxelGrid<Scalar> grid;
  std::shared_ptr<const SpMat<Scalar>> op;
  Eigen::Index lifted_pixels = 0;
};

/// Unprojects every `stride`-th pixel with positive depth and voxelizes the
/// resulting points at scale 1.
template <typename Scalar>
LiftPlan<Scalar> plan_lift(const Eigen::MatrixXd& depth, const CameraModel<double>& cam, const GridSpec& spec,
                           int stride = 2) {
  if (stride < 1) throw std::invalid_argument("plan_lift: stride must be >= 1");
  if (depth.rows() != cam.height || depth.cols() != cam.width) {
    throw std::invalid_argument("plan_lift: depth map does not match the camera size");
  }
  std::vector<int> pixel;
  std::vector<Eigen::Vector3i> target;
  for (int v = 0; v < cam.height; v += stride)
    for (int u = 0; u < cam.width; u += stride) {
      const double d = depth(v, u);
      if (!(d > 0)) continue;
      const Eigen::Vector3d p = unproject_pixel(double(u), double(v), d, cam);
      if (!spec.contains(p)) continue;
      pixel.push_back(v * cam.width + u);
      target.push_back(spec.locate(p, 1));
    }
  const CellAssignment a = assign_cells(target, {});
  std::vector<Eigen::Triplet<Scalar>> trip;
  for (std::size_t i = 0; i < pixel.size(); ++i) {
    const int r = a.row_of_item[i];
    trip.emplace_back(r, pixel[i], Scalar(1) / Scalar(a.items_per_cell[std::size_t(r)]));
  }
  auto op = std::make_shared<SpMat<Scalar>>(Eigen::Index(a.cells.size()), Eigen::Index(cam.height) * cam.width);
  op->setFromTriplets(trip.begin(), trip.end());
  const auto m = Eigen::Index(a.cells.size());
  LiftPlan<Scalar> plan;
  plan.grid = SparseVoxelGrid<Scalar>::from_sorted(spec, 1, a.cells, Mat<Scalar>(m, 0), Mat<Scalar>::Zero(m, 3),
                                                   a.items_per_cell);
  plan.op = op;
  plan.lifted_pixels = Eigen::Index(pixel.size());
  return plan;
}

/// F_C: image features (H*W x C) averaged into the cells their pixels lift to.
template <typename Scalar>
SparseVoxelGrid<Scalar> lift_camera_features(const Mat<Scalar>& image_features, const Eigen::MatrixXd& depth,
                                             const CameraModel<double>& cam, const GridSpec& spec, int stride = 2) {
  const LiftPlan<Scalar> plan = plan_lift<Scalar>(depth, cam, spec, stride);
  if (image_features.rows() != plan.op->cols()) {
    throw nn::ShapeError("lift_camera_features: " + nn::shape_str(image_features.rows(), image_features.cols()) +
                         " features for a " + std::to_string(cam.height) + "x" + std::to_string(cam.width) + " image");
  }
  return plan.grid.with_features((*plan.op) * image_features);
}

// ---------------------------------------------------------------------------
// LiDAR encoder (per-point MLP, max over each voxel)
// ---------------------------------------------------------------------------

template <typename Scalar>
struct LidarEncoder {
  nn::Mlp<Scalar> mlp;
  Scalar velocity_scale = Scalar(0.1);

  LidarEncoder() = default;
  LidarEncoder(const std::string& name, Eigen::Index hidden, Eigen::Index out, Rng& rng)
      : mlp(name, {kVoxelPointFeatures, hidden, out}, rng) {}

  Eigen::Index out_features() const { return mlp.layers.back().out_features(); }

  Mat<Scalar> scaled_inputs(const Mat<Scalar>& point_features) const {
    Mat<Scalar> x = point_features;
    if (x.rows() > 0) x.col(3) *= velocity_scale;
    return x;
  }

  /// Per-point embeddings (before pooling).
  nn::Var<Scalar> embed(const nn::Var<Scalar>& inputs) const { return mlp(inputs); }

  nn::Var<Scalar> operator()(nn::Tape<Scalar>& tape, const PointVoxelization<Scalar>& vox) const {
    if (vox.point_features.rows() == 0) return tape.constant(Mat<Scalar>::Zero(0, out_features()));
    auto e = embed(tape.constant(scaled_inputs(vox.point_features)));
    return nn::segment_max(e, vox.point_row, vox.grid.size());
  }

  void collect(nn::ParamList<Scalar>& out) { mlp.collect(out); }
};

/// F_L: voxelized cloud with encoder features; velocity/count aggregates kept.
template <typename Scalar>
SparseVoxelGrid<Scalar> encode_lidar(const PointCloud& cloud, const GridSpec& spec, const LidarEncoder<Scalar>& enc) {
  const PointVoxelization<Scalar> vox = voxelize_points<Scalar>(cloud, spec);
  nn::Tape<Scalar> tape(false);
  return vox.grid.with_features(enc(tape, vox).value());
}

// ---------------------------------------------------------------------------
// Sparse 3x3x3 convolution
// ---------------------------------------------------------------------------

template <typename Scalar>
struct SparseConv3d {
  nn::Linear<Scalar> lin;  // (27 C_in) -> C_out

  SparseConv3d() = default;
  SparseConv3d(const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng) : lin(name, 27 * in, out, rng) {}

  /// `table` from neighbor_table(out_grid, in_grid, 1).
  nn::Var<Scalar> operator()(const nn::Var<Scalar>& x, std::shared_ptr<const nn::IndexTable> table) const {
    return lin(nn::gather_neighbors(x, table));
  }

  void collect(nn::ParamList<Scalar>& out) { lin.collect(out); }
  void zero() { lin.zero(); }
};

// ---------------------------------------------------------------------------
// Camera-LiDAR fusion
// ---------------------------------------------------------------------------

enum class Provenance : unsigned char { kCameraOnly, kLidarOnly, kBoth };

/// Union structure of a camera and a LiDAR grid.
template <typename Scalar>
struct FusionPlan {
  SparseVoxelGrid<Scalar> grid;  // union cells, LiDAR velocity, summed counts
  std::shared_ptr<const std::vector<int>> camera_row;
  std::shared_ptr<const std::vector<int>> lidar_row;
  std::vector<Provenance> provenance;
  std::shared_ptr<const nn::IndexTable> neighbors;
  std::size_t m = 0;  // LiDAR-occupied
  std::size_t n = 0;  // camera-occupied
  std::size_t o = 0;  // both

  std::size_t q() const { return grid.coords().size(); }
};

template <typename Scalar>
FusionPlan<Scalar> plan_fusion(const SparseVoxelGrid<Scalar>& cam, const SparseVoxelGrid<Scalar>& lidar) {
  if (!(cam.spec() == lidar.spec()) || cam.scale() != lidar.scale()) {
    throw std::invalid_argument("fuse: camera and LiDAR grids use different lattices");
  }
  std::vector<Eigen::Vector3i> keys;
  keys.reserve(cam.coords().size() + lidar.coords().size());
  std::merge(cam.coords().begin(), cam.coords().end(), lidar.coords().begin(), lidar.coords().end(),
             std::back_inserter(keys), IjkLess{});
  keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
  const auto q = Eigen::Index(keys.size());
  auto crow = std::make_shared<std::vector<int>>(keys.size());
  auto lrow = std::make_shared<std::vector<int>>(keys.size());
  FusionPlan<Scalar> plan;
  plan.provenance.resize(keys.size());
  Mat<Scalar> vel = Mat<Scalar>::Zero(q, 3);
  std::vector<int> counts(keys.size(), 0);
  for (std::size_t r = 0; r < keys.size(); ++r) {
    const int c = cam.find(keys[r]), l = lidar.find(keys[r]);
    (*crow)[r] = c;
    (*lrow)[r] = l;
    plan.provenance[r] = c >= 0 && l >= 0 ? Provenance::kBoth : (c >= 0 ? Provenance::kCameraOnly : Provenance::kLidarOnly);
    if (l >= 0) {
      vel.row(Eigen::Index(r)) = lidar.velocity().row(l);
      counts[r] += lidar.counts()[std::size_t(l)];
    }
    if (c >= 0) counts[r] += cam.counts()[std::size_t(c)];
    plan.o += c >= 0 && l >= 0;
  }
  plan.m = lidar.coords().size();
  plan.n = cam.coords().size();
  plan.grid = SparseVoxelGrid<Scalar>::from_sorted(cam.spec(), cam.scale(), std::move(keys), Mat<Scalar>(q, 0),
                                                   std::move(vel), std::move(counts));
  plan.camera_row = crow;
  plan.lidar_row = lrow;
  plan.neighbors = neighbor_table(plan.grid, plan.grid, 1);
  return plan;
}

/// Per-modality batch norm, zero fill, concat [camera | LiDAR], one sparse conv.
template <typename Scalar>
struct FusionLayer {
  nn::BatchNorm<Scalar> bn_camera;
  nn::BatchNorm<Scalar> bn_lidar;
  SparseConv3d<Scalar> conv;

  FusionLayer() = default;
  FusionLayer(const std::string& name, Eigen::Index modality_channels, Eigen::Index out, Rng& rng)
      : bn_camera(name + ".bn_camera", modality_channels),
        bn_lidar(name + ".bn_lidar", modality_channels),
        conv(name + ".conv", 2 * modality_channels, out, rng) {}

  /// Concatenated, normalised and zero-filled features before the conv.
  nn::Var<Scalar> pre_conv(const FusionPlan<Scalar>& plan, const nn::Var<Scalar>& cam, const nn::Var<Scalar>& lidar,
                           bool training) {
    auto c = nn::gather_rows(bn_camera(cam, training), plan.camera_row);
    auto l = nn::gather_rows(bn_lidar(lidar, training), plan.lidar_row);
    return nn::concat_cols<Scalar>({c, l});
  }

  nn::Var<Scalar> operator()(const FusionPlan<Scalar>& plan, const nn::Var<Scalar>& cam, const nn::Var<Scalar>& lidar,
                             bool training) {
    return conv(pre_conv(plan, cam, lidar, training), plan.neighbors);
  }

  void collect(nn::ParamList<Scalar>& out) {
    bn_camera.collect(out);
    bn_lidar.collect(out);
    conv.collect(out);
  }
};

template <typename Scalar>
struct FusedGrid {
  SparseVoxelGrid<Scalar> grid;
  Mat<Scalar> pre_conv;
  std::vector<Provenance> provenance;
  std::size_t m = 0, n = 0, o = 0;

  std::size_t q() const { return grid.coords().size(); }
};

/// Evaluation-mode fusion (running batch-norm statistics).
template <typename Scalar>
FusedGrid<Scalar> fuse(const SparseVoxelGrid<Scalar>& cam, const SparseVoxelGrid<Scalar>& lidar, FusionLayer<Scalar>& layer,
                       bool training = false) {
  const FusionPlan<Scalar> plan = plan_fusion(cam, lidar);
  nn::Tape<Scalar> tape(false);
  auto pre = layer.pre_conv(plan, tape.constant(cam.features()), tape.constant(lidar.features()), training);
  auto out = layer.conv(pre, plan.neighbors);
  FusedGrid<Scalar> f;
  f.grid = plan.grid.with_features(out.value());
  f.pre_conv = pre.value();
  f.provenance = plan.provenance;
  f.m = plan.m;
  f.n = plan.n;
  f.o = plan.o;
  return f;
}

// ---------------------------------------------------------------------------
// Late sparse encoding
// ---------------------------------------------------------------------------

/// Structure of the 4-level pyramid built from a scale-1 grid: level l is
/// the one-ring dilation of X_l, and X_{l+1} is the downsampled level l.
template <typename Scalar>
struct PyramidPlan {
  std::array<SparseVoxelGrid<Scalar>, kNumScales> levels;
  std::array<std::shared_ptr<const std::vector<int>>, kNumScales> source_row;
  std::array<std::shared_ptr<const nn::IndexTable>, kNumScales> neighbors;
  std::array<std::shared_ptr<const SpMat<Scalar>>, kNumScales - 1> down;
  std::array<std::size_t, kNumScales> input_cells{};  // |X_l|
};

template <typename Scalar>
PyramidPlan<Scalar> plan_pyramid(const SparseVoxelGrid<Scalar>& base) {
  PyramidPlan<Scalar> plan;
  SparseVoxelGrid<Scalar> x = base.with_features(Mat<Scalar>(base.size(), 0));
  for (int l = 0; l < kNumScales; ++l) {
    plan.input_cells[std::size_t(l)] = std::size_t(x.size());
    Dilated<Scalar> d = dilate(x, 1);
    plan.levels[std::size_t(l)] = std::move(d.grid);
    plan.source_row[std::size_t(l)] = d.source_row;
    plan.neighbors[std::size_t(l)] = neighbor_table(plan.levels[std::size_t(l)], plan.levels[std::size_t(l)], 1);
    if (l + 1 < kNumScales) {
      Downsampled<Scalar> ds = downsample_with_operator(plan.levels[std::size_t(l)]);
      plan.down[std::size_t(l)] = ds.mean_op;
      x = std::move(ds.grid);
    }
  }
  return plan;
}

/// Completion (one-ring dilation) then a sparse conv + ReLU at each level.
template <typename Scalar>
struct LateEncoder {
  std::array<SparseConv3d<Scalar>, kNumScales> blocks;

  LateEncoder() = default;
  LateEncoder(const std::string& name, Eigen::Index channels, Rng& rng) {
    for (int l = 0; l < kNumScales; ++l)
      blocks[std::size_t(l)] = SparseConv3d<Scalar>(name + ".level" + std::to_string(l + 1), channels, channels, rng);
  }

  std::array<nn::Var<Scalar>, kNumScales> operator()(const PyramidPlan<Scalar>& plan, nn::Var<Scalar> x) const {
    std::array<nn::Var<Scalar>, kNumScales> out;
    for (int l = 0; l < kNumScales; ++l) {
      const auto i = std::size_t(l);
      auto completed = nn::gather_rows(x, plan.source_row[i]);
      out[i] = nn::relu(blocks[i](completed, plan.neighbors[i]));
      if (l + 1 < kNumScales) x = nn::spmm(plan.down[i], out[i]);
    }
    return out;
  }

  void collect(nn::ParamList<Scalar>& out) {
    for (auto& b : blocks) b.collect(out);
  }
};

template <typename Scalar>
FeaturePyramid<Scalar> materialize(const PyramidPlan<Scalar>& plan, const std::array<Mat<Scalar>, kNumScales>& feats) {
  FeaturePyramid<Scalar> p;
  for (std::size_t l = 0; l < std::size_t(kNumScales); ++l) p.levels[l] = plan.levels[l].with_features(feats[l]);
  return p;
}

template <typename Scalar>
FeaturePyramid<Scalar> late_encode(const SparseVoxelGrid<Scalar>& fused, const LateEncoder<Scalar>& enc) {
  const PyramidPlan<Scalar> plan = plan_pyramid(fused);
  nn::Tape<Scalar> tape(false);
  auto vars = enc(plan, tape.constant(fused.features()));
  std::array<Mat<Scalar>, kNumScales> feats;
  for (std::size_t l = 0; l < std::size_t(kNumScales); ++l) feats[l] = vars[l].value();
  return materialize(plan, feats);
}

// ---------------------------------------------------------------------------
// BEV export
// ---------------------------------------------------------------------------

/// Dense top-down raster of one grid over the extent: cell (i, j) of the
/// lattice lands at row i - min_ij.x(), column j - min_ij.y().
struct BevMap {
  Eigen::Vector2i min_ij = Eigen::Vector2i::Zero();
  std::vector<Eigen::MatrixXd> channels;
};

template <typename Scalar>
BevMap bev_project(const SparseVoxelGrid<Scalar>& g) {
  const GridSpec& spec = g.spec();
  const double s = g.voxel_size();
  BevMap bev;
  const Eigen::Vector3d lo = (spec.extent.min() - spec.origin) / s;
  const Eigen::Vector3d hi = (spec.extent.max() - spec.origin) / s;
  bev.min_ij = Eigen::Vector2i(int(std::floor(lo.x())), int(std::floor(lo.y())));
  const int nx = int(std::ceil(hi.x())) - bev.min_ij.x();
  const int ny = int(std::ceil(hi.y())) - bev.min_ij.y();
  bev.channels.assign(std::size_t(g.feature_dim()), Eigen::MatrixXd::Zero(nx, ny));
  Eigen::MatrixXi hits = Eigen::MatrixXi::Zero(nx, ny);
  for (Eigen::Index r = 0; r < g.size(); ++r) {
    const Eigen::Vector3i& c = g.coords()[std::size_t(r)];
    const int x = c.x() - bev.min_ij.x(), y = c.y() - bev.min_ij.y();
    if (x < 0 || y < 0 || x >= nx || y >= ny) continue;
    ++hits(x, y);
    for (Eigen::Index f = 0; f < g.feature_dim(); ++f) bev.channels[std::size_t(f)](x, y) += double(g.features()(r, f));
  }
  for (auto& ch : bev.channels)
    for (int x = 0; x < nx; ++x)
      for (int y = 0; y < ny; ++y)
        if (hits(x, y) > 0) ch(x, y) /= hits(x, y);
  return bev;
}

}  // namespace svfuse

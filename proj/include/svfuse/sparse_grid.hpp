#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "svfuse/point_cloud.hpp"
#include "svfuse/tape.hpp"
#include "svfuse/voxel_hash.hpp"

namespace svfuse {

using nn::Mat;
using nn::SpMat;

inline constexpr int kNumScales = 4;

/// Voxel lattice shared by all grids of one pipeline. Cell (i,j,k) at scale s
/// spans [origin + (i,j,k) * size(s), origin + (i,j,k,+1) * size(s)).
struct GridSpec {
  double base_size = 0.2;
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  Eigen::AlignedBox3d extent{Eigen::Vector3d(-100, -100, -5), Eigen::Vector3d(250, 100, 10)};

  double voxel_size(int scale) const { return base_size * double(1 << (scale - 1)); }

  Eigen::Vector3i locate(const Eigen::Vector3d& p, int scale) const {
    const Eigen::Vector3d u = (p - origin) / voxel_size(scale);
    return {int(std::floor(u.x())), int(std::floor(u.y())), int(std::floor(u.z()))};
  }

  Eigen::Vector3d cell_min(const Eigen::Vector3i& c, int scale) const {
    return origin + c.cast<double>() * voxel_size(scale);
  }

  Eigen::Vector3d cell_center(const Eigen::Vector3i& c, int scale) const {
    return origin + (c.cast<double>().array() + 0.5).matrix() * voxel_size(scale);
  }

  bool contains(const Eigen::Vector3d& p) const { return extent.contains(p); }

  /// A cell is inside the extent when its box overlaps the extent's interior.
  bool cell_in_extent(const Eigen::Vector3i& c, int scale) const {
    const Eigen::Vector3d lo = cell_min(c, scale);
    const Eigen::Vector3d hi = lo.array() + voxel_size(scale);
    return (lo.array() < extent.max().array()).all() && (hi.array() > extent.min().array()).all();
  }

  bool operator==(const GridSpec& o) const {
    return base_size == o.base_size && origin == o.origin && extent.min() == o.extent.min() &&
           extent.max() == o.extent.max();
  }
};

struct IjkLess {
  bool operator()(const Eigen::Vector3i& a, const Eigen::Vector3i& b) const {
    if (a.x() != b.x()) return a.x() < b.x();
    if (a.y() != b.y()) return a.y() < b.y();
    return a.z() < b.z();
  }
};

/// Hash-indexed sparse voxel grid. Rows (cells) are kept in sorted (i,j,k)
/// order so reductions over cells are deterministic.
template <typename Scalar>
class SparseVoxelGrid {
 public:
  SparseVoxelGrid() = default;
  SparseVoxelGrid(const GridSpec& spec, int scale, Eigen::Index feature_dim)
      : spec_(spec), scale_(scale), features_(0, feature_dim), velocity_(0, 3) {}

  /// `coords` must be sorted (IjkLess) and unique.
  static SparseVoxelGrid from_sorted(const GridSpec& spec, int scale, std::vector<Eigen::Vector3i> coords,
                                     Mat<Scalar> features, Mat<Scalar> velocity, std::vector<int> counts) {
    const auto n = static_cast<Eigen::Index>(coords.size());
    if (features.rows() != n || velocity.rows() != n || velocity.cols() != 3 ||
        counts.size() != coords.size()) {
      throw std::invalid_argument("SparseVoxelGrid: inconsistent cell arrays");
    }
    SparseVoxelGrid g;
    g.spec_ = spec;
    g.scale_ = scale;
    g.coords_ = std::move(coords);
    g.features_ = std::move(features);
    g.velocity_ = std::move(velocity);
    g.counts_ = std::move(counts);
    g.rebuild_index();
    return g;
  }

  Eigen::Index size() const { return static_cast<Eigen::Index>(coords_.size()); }
  bool empty() const { return coords_.empty(); }
  Eigen::Index feature_dim() const { return features_.cols(); }
  int scale() const { return scale_; }
  const GridSpec& spec() const { return spec_; }
  double voxel_size() const { return spec_.voxel_size(scale_); }

  const std::vector<Eigen::Vector3i>& coords() const { return coords_; }
  const Mat<Scalar>& features() const { return features_; }
  Mat<Scalar>& features() { return features_; }
  const Mat<Scalar>& velocity() const { return velocity_; }
  Mat<Scalar>& velocity() { return velocity_; }
  const std::vector<int>& counts() const { return counts_; }

  int find(const Eigen::Vector3i& c) const { return index_.find(VoxelCoord::from(c, scale_)); }
  bool contains(const Eigen::Vector3i& c) const { return find(c) >= 0; }
  Eigen::Vector3d center(Eigen::Index row) const { return spec_.cell_center(coords_[std::size_t(row)], scale_); }

  /// Same occupancy, different features.
  SparseVoxelGrid with_features(Mat<Scalar> f) const {
    if (f.rows() != size()) throw std::invalid_argument("with_features: row count mismatch");
    SparseVoxelGrid g = *this;
    g.features_ = std::move(f);
    return g;
  }

  const VoxelHashIndex& index() const { return index_; }

 private:
  void rebuild_index() {
    index_ = VoxelHashIndex(coords_.size());
    for (std::size_t r = 0; r < coords_.size(); ++r) index_.insert(VoxelCoord::from(coords_[r], scale_), int(r));
  }

  GridSpec spec_;
  int scale_ = 1;
  std::vector<Eigen::Vector3i> coords_;
  Mat<Scalar> features_;
  Mat<Scalar> velocity_;
  std::vector<int> counts_;
  VoxelHashIndex index_;
};

/// Four grids at scales 1..4; level(s) is the grid at scale s.
template <typename Scalar>
struct FeaturePyramid {
  std::array<SparseVoxelGrid<Scalar>, kNumScales> levels;

  SparseVoxelGrid<Scalar>& level(int scale) { return levels[std::size_t(scale - 1)]; }
  const SparseVoxelGrid<Scalar>& level(int scale) const { return levels[std::size_t(scale - 1)]; }
  Eigen::Index feature_dim() const {
    Eigen::Index d = 0;
    for (const auto& l : levels) d += l.feature_dim();
    return d;
  }
};

// ---------------------------------------------------------------------------
// Building grids from items with a target cell
// ---------------------------------------------------------------------------

/// Groups items by target cell (sorted), returning the cell list and, for
/// every item, its row. Items with `keep[i] == false` get row -1.
struct CellAssignment {
  std::vector<Eigen::Vector3i> cells;
  std::vector<int> row_of_item;
  std::vector<int> items_per_cell;
};

inline CellAssignment assign_cells(const std::vector<Eigen::Vector3i>& targets, const std::vector<char>& keep) {
  std::vector<int> order;
  order.reserve(targets.size());
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (keep.empty() || keep[i]) order.push_back(int(i));
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return IjkLess{}(targets[a], targets[b]); });
  CellAssignment out;
  out.row_of_item.assign(targets.size(), -1);
  for (int idx : order) {
    if (out.cells.empty() || out.cells.back() != targets[std::size_t(idx)]) {
      out.cells.push_back(targets[std::size_t(idx)]);
      out.items_per_cell.push_back(0);
    }
    out.row_of_item[std::size_t(idx)] = int(out.cells.size()) - 1;
    ++out.items_per_cell.back();
  }
  return out;
}

/// Mean-aggregation operator (cells x items) for an assignment.
template <typename Scalar>
std::shared_ptr<SpMat<Scalar>> mean_operator(const CellAssignment& a, Eigen::Index num_items) {
  std::vector<Eigen::Triplet<Scalar>> trip;
  for (std::size_t i = 0; i < a.row_of_item.size(); ++i) {
    const int r = a.row_of_item[i];
    if (r >= 0) trip.emplace_back(r, Eigen::Index(i), Scalar(1) / Scalar(a.items_per_cell[std::size_t(r)]));
  }
  auto S = std::make_shared<SpMat<Scalar>>(Eigen::Index(a.cells.size()), num_items);
  S->setFromTriplets(trip.begin(), trip.end());
  return S;
}

// ---------------------------------------------------------------------------
// voxelize
// ---------------------------------------------------------------------------

/// Point statistics carried by a raw voxelized cloud.
inline constexpr Eigen::Index kVoxelPointFeatures = 5;  // offset xyz / size, v_r, intensity

/// Voxelized cloud plus the per-point view used by point encoders.
template <typename Scalar>
struct PointVoxelization {
  SparseVoxelGrid<Scalar> grid;
  std::vector<int> point_row;  // cell row per kept point, in `point_features` order
  Mat<Scalar> point_features;  // kept points x kVoxelPointFeatures
};

/// Voxelizes at scale 1. Per cell: mean of (offset from cell centre / size,
/// v_r, intensity) as features, mean velocity vector (v_r along the ray),
/// point count. Points outside the extent are dropped. Kept points are
/// listed in value order, so the result does not depend on input order.
template <typename Scalar>
PointVoxelization<Scalar> voxelize_points(const PointCloud& cloud, const GridSpec& spec) {
  if (!(spec.base_size > 0)) throw std::invalid_argument("voxelize: base_size must be positive");
  const auto n = static_cast<std::size_t>(cloud.size());
  std::vector<int> order;
  order.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    if (spec.contains(cloud.xyz.col(Eigen::Index(i)))) order.push_back(int(i));
  auto point_less = [&](int a, int b) {
    for (int d = 0; d < 3; ++d)
      if (cloud.xyz(d, a) != cloud.xyz(d, b)) return cloud.xyz(d, a) < cloud.xyz(d, b);
    if (cloud.radial_velocity(a) != cloud.radial_velocity(b)) return cloud.radial_velocity(a) < cloud.radial_velocity(b);
    return cloud.intensity(a) < cloud.intensity(b);
  };
  std::sort(order.begin(), order.end(), point_less);
  const std::size_t kept = order.size();
  std::vector<Eigen::Vector3i> target(kept);
  for (std::size_t s = 0; s < kept; ++s) target[s] = spec.locate(cloud.xyz.col(order[s]), 1);
  const CellAssignment a = assign_cells(target, {});
  const auto m = static_cast<Eigen::Index>(a.cells.size());
  Eigen::MatrixXd pf(Eigen::Index(kept), kVoxelPointFeatures);
  Eigen::MatrixXd feat = Eigen::MatrixXd::Zero(m, kVoxelPointFeatures);
  Eigen::MatrixXd vel = Eigen::MatrixXd::Zero(m, 3);
  for (std::size_t s = 0; s < kept; ++s) {
    const int r = a.row_of_item[s];
    const auto i = Eigen::Index(order[s]);
    const Eigen::Vector3d off = (cloud.xyz.col(i) - spec.cell_center(a.cells[std::size_t(r)], 1)) / spec.base_size;
    pf.row(Eigen::Index(s)) << off.transpose(), cloud.radial_velocity(i), cloud.intensity(i);
    feat.row(r) += pf.row(Eigen::Index(s));
    vel.row(r) += (cloud.radial_velocity(i) * cloud.ray_direction(i)).transpose();
  }
  for (Eigen::Index r = 0; r < m; ++r) {
    const double inv = 1.0 / a.items_per_cell[std::size_t(r)];
    feat.row(r) *= inv;
    vel.row(r) *= inv;
  }
  PointVoxelization<Scalar> out;
  out.grid = SparseVoxelGrid<Scalar>::from_sorted(spec, 1, a.cells, feat.cast<Scalar>(), vel.cast<Scalar>(),
                                                  a.items_per_cell);
  out.point_row = a.row_of_item;
  out.point_features = pf.cast<Scalar>();
  return out;
}

template <typename Scalar>
SparseVoxelGrid<Scalar> voxelize(const PointCloud& cloud, const GridSpec& spec) {
  return voxelize_points<Scalar>(cloud, spec).grid;
}

// ---------------------------------------------------------------------------
// trilinear sampling
// ---------------------------------------------------------------------------

/// The 8 cell centres around a position with their trilinear weights.
/// Missing corners have row -1 and keep their weight (no renormalisation).
struct TrilinearStencil {
  std::array<int, 8> rows{};
  std::array<double, 8> weights{};
  std::array<Eigen::Vector3d, 8> dweights{};  // d weight / d position
  bool in_bounds = false;
};

template <typename Scalar>
TrilinearStencil trilinear_stencil(const SparseVoxelGrid<Scalar>& grid, const Eigen::Vector3d& p) {
  TrilinearStencil st;
  st.rows.fill(-1);
  st.weights.fill(0.0);
  for (auto& d : st.dweights) d.setZero();
  if (!grid.spec().contains(p)) return st;
  st.in_bounds = true;
  const double s = grid.voxel_size();
  const Eigen::Vector3d u = (p - grid.spec().origin) / s - Eigen::Vector3d::Constant(0.5);
  const Eigen::Vector3d fl(std::floor(u.x()), std::floor(u.y()), std::floor(u.z()));
  const Eigen::Vector3i base = fl.cast<int>();
  const Eigen::Vector3d f = u - fl;
  for (int c = 0; c < 8; ++c) {
    const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
    const double wx = bx ? f.x() : 1 - f.x();
    const double wy = by ? f.y() : 1 - f.y();
    const double wz = bz ? f.z() : 1 - f.z();
    st.weights[std::size_t(c)] = wx * wy * wz;
    st.dweights[std::size_t(c)] = Eigen::Vector3d((bx ? 1.0 : -1.0) * wy * wz, (by ? 1.0 : -1.0) * wx * wz,
                                                  (bz ? 1.0 : -1.0) * wx * wy) /
                                  s;
    st.rows[std::size_t(c)] = grid.find(base + Eigen::Vector3i(bx, by, bz));
  }
  return st;
}

template <typename Scalar>
struct TrilinearSample {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> feature;
  bool in_bounds = false;
};

/// Trilinear interpolation of cell features at a world position. Positions
/// outside the extent return a zero vector with in_bounds = false.
template <typename Scalar>
TrilinearSample<Scalar> trilinear_sample(const SparseVoxelGrid<Scalar>& grid, const Eigen::Vector3d& p) {
  TrilinearSample<Scalar> out;
  out.feature = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>::Zero(grid.feature_dim());
  const TrilinearStencil st = trilinear_stencil(grid, p);
  out.in_bounds = st.in_bounds;
  for (std::size_t c = 0; c < 8; ++c) {
    if (st.rows[c] >= 0) out.feature += Scalar(st.weights[c]) * grid.features().row(st.rows[c]).transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// downsample / dilate / neighbourhoods
// ---------------------------------------------------------------------------

template <typename Scalar>
struct Downsampled {
  SparseVoxelGrid<Scalar> grid;
  std::shared_ptr<const SpMat<Scalar>> mean_op;  // coarse x fine, mean over occupied children
};

/// Next-scale grid: a coarse cell is occupied iff one of its children is;
/// feature = mean of children, count = sum, velocity = count-weighted mean.
template <typename Scalar>
Downsampled<Scalar> downsample_with_operator(const SparseVoxelGrid<Scalar>& fine) {
  if (fine.scale() >= kNumScales) throw std::invalid_argument("downsample: already at the coarsest scale");
  std::vector<Eigen::Vector3i> parent(std::size_t(fine.size()));
  for (std::size_t r = 0; r < parent.size(); ++r) {
    const Eigen::Vector3i& c = fine.coords()[r];
    parent[r] = {floor_div(c.x(), 2), floor_div(c.y(), 2), floor_div(c.z(), 2)};
  }
  const CellAssignment a = assign_cells(parent, {});
  auto op = mean_operator<Scalar>(a, fine.size());
  const auto m = Eigen::Index(a.cells.size());
  Mat<Scalar> feat = (*op) * fine.features();
  Mat<Scalar> vel = Mat<Scalar>::Zero(m, 3);
  std::vector<int> counts(std::size_t(m), 0);
  std::vector<double> wsum(std::size_t(m), 0.0);
  for (std::size_t r = 0; r < parent.size(); ++r) {
    const int p = a.row_of_item[r];
    counts[std::size_t(p)] += fine.counts()[r];
    wsum[std::size_t(p)] += fine.counts()[r];
    vel.row(p) += Scalar(fine.counts()[r]) * fine.velocity().row(Eigen::Index(r));
  }
  for (Eigen::Index p = 0; p < m; ++p)
    if (wsum[std::size_t(p)] > 0) vel.row(p) /= Scalar(wsum[std::size_t(p)]);
  Downsampled<Scalar> out;
  out.grid = SparseVoxelGrid<Scalar>::from_sorted(fine.spec(), fine.scale() + 1, a.cells, std::move(feat),
                                                  std::move(vel), std::move(counts));
  out.mean_op = op;
  return out;
}

template <typename Scalar>
SparseVoxelGrid<Scalar> downsample(const SparseVoxelGrid<Scalar>& fine) {
  return downsample_with_operator(fine).grid;
}

template <typename Scalar>
struct Dilated {
  SparseVoxelGrid<Scalar> grid;
  std::shared_ptr<const std::vector<int>> source_row;  // new row -> old row or -1
};

/// Expands occupancy by a ring of `radius` cells (clipped to the extent).
/// Existing cells keep their data; new cells start with zero feature,
/// zero velocity and zero count.
template <typename Scalar>
Dilated<Scalar> dilate(const SparseVoxelGrid<Scalar>& g, int radius = 1) {
  std::vector<Eigen::Vector3i> cand;
  cand.reserve(std::size_t(g.size()) * std::size_t((2 * radius + 1) * (2 * radius + 1) * (2 * radius + 1)));
  for (const auto& c : g.coords())
    for (int dx = -radius; dx <= radius; ++dx)
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dz = -radius; dz <= radius; ++dz) {
          const Eigen::Vector3i n = c + Eigen::Vector3i(dx, dy, dz);
          if (g.spec().cell_in_extent(n, g.scale())) cand.push_back(n);
        }
  std::sort(cand.begin(), cand.end(), IjkLess{});
  cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
  const auto m = Eigen::Index(cand.size());
  auto src = std::make_shared<std::vector<int>>(cand.size(), -1);
  Mat<Scalar> feat = Mat<Scalar>::Zero(m, g.feature_dim());
  Mat<Scalar> vel = Mat<Scalar>::Zero(m, 3);
  std::vector<int> counts(cand.size(), 0);
  for (std::size_t r = 0; r < cand.size(); ++r) {
    const int s = g.find(cand[r]);
    (*src)[r] = s;
    if (s >= 0) {
      feat.row(Eigen::Index(r)) = g.features().row(s);
      vel.row(Eigen::Index(r)) = g.velocity().row(s);
      counts[r] = g.counts()[std::size_t(s)];
    }
  }
  Dilated<Scalar> out;
  out.grid = SparseVoxelGrid<Scalar>::from_sorted(g.spec(), g.scale(), std::move(cand), std::move(feat),
                                                  std::move(vel), std::move(counts));
  out.source_row = src;
  return out;
}

/// For every cell of `query`, the rows of `source` at offsets in
/// [-radius, radius]^3 (x-major order); -1 where unoccupied.
template <typename ScalarA, typename ScalarB>
std::shared_ptr<const nn::IndexTable> neighbor_table(const SparseVoxelGrid<ScalarA>& query,
                                                     const SparseVoxelGrid<ScalarB>& source, int radius = 1) {
  const int w = 2 * radius + 1;
  auto t = std::make_shared<nn::IndexTable>(query.size(), w * w * w);
  for (Eigen::Index r = 0; r < query.size(); ++r) {
    const Eigen::Vector3i& c = query.coords()[std::size_t(r)];
    int k = 0;
    for (int dx = -radius; dx <= radius; ++dx)
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dz = -radius; dz <= radius; ++dz) (*t)(r, k++) = source.find(c + Eigen::Vector3i(dx, dy, dz));
  }
  return t;
}

// ---------------------------------------------------------------------------
// diagnostics
// ---------------------------------------------------------------------------

struct MemoryStats {
  std::size_t cells = 0;
  std::size_t bytes = 0;
};

/// Bytes per cell: coordinate, features, velocity, count and two hash slots
/// (load factor 1/2).
template <typename Scalar>
std::size_t bytes_per_cell(Eigen::Index feature_dim) {
  return sizeof(Eigen::Vector3i) + std::size_t(feature_dim) * sizeof(Scalar) + 3 * sizeof(Scalar) + sizeof(int) +
         2 * VoxelHashIndex::slot_bytes();
}

template <typename Scalar>
MemoryStats memory_stats(const SparseVoxelGrid<Scalar>& g) {
  MemoryStats s;
  s.cells = std::size_t(g.size());
  s.bytes = s.cells * bytes_per_cell<Scalar>(g.feature_dim());
  return s;
}

/// JSON lines: {"ijk":[i,j,k],"scale":s,"feat":[...],"vel":[...],"count":n}
template <typename Scalar>
void dump_grid_jsonl(std::ostream& os, const SparseVoxelGrid<Scalar>& g) {
  auto num = [&os](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    os << buf;
  };
  for (Eigen::Index r = 0; r < g.size(); ++r) {
    const auto& c = g.coords()[std::size_t(r)];
    os << "{\"ijk\":[" << c.x() << "," << c.y() << "," << c.z() << "],\"scale\":" << g.scale() << ",\"feat\":[";
    for (Eigen::Index f = 0; f < g.feature_dim(); ++f) {
      if (f) os << ",";
      num(double(g.features()(r, f)));
    }
    os << "],\"vel\":[";
    for (int d = 0; d < 3; ++d) {
      if (d) os << ",";
      num(double(g.velocity()(r, d)));
    }
    os << "],\"count\":" << g.counts()[std::size_t(r)] << "}\n";
  }
}

}  // namespace svfuse

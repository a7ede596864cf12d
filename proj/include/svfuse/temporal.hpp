#pragma once

#include <memory>
#include <stdexcept>
#include <vector>

#include "svfuse/attention.hpp"
#include "svfuse/geometry.hpp"
#include "svfuse/layers.hpp"
#include "svfuse/sparse_grid.hpp"

namespace svfuse {

inline constexpr int kTemporalScale = 2;

struct AttentionWindow {
  int radius = 1;
};

/// Past grid moved into the current frame. `merge` maps past rows to warped
/// rows (mean over colliding cells).
template <typename Scalar>
struct WarpedGrid {
  SparseVoxelGrid<Scalar> grid;
  std::shared_ptr<const SpMat<Scalar>> merge;
};

/// Advances every cell centre by v*dt (past frame), maps it with
/// `current_from_past` and re-voxelizes at the same scale. Cells that leave
/// the extent are dropped; velocities are rotated into the current frame.
template <typename Scalar>
WarpedGrid<Scalar> warp_voxels(const SparseVoxelGrid<Scalar>& past, const SE3d& current_from_past, double dt) {
  if (!(dt >= 0)) throw std::invalid_argument("warp_voxels: dt must be non-negative");
  const GridSpec& spec = past.spec();
  const int scale = past.scale();
  const auto n = past.size();
  std::vector<Eigen::Vector3i> target(static_cast<std::size_t>(n));
  std::vector<char> keep(static_cast<std::size_t>(n));
  for (Eigen::Index r = 0; r < n; ++r) {
    const Eigen::Vector3d v = past.velocity().row(r).transpose().template cast<double>();
    const Eigen::Vector3d p = current_from_past * (past.center(r) + v * dt);
    keep[std::size_t(r)] = spec.contains(p);
    target[std::size_t(r)] = spec.locate(p, scale);
  }
  const CellAssignment a = assign_cells(target, keep);
  auto op = mean_operator<Scalar>(a, n);
  const Eigen::Matrix<Scalar, 3, 3> R = current_from_past.rotation.cast<Scalar>();
  Mat<Scalar> feat = (*op) * past.features();
  Mat<Scalar> vel = (*op) * past.velocity() * R.transpose();
  std::vector<int> counts(a.cells.size(), 0);
  for (std::size_t r = 0; r < a.row_of_item.size(); ++r)
    if (a.row_of_item[r] >= 0) counts[std::size_t(a.row_of_item[r])] += past.counts()[r];
  WarpedGrid<Scalar> out;
  out.grid = SparseVoxelGrid<Scalar>::from_sorted(spec, scale, a.cells, std::move(feat), std::move(vel), std::move(counts));
  out.merge = op;
  return out;
}

/// Occupied `keys` cells inside the window around each `queries` cell.
template <typename ScalarA, typename ScalarB>
std::shared_ptr<const nn::KeyLists> window_keys(const SparseVoxelGrid<ScalarA>& queries,
                                                const SparseVoxelGrid<ScalarB>& keys, AttentionWindow window) {
  if (window.radius < 0) throw std::invalid_argument("window_keys: negative radius");
  auto lists = std::make_shared<nn::KeyLists>();
  const int w = window.radius;
  for (const auto& c : queries.coords()) {
    if (!keys.empty()) {
      for (int dx = -w; dx <= w; ++dx)
        for (int dy = -w; dy <= w; ++dy)
          for (int dz = -w; dz <= w; ++dz) {
            const int k = keys.find(c + Eigen::Vector3i(dx, dy, dz));
            if (k >= 0) lists->keys.push_back(k);
          }
    }
    lists->offsets.push_back(int(lists->keys.size()));
  }
  return lists;
}

/// Residual windowed attention from current cells onto warped history cells.
template <typename Scalar>
struct TemporalAttention {
  nn::Tensor<Scalar> wq, wk, wv;
  int heads = 1;
  AttentionWindow window;

  TemporalAttention() = default;
  TemporalAttention(const std::string& name, Eigen::Index dim, Rng& rng, int heads_ = 1, AttentionWindow w = {})
      : wq(name + ".wq", dim, dim), wk(name + ".wk", dim, dim), wv(name + ".wv", dim, dim), heads(heads_), window(w) {
    nn::init_uniform(wq, rng, double(dim), double(dim));
    nn::init_uniform(wk, rng, double(dim), double(dim));
    nn::init_uniform(wv, rng, double(dim), double(dim));
  }

  /// current + attend(current W_q, warped W_k, warped W_v).
  nn::Var<Scalar> operator()(const nn::Var<Scalar>& current_feat, const nn::Var<Scalar>& warped_feat,
                             std::shared_ptr<const nn::KeyLists> lists,
                             std::vector<Scalar>* weights_out = nullptr) const {
    nn::Tape<Scalar>& t = *current_feat.tape;
    auto q = nn::matmul(current_feat, t.param(wq));
    auto k = nn::matmul(warped_feat, t.param(wk));
    auto v = nn::matmul(warped_feat, t.param(wv));
    return nn::add(current_feat, nn::window_attention(q, k, v, lists, heads, weights_out));
  }

  void collect(nn::ParamList<Scalar>& out) { out.insert(out.end(), {&wq, &wk, &wv}); }
};

/// Value-level attention call; the output keeps the current grid's cells.
template <typename Scalar>
SparseVoxelGrid<Scalar> sparse_window_attention(const SparseVoxelGrid<Scalar>& current, const WarpedGrid<Scalar>& warped,
                                                const TemporalAttention<Scalar>& attn) {
  if (current.scale() != warped.grid.scale() || !(current.spec() == warped.grid.spec())) {
    throw std::invalid_argument("sparse_window_attention: grids differ in scale or lattice");
  }
  nn::Tape<Scalar> tape(false);
  auto out = attn(tape.constant(current.features()), tape.constant(warped.grid.features()),
                  window_keys(current, warped.grid, attn.window));
  return current.with_features(out.value());
}

/// One past frame: its pyramid, the transform into the next (newer) frame
/// and the time to that frame.
template <typename Scalar>
struct HistoryFrame {
  FeaturePyramid<Scalar> pyramid;
  SE3d next_from_this;
  double dt = 0.1;
};

/// Level-2 features of the newest frame after chaining warp + attention over
/// the history from oldest to newest. On a tape; `history_feats[i]` carries
/// the level-2 features of history[i].
template <typename Scalar>
nn::Var<Scalar> temporal_fuse_level(const SparseVoxelGrid<Scalar>& current, const nn::Var<Scalar>& current_feat,
                                    const std::vector<const HistoryFrame<Scalar>*>& history,
                                    const std::vector<nn::Var<Scalar>>& history_feats,
                                    const TemporalAttention<Scalar>& attn) {
  if (history.empty()) return current_feat;
  const SparseVoxelGrid<Scalar>* state_grid = &history[0]->pyramid.level(kTemporalScale);
  nn::Var<Scalar> state = history_feats[0];
  for (std::size_t i = 0; i < history.size(); ++i) {
    const bool last = i + 1 == history.size();
    const SparseVoxelGrid<Scalar>& next = last ? current : history[i + 1]->pyramid.level(kTemporalScale);
    const nn::Var<Scalar> next_feat = last ? current_feat : history_feats[i + 1];
    const WarpedGrid<Scalar> w = warp_voxels(*state_grid, history[i]->next_from_this, history[i]->dt);
    const nn::Var<Scalar> warped = nn::spmm(w.merge, state);
    state = attn(next_feat, warped, window_keys(next, w.grid, attn.window));
    state_grid = &next;
  }
  return state;
}

/// Replaces level 2 of `pyramid` with its history-enhanced features.
template <typename Scalar>
FeaturePyramid<Scalar> temporal_fuse(const FeaturePyramid<Scalar>& pyramid,
                                     const std::vector<HistoryFrame<Scalar>>& history,
                                     const TemporalAttention<Scalar>& attn) {
  if (history.empty()) return pyramid;
  nn::Tape<Scalar> tape(false);
  std::vector<const HistoryFrame<Scalar>*> frames;
  std::vector<nn::Var<Scalar>> feats;
  for (const auto& h : history) {
    frames.push_back(&h);
    feats.push_back(tape.constant(h.pyramid.level(kTemporalScale).features()));
  }
  const auto& cur = pyramid.level(kTemporalScale);
  auto out = temporal_fuse_level(cur, tape.constant(cur.features()), frames, feats, attn);
  FeaturePyramid<Scalar> result = pyramid;
  result.level(kTemporalScale) = cur.with_features(out.value());
  return result;
}

}  // namespace svfuse

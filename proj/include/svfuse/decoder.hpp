#pragma once

#include <Eigen/Geometry>

#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

#include "svfuse/geometry.hpp"
#include "svfuse/layers.hpp"
#include "svfuse/point_cloud.hpp"
#include "svfuse/rng.hpp"
#include "svfuse/sparse_grid.hpp"

namespace svfuse {

// ---------------------------------------------------------------------------
// Ego path
// ---------------------------------------------------------------------------

/// Poses of the ego at query times relative to the current frame
/// (`current_from(t)` maps points from the ego frame at time t into the
/// current ego frame). Translation is interpolated linearly, rotation by
/// slerp; times outside the known range clamp to the nearest pose.
class EgoPath {
 public:
  EgoPath() { poses_[0.0] = SE3d::Identity(); }

  /// `current_from_t` for key time t (seconds, current frame = 0).
  void add(double t, const SE3d& current_from_t) { poses_[t] = current_from_t; }

  /// Builds the path from world poses: world_from_ego at each time.
  static EgoPath from_world(const std::vector<std::pair<double, SE3d>>& world_from_ego, double t_current) {
    const SE3d* cur = nullptr;
    for (const auto& [t, p] : world_from_ego)
      if (t == t_current) cur = &p;
    if (!cur) throw std::invalid_argument("EgoPath: current time is not a key pose");
    EgoPath path;
    path.poses_.clear();
    const SE3d current_from_world = cur->inverse();
    for (const auto& [t, p] : world_from_ego) path.poses_[t - t_current] = current_from_world * p;
    return path;
  }

  SE3d current_from(double t) const {
    auto hi = poses_.lower_bound(t);
    if (hi == poses_.end()) return std::prev(hi)->second;
    if (hi->first == t || hi == poses_.begin()) return hi->second;
    auto lo = std::prev(hi);
    const double a = (t - lo->first) / (hi->first - lo->first);
    const Eigen::Quaterniond q0(lo->second.rotation), q1(hi->second.rotation);
    const Eigen::Matrix3d R = q0.slerp(a, q1).normalized().toRotationMatrix();
    return SE3d(R, (1 - a) * lo->second.translation + a * hi->second.translation);
  }

  std::size_t size() const { return poses_.size(); }

 private:
  std::map<double, SE3d> poses_;
};

// ---------------------------------------------------------------------------
// Differentiable trilinear sampling
// ---------------------------------------------------------------------------

/// Samples `feats` (rows aligned with `grid`) at positions (B x 3, metres).
/// Gradients flow into both the features and the positions.
template <typename Scalar>
nn::Var<Scalar> sample_features(const SparseVoxelGrid<Scalar>& grid, const nn::Var<Scalar>& feats,
                                const nn::Var<Scalar>& pos) {
  if (feats.rows() != grid.size() || pos.cols() != 3) {
    throw nn::ShapeError("sample_features: features " + nn::shape_str(feats.rows(), feats.cols()) + " for " +
                         std::to_string(grid.size()) + " cells, positions " + nn::shape_str(pos.rows(), pos.cols()));
  }
  const Eigen::Index B = pos.rows(), C = feats.cols();
  auto stencils = std::make_shared<std::vector<TrilinearStencil>>(std::size_t(B));
  Mat<Scalar> out = Mat<Scalar>::Zero(B, C);
  const auto& F = feats.value();
  const auto& P = pos.value();
  for (Eigen::Index b = 0; b < B; ++b) {
    TrilinearStencil& st = (*stencils)[std::size_t(b)];
    st = trilinear_stencil(grid, Eigen::Vector3d(double(P(b, 0)), double(P(b, 1)), double(P(b, 2))));
    for (std::size_t c = 0; c < 8; ++c)
      if (st.rows[c] >= 0) out.row(b) += Scalar(st.weights[c]) * F.row(st.rows[c]);
  }
  const int iF = feats.id, iP = pos.id;
  std::shared_ptr<const std::vector<TrilinearStencil>> S = stencils;
  return feats.tape->push(std::move(out), nn::detail::any_grad({feats, pos}),
                          [iF, iP, S](nn::Tape<Scalar>& tp, int, const Mat<Scalar>& g) {
                            const auto& F = tp.value(iF);
                            Mat<Scalar>* gF = tp.grad_buffer(iF);
                            Mat<Scalar>* gP = tp.grad_buffer(iP);
                            for (std::size_t b = 0; b < S->size(); ++b) {
                              const TrilinearStencil& st = (*S)[b];
                              const auto gb = g.row(Eigen::Index(b));
                              for (std::size_t c = 0; c < 8; ++c) {
                                const int r = st.rows[c];
                                if (r < 0) continue;
                                if (gF) gF->row(r) += Scalar(st.weights[c]) * gb;
                                if (gP) gP->row(Eigen::Index(b)) += gb.dot(F.row(r)) * st.dweights[c].cast<Scalar>().transpose();
                              }
                            }
                          });
}

/// A pyramid on a tape: structure plus feature variables per level.
template <typename Scalar>
struct PyramidView {
  std::array<const SparseVoxelGrid<Scalar>*, kNumScales> grids{};
  std::array<nn::Var<Scalar>, kNumScales> feats;
};

template <typename Scalar>
PyramidView<Scalar> constant_view(nn::Tape<Scalar>& tape, const FeaturePyramid<Scalar>& p) {
  PyramidView<Scalar> v;
  for (std::size_t l = 0; l < std::size_t(kNumScales); ++l) {
    v.grids[l] = &p.levels[l];
    v.feats[l] = tape.constant(p.levels[l].features());
  }
  return v;
}

/// Trilinear samples of all levels, concatenated (B x sum C_l).
template <typename Scalar>
nn::Var<Scalar> sample_pyramid(const PyramidView<Scalar>& p, const nn::Var<Scalar>& pos) {
  std::vector<nn::Var<Scalar>> parts;
  for (std::size_t l = 0; l < std::size_t(kNumScales); ++l) parts.push_back(sample_features(*p.grids[l], p.feats[l], pos));
  return nn::concat_cols(parts);
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

struct DecoderConfig {
  Eigen::Index hidden = 64;
  int hidden_layers = 2;
  int frequencies = 4;
  double position_scale = 64.0;  // metres per unit before the Fourier encoding
  double time_scale = 4.0;       // seconds per unit
  double velocity_scale = 10.0;  // m/s per network output unit
};

/// (x, y, z, t) -> [q, sin(2^k pi q), cos(2^k pi q)] per component.
inline Eigen::Index fourier_width(int frequencies) { return 4 * (1 + 2 * frequencies); }

inline Eigen::RowVectorXd fourier_encode(const Eigen::Vector4d& q, const DecoderConfig& cfg) {
  Eigen::RowVectorXd e(fourier_width(cfg.frequencies));
  const Eigen::Vector4d n(q(0) / cfg.position_scale, q(1) / cfg.position_scale, q(2) / cfg.position_scale,
                          q(3) / cfg.time_scale);
  Eigen::Index k = 0;
  for (int d = 0; d < 4; ++d) {
    e(k++) = n(d);
    for (int f = 0; f < cfg.frequencies; ++f) {
      const double a = std::ldexp(M_PI, f) * n(d);
      e(k++) = std::sin(a);
      e(k++) = std::cos(a);
    }
  }
  return e;
}

/// f_pose, f_occ and f_vel over pyramid samples and the encoded query.
template <typename Scalar>
struct OccVelDecoder {
  DecoderConfig cfg;
  Eigen::Index pyramid_dim = 0;
  nn::Mlp<Scalar> f_pose;
  nn::Mlp<Scalar> f_occ;
  nn::Mlp<Scalar> f_vel;

  OccVelDecoder() = default;
  OccVelDecoder(const std::string& name, Eigen::Index pyramid_features, const DecoderConfig& c, Rng& rng)
      : cfg(c), pyramid_dim(pyramid_features) {
    const Eigen::Index e = fourier_width(c.frequencies);
    auto widths = [&](Eigen::Index in, Eigen::Index out) {
      std::vector<Eigen::Index> w{in};
      for (int i = 0; i < c.hidden_layers; ++i) w.push_back(c.hidden);
      w.push_back(out);
      return w;
    };
    f_pose = nn::Mlp<Scalar>(name + ".f_pose", widths(pyramid_features + e, 3), rng);
    f_occ = nn::Mlp<Scalar>(name + ".f_occ", widths(2 * pyramid_features + e, 1), rng);
    f_vel = nn::Mlp<Scalar>(name + ".f_vel", widths(2 * pyramid_features + e, 3), rng);
    f_pose.last().zero();  // start from the purely rigid decoder
  }

  void collect(nn::ParamList<Scalar>& out) {
    f_pose.collect(out);
    f_occ.collect(out);
    f_vel.collect(out);
  }
};

template <typename Scalar>
struct DecodeBatch {
  nn::Var<Scalar> logits;    // B x 1
  nn::Var<Scalar> velocity;  // B x 3, m/s (invalid Var when not requested)
  Eigen::MatrixXd first_position;   // B x 3, current frame
  Eigen::MatrixXd second_position;  // B x 3
  std::vector<char> in_bounds;
};

/// Decodes queries (B x 4 rows of x, y, z, t in the ego frame at time t).
template <typename Scalar>
DecodeBatch<Scalar> decode_batch(const OccVelDecoder<Scalar>& dec, const PyramidView<Scalar>& pyr,
                                 const Eigen::MatrixXd& queries, const EgoPath& path, bool with_velocity = true) {
  if (queries.cols() != 4) throw nn::ShapeError("decode: queries must be B x 4, got " + nn::shape_str(queries.rows(), queries.cols()));
  nn::Tape<Scalar>& t = *pyr.feats[0].tape;
  const Eigen::Index B = queries.rows();
  const GridSpec& spec = pyr.grids[0]->spec();
  DecodeBatch<Scalar> out;
  out.first_position.resize(B, 3);
  out.in_bounds.resize(std::size_t(B));
  Mat<Scalar> enc(B, fourier_width(dec.cfg.frequencies));
  std::map<double, SE3d> pose_cache;
  for (Eigen::Index b = 0; b < B; ++b) {
    const double tq = queries(b, 3);
    auto it = pose_cache.find(tq);
    if (it == pose_cache.end()) it = pose_cache.emplace(tq, path.current_from(tq)).first;
    const Eigen::Vector3d p = it->second * Eigen::Vector3d(queries.row(b).head<3>().transpose());
    out.first_position.row(b) = p.transpose();
    out.in_bounds[std::size_t(b)] = spec.contains(p);
    enc.row(b) = fourier_encode(Eigen::Vector4d(p.x(), p.y(), p.z(), tq), dec.cfg).template cast<Scalar>();
  }
  auto q_enc = t.constant(std::move(enc));
  auto p0 = t.constant(out.first_position.template cast<Scalar>());
  auto v1 = sample_pyramid(pyr, p0);
  auto offset = dec.f_pose(nn::concat_cols<Scalar>({v1, q_enc}));
  auto p1 = nn::add(p0, offset);
  out.second_position = p1.value().template cast<double>();
  auto v2 = sample_pyramid(pyr, p1);
  auto head_in = nn::concat_cols<Scalar>({v1, v2, q_enc});
  out.logits = dec.f_occ(head_in);
  if (with_velocity) out.velocity = nn::scale(dec.f_vel(head_in), Scalar(dec.cfg.velocity_scale));
  return out;
}

struct Decoded {
  double occupancy = 0.0;
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();
  bool in_bounds = false;
};

/// Value-level decode; out-of-extent queries give (0, 0) with in_bounds false.
template <typename Scalar>
std::vector<Decoded> decode(const OccVelDecoder<Scalar>& dec, const FeaturePyramid<Scalar>& pyramid,
                            const Eigen::MatrixXd& queries, const EgoPath& path) {
  nn::Tape<Scalar> tape(false);
  const auto view = constant_view(tape, pyramid);
  const auto d = decode_batch(dec, view, queries, path, true);
  std::vector<Decoded> out(std::size_t(queries.rows()));
  for (std::size_t b = 0; b < out.size(); ++b) {
    if (!d.in_bounds[b]) continue;
    const auto i = Eigen::Index(b);
    out[b].in_bounds = true;
    out[b].occupancy = 1.0 / (1.0 + std::exp(-double(d.logits.value()(i, 0))));
    out[b].velocity = d.velocity.value().row(i).transpose().template cast<double>();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Ray labels and losses
// ---------------------------------------------------------------------------

struct SupervisionSample {
  Eigen::Vector4d query = Eigen::Vector4d::Zero();  // x, y, z, t (ego frame at t)
  int occ = 0;
  std::optional<Eigen::Vector3d> velocity;
  double weight = 1.0;
};

/// One occupied sample at each sampled return and `free_per_ray` free
/// samples uniformly in (0, r - epsilon) along its ray. Only returns with
/// range > epsilon are eligible. Velocities are v_r along the ray direction.
inline std::vector<SupervisionSample> generate_labels(const PointCloud& cloud, const Eigen::Vector3d& sensor_origin,
                                                      int rays_per_frame, int free_per_ray, double epsilon, Rng& rng,
                                                      double time = 0.0, double weight = 1.0) {
  if (rays_per_frame <= 0 || free_per_ray < 0) throw std::invalid_argument("generate_labels: counts must be positive");
  std::vector<Eigen::Index> eligible;
  for (Eigen::Index i = 0; i < cloud.size(); ++i)
    if ((cloud.xyz.col(i) - sensor_origin).norm() > epsilon) eligible.push_back(i);
  std::vector<SupervisionSample> out;
  if (eligible.empty()) return out;
  out.reserve(std::size_t(rays_per_frame) * std::size_t(1 + free_per_ray));
  for (int k = 0; k < rays_per_frame; ++k) {
    const Eigen::Index i = eligible[rng.index(eligible.size())];
    const Eigen::Vector3d p = cloud.xyz.col(i);
    const double r = (p - sensor_origin).norm();
    const Eigen::Vector3d dir = (p - sensor_origin) / r;
    SupervisionSample hit;
    hit.query << p, time;
    hit.occ = 1;
    hit.velocity = cloud.radial_velocity(i) * dir;
    hit.weight = weight;
    out.push_back(hit);
    for (int f = 0; f < free_per_ray; ++f) {
      SupervisionSample s;
      s.query << sensor_origin + rng.uniform(0.0, r - epsilon) * dir, time;
      s.weight = weight;
      out.push_back(s);
    }
  }
  return out;
}

/// {"q":[x,y,z,t],"occ":0|1,"vel":[..] or null}
inline void dump_samples_jsonl(std::ostream& os, const std::vector<SupervisionSample>& samples) {
  char buf[256];
  for (const auto& s : samples) {
    std::snprintf(buf, sizeof(buf), "{\"q\":[%.9g,%.9g,%.9g,%.9g],\"occ\":%d,\"vel\":", s.query(0), s.query(1),
                  s.query(2), s.query(3), s.occ);
    os << buf;
    if (s.velocity) {
      std::snprintf(buf, sizeof(buf), "[%.9g,%.9g,%.9g]}\n", s.velocity->x(), s.velocity->y(), s.velocity->z());
      os << buf;
    } else {
      os << "null}\n";
    }
  }
}

template <typename Scalar>
struct SslLoss {
  nn::Var<Scalar> occ;
  nn::Var<Scalar> vel;  // invalid when no sample carries a velocity or the term is off
  nn::Var<Scalar> total;
  std::size_t used = 0;  // samples inside the extent
};

/// occ = weighted mean BCE over in-extent samples; vel = mean squared error
/// (per component) over in-extent samples with a velocity label;
/// total = occ + lambda_v * vel.
template <typename Scalar>
SslLoss<Scalar> ssl_loss(const std::vector<SupervisionSample>& samples, const OccVelDecoder<Scalar>& dec,
                         const PyramidView<Scalar>& pyr, const EgoPath& path, double lambda_v, bool velocity_term = true) {
  if (samples.empty()) throw std::invalid_argument("ssl_loss: no samples");
  nn::Tape<Scalar>& t = *pyr.feats[0].tape;
  const auto B = Eigen::Index(samples.size());
  Eigen::MatrixXd q(B, 4);
  for (Eigen::Index b = 0; b < B; ++b) q.row(b) = samples[std::size_t(b)].query.transpose();
  const auto d = decode_batch(dec, pyr, q, path, velocity_term);
  Mat<Scalar> target(B, 1), weight(B, 1);
  std::vector<int> vel_rows;
  SslLoss<Scalar> loss;
  for (Eigen::Index b = 0; b < B; ++b) {
    const auto& s = samples[std::size_t(b)];
    const bool in = d.in_bounds[std::size_t(b)];
    target(b, 0) = Scalar(s.occ);
    weight(b, 0) = in ? Scalar(s.weight) : Scalar(0);
    loss.used += in;
    if (in && s.velocity && s.occ == 1) vel_rows.push_back(int(b));
  }
  if (loss.used == 0) throw std::invalid_argument("ssl_loss: every sample lies outside the extent");
  loss.occ = nn::bce_with_logits(d.logits, target, weight);
  loss.total = loss.occ;
  if (velocity_term && !vel_rows.empty()) {
    Mat<Scalar> vt(Eigen::Index(vel_rows.size()), 3);
    for (std::size_t i = 0; i < vel_rows.size(); ++i)
      vt.row(Eigen::Index(i)) = samples[std::size_t(vel_rows[i])].velocity->transpose().template cast<Scalar>();
    auto idx = std::make_shared<const std::vector<int>>(vel_rows);
    loss.vel = nn::mse(nn::gather_rows(d.velocity, idx), t.constant(vt));
    loss.total = nn::add(loss.occ, nn::scale(loss.vel, Scalar(lambda_v)));
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Forecast rendering
// ---------------------------------------------------------------------------

struct RayMarch {
  double tau = 0.5;
  double step = 0.1;
  double max_range = 200.0;
};

enum class MarchSample : char { kOutside, kFree, kOccupied };

/// First-hit range per ray (unit directions from the origin). `classify`
/// maps a B x 3 batch of sample points to one MarchSample each. A ray stops
/// at its first occupied sample, or once it has entered and then left the
/// region (outside samples before entering are skipped).
template <typename Classify>
std::vector<std::optional<double>> march_rays(const Eigen::Matrix3Xd& ray_dirs, const RayMarch& march,
                                              Classify&& classify) {
  if (!(march.step > 0)) throw std::invalid_argument("march_rays: step must be positive");
  const auto N = ray_dirs.cols();
  std::vector<Eigen::Index> active;
  for (Eigen::Index i = 0; i < N; ++i) active.push_back(i);
  std::vector<std::optional<double>> hit(static_cast<std::size_t>(N));
  std::vector<char> entered(std::size_t(N), 0);
  const int steps = int(std::floor(march.max_range / march.step + 1e-9));
  for (int k = 1; k <= steps && !active.empty(); ++k) {
    const double r = k * march.step;
    Eigen::MatrixXd pts(Eigen::Index(active.size()), 3);
    for (std::size_t a = 0; a < active.size(); ++a) pts.row(Eigen::Index(a)) = r * ray_dirs.col(active[a]).transpose();
    const std::vector<MarchSample> cls = classify(pts);
    std::vector<Eigen::Index> next;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const Eigen::Index i = active[a];
      if (cls[a] == MarchSample::kOutside) {
        if (!entered[std::size_t(i)]) next.push_back(i);
        continue;
      }
      entered[std::size_t(i)] = 1;
      if (cls[a] == MarchSample::kOccupied) {
        hit[std::size_t(i)] = r;
      } else {
        next.push_back(i);
      }
    }
    active.swap(next);
  }
  return hit;
}

/// Marches each ray (unit directions in the ego frame at `t_future`, from
/// that frame's origin) and emits a point at the first sample whose
/// occupancy exceeds tau. The point's v_r is the decoded velocity along the
/// ray. Rays stop once they leave the extent.
template <typename Scalar>
PointCloud forecast_cloud(const OccVelDecoder<Scalar>& dec, const FeaturePyramid<Scalar>& pyramid, const EgoPath& path,
                          const Eigen::Matrix3Xd& ray_dirs, double t_future, const RayMarch& march) {
  if (!(march.tau > 0 && march.tau < 1) || !(march.step > 0)) throw std::invalid_argument("forecast_cloud: bad tau/step");
  const double logit_tau = std::log(march.tau / (1 - march.tau));
  const SE3d to_current = path.current_from(t_future);
  const auto N = ray_dirs.cols();
  const auto hit = march_rays(ray_dirs, march, [&](const Eigen::MatrixXd& pts) {
    Eigen::MatrixXd q(pts.rows(), 4);
    q << pts, Eigen::VectorXd::Constant(pts.rows(), t_future);
    nn::Tape<Scalar> tape(false);
    const auto view = constant_view(tape, pyramid);
    const auto d = decode_batch(dec, view, q, path, false);
    std::vector<MarchSample> out(std::size_t(pts.rows()));
    for (std::size_t a = 0; a < out.size(); ++a) {
      if (!d.in_bounds[a]) {
        out[a] = MarchSample::kOutside;
      } else {
        out[a] = double(d.logits.value()(Eigen::Index(a), 0)) > logit_tau ? MarchSample::kOccupied : MarchSample::kFree;
      }
    }
    return out;
  });
  std::vector<Eigen::Index> rays;
  for (Eigen::Index i = 0; i < N; ++i)
    if (hit[std::size_t(i)]) rays.push_back(i);
  PointCloud out(Eigen::Index(rays.size()));
  out.timestamp = t_future;
  if (rays.empty()) return out;
  Eigen::MatrixXd q(Eigen::Index(rays.size()), 4);
  for (std::size_t j = 0; j < rays.size(); ++j) q.row(Eigen::Index(j)) << (*hit[std::size_t(rays[j])] * ray_dirs.col(rays[j])).transpose(), t_future;
  const auto dv = decode(dec, pyramid, q, path);
  const Eigen::Matrix3d R_back = to_current.rotation.transpose();
  for (std::size_t j = 0; j < rays.size(); ++j) {
    const auto i = Eigen::Index(j);
    const Eigen::Vector3d dir = ray_dirs.col(rays[j]);
    out.xyz.col(i) = *hit[std::size_t(rays[j])] * dir;
    out.radial_velocity(i) = (R_back * dv[j].velocity).dot(dir);
  }
  return out;
}

}  // namespace svfuse

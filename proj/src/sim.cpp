#include "svfuse/sim.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "svfuse/binary_io.hpp"
#include "svfuse/parallel.hpp"
#include "svfuse/raster_io.hpp"
#include "svfuse/sim_json.hpp"

namespace svfuse {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

Eigen::Matrix3d yaw_rotation(double yaw) { return Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()).toRotationMatrix(); }

/// Entry distance of a ray into an oriented box, if any (origin outside).
std::optional<double> hit_box(const SceneActor& a, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir) {
  const Eigen::Matrix3d Rt = yaw_rotation(a.yaw).transpose();
  const Eigen::Vector3d o = Rt * (origin - a.center);
  const Eigen::Vector3d d = Rt * dir;
  const Eigen::Vector3d half = 0.5 * a.size;
  double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d(k)) < 1e-15) {
      if (o(k) < -half(k) || o(k) > half(k)) return std::nullopt;
      continue;
    }
    double ta = (-half(k) - o(k)) / d(k), tb = (half(k) - o(k)) / d(k);
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }
  if (t0 <= 0) return std::nullopt;
  return t0;
}

double intensity_of(int actor, const Scene& s) {
  if (actor < 0) return 0.2;
  const std::string& c = s.actors[std::size_t(actor)].cls;
  if (c == "truck") return 0.7;
  if (c == "rail") return 0.9;
  return 0.6;
}

Eigen::Vector3d colour_of(int actor, const Scene& s, const Eigen::Vector3d& p) {
  if (actor < 0) {
    const int checker = (int(std::floor(p.x() / 2.0)) + int(std::floor(p.y() / 2.0))) & 1;
    return Eigen::Vector3d::Constant(0.35 + 0.08 * checker);
  }
  const std::string& c = s.actors[std::size_t(actor)].cls;
  if (c == "truck") return {0.2, 0.3, 0.8};
  if (c == "rail") return {0.7, 0.7, 0.7};
  if (c == "wall") return {0.6, 0.5, 0.3};
  return {0.8, 0.2, 0.2};
}

/// World-frame ray through a pixel centre.
Eigen::Vector3d pixel_ray_world(const Scene& scene, const Camerad& cam, int u, int v, double* cos_axis) {
  const Eigen::Vector3d rc = cam.K.triangularView<Eigen::Upper>().solve(Eigen::Vector3d(u, v, 1.0)).normalized();
  *cos_axis = rc.z();
  const Eigen::Matrix3d ego_from_cam = cam.camera_from_ego.rotation.transpose();
  return scene.ego.world_from_ego.rotation * (ego_from_cam * rc);
}

Eigen::Vector3d camera_origin_world(const Scene& scene, const Camerad& cam) {
  return scene.ego.world_from_ego * cam.camera_from_ego.inverse().translation;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

fs::path frame_dir(const fs::path& seq, int i) {
  char name[32];
  std::snprintf(name, sizeof(name), "frame_%06d", i);
  return seq / name;
}

}  // namespace

void SimConfig::validate() const {
  if (!(frame_rate > 0)) throw std::invalid_argument("SimConfig: frame rate must be positive");
  if (!(lidar.max_range > 0) || lidar.max_range > 400) throw std::invalid_argument("SimConfig: max range must be in (0, 400]");
  if (lidar.channels < 1 || !(lidar.azimuth_resolution_deg > 0) || !(lidar.azimuth_fov_deg > 0))
    throw std::invalid_argument("SimConfig: invalid scan pattern");
  if (actor_count < 0 || actor_min_range > actor_max_range) throw std::invalid_argument("SimConfig: invalid actor setup");
  if (lidar.range_noise < 0 || lidar.velocity_noise < 0) throw std::invalid_argument("SimConfig: negative noise");
}

std::vector<Camerad> default_cameras() { return {Camerad::forward_looking(60.0, 60.0, 96, 64, Eigen::Vector3d::Zero())}; }

Scene initial_scene(const SimConfig& cfg) {
  cfg.validate();
  Scene s;
  s.ego.world_from_ego = SE3d(Eigen::Matrix3d::Identity(), Eigen::Vector3d(0, 0, cfg.sensor_height));
  s.ego.speed = cfg.ego_speed;
  s.ego.yaw_rate = cfg.ego_yaw_rate;
  Rng rng = Rng(cfg.seed).fork(0x5ce4e);
  const double lanes[] = {-7.0, -3.5, 0.0, 3.5, 7.0};
  std::vector<std::pair<int, double>> placed;
  for (int i = 0; i < cfg.actor_count; ++i) {
    SceneActor a;
    const bool truck = rng.uniform() < 0.2;
    a.cls = truck ? "truck" : "car";
    a.size = truck ? Eigen::Vector3d(12.0, 2.5, 3.5) : Eigen::Vector3d(4.5, 1.9, 1.5);
    int lane = 0;
    double x = 0;
    for (int attempt = 0; attempt < 100; ++attempt) {
      lane = int(rng.index(5));
      x = rng.uniform(cfg.actor_min_range, cfg.actor_max_range);
      const bool clear = std::none_of(placed.begin(), placed.end(), [&](const auto& p) {
        return p.first == lane && std::abs(p.second - x) < 16.0;
      });
      if (clear) break;
    }
    placed.emplace_back(lane, x);
    a.center = Eigen::Vector3d(x, lanes[lane], 0.5 * a.size.z());
    a.velocity = Eigen::Vector3d(rng.uniform(18.0, 32.0), 0, 0);
    s.actors.push_back(a);
  }
  if (cfg.guard_rails) {
    for (double y : {-10.5, 10.5}) {
      SceneActor r;
      r.cls = "rail";
      r.size = Eigen::Vector3d(4000.0, 0.3, 0.8);
      r.center = Eigen::Vector3d(1900.0, y, 0.4);
      s.actors.push_back(r);
    }
  }
  return s;
}

Scene step_world(const Scene& scene, double dt) {
  if (!(dt > 0)) throw std::invalid_argument("step_world: dt must be positive");
  Scene s = scene;
  s.time += dt;
  for (auto& a : s.actors) a.center += a.velocity * dt;
  const double w = s.ego.yaw_rate, v = s.ego.speed;
  Eigen::Vector3d disp(v * dt, 0, 0);
  if (std::abs(w) > 1e-12) disp = Eigen::Vector3d(v * std::sin(w * dt) / w, v * (1 - std::cos(w * dt)) / w, 0);
  s.ego.world_from_ego = s.ego.world_from_ego * SE3d(yaw_rotation(w * dt), disp);
  return s;
}

std::optional<RayHit> intersect(const Scene& scene, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir,
                                double max_range) {
  std::optional<RayHit> best;
  if (dir.z() < 0) {
    const double t = (scene.ground_z - origin.z()) / dir.z();
    if (t > 0 && t <= max_range) best = RayHit{t, -1};
  }
  for (std::size_t i = 0; i < scene.actors.size(); ++i) {
    const auto t = hit_box(scene.actors[i], origin, dir);
    if (t && *t <= max_range && (!best || *t < best->range)) best = RayHit{*t, int(i)};
  }
  return best;
}

Eigen::Matrix3Xd lidar_ray_directions(const LidarConfig& cfg) {
  const int naz = int(std::floor(cfg.azimuth_fov_deg / cfg.azimuth_resolution_deg + 1e-9)) + 1;
  Eigen::Matrix3Xd dirs(3, Eigen::Index(cfg.channels) * naz);
  Eigen::Index k = 0;
  for (int c = 0; c < cfg.channels; ++c) {
    const double el = cfg.channels == 1 ? cfg.elevation_min_deg
                                        : cfg.elevation_min_deg + (cfg.elevation_max_deg - cfg.elevation_min_deg) * c /
                                                                      double(cfg.channels - 1);
    for (int a = 0; a < naz; ++a) {
      const double az = -0.5 * cfg.azimuth_fov_deg + a * cfg.azimuth_resolution_deg;
      dirs.col(k++) = Eigen::Vector3d(std::cos(el * kDeg) * std::cos(az * kDeg), std::cos(el * kDeg) * std::sin(az * kDeg),
                                      std::sin(el * kDeg));
    }
  }
  return dirs;
}

PointCloud cast_lidar(const Scene& scene, const SimConfig& cfg, Rng& rng) {
  const Eigen::Matrix3Xd dirs = lidar_ray_directions(cfg.lidar);
  const Eigen::Vector3d origin = scene.ego.world_from_ego.translation;
  const Eigen::Matrix3d R = scene.ego.world_from_ego.rotation;
  const Eigen::Vector3d v_ego = scene.ego.velocity_world();
  PointCloud out;
  std::vector<Eigen::Vector3d> pts;
  std::vector<double> vr, inten;
  for (Eigen::Index i = 0; i < dirs.cols(); ++i) {
    const Eigen::Vector3d dw = R * dirs.col(i);
    const auto hit = intersect(scene, origin, dw, cfg.lidar.max_range);
    if (!hit) continue;
    const double r = hit->range + cfg.lidar.range_noise * rng.normal();
    if (!(r > 0)) continue;
    const Eigen::Vector3d v_hit =
        hit->actor < 0 ? Eigen::Vector3d::Zero() : scene.actors[std::size_t(hit->actor)].velocity;
    pts.push_back(r * dirs.col(i));
    vr.push_back((v_hit - v_ego).dot(dw) + cfg.lidar.velocity_noise * rng.normal());
    inten.push_back(intensity_of(hit->actor, scene));
  }
  out = PointCloud(Eigen::Index(pts.size()));
  out.timestamp = scene.time;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    out.xyz.col(Eigen::Index(i)) = pts[i];
    out.radial_velocity(Eigen::Index(i)) = vr[i];
    out.intensity(Eigen::Index(i)) = inten[i];
  }
  return out;
}

Eigen::MatrixXd render_depth_gt(const Scene& scene, const Camerad& cam, double max_range) {
  Eigen::MatrixXd depth = Eigen::MatrixXd::Zero(cam.height, cam.width);
  const Eigen::Vector3d origin = camera_origin_world(scene, cam);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      double c = 0;
      const Eigen::Vector3d dw = pixel_ray_world(scene, cam, u, v, &c);
      if (const auto hit = intersect(scene, origin, dw, max_range)) depth(v, u) = hit->range * c;
    }
  return depth;
}

Eigen::MatrixXd render_rgb(const Scene& scene, const Camerad& cam, double max_range) {
  Eigen::MatrixXd rgb(Eigen::Index(cam.height) * cam.width, 3);
  const Eigen::Vector3d origin = camera_origin_world(scene, cam);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u) {
      double c = 0;
      const Eigen::Vector3d dw = pixel_ray_world(scene, cam, u, v, &c);
      const auto hit = intersect(scene, origin, dw, max_range);
      const Eigen::Vector3d col =
          hit ? colour_of(hit->actor, scene, origin + hit->range * dw) : Eigen::Vector3d(0.5, 0.7, 0.9);
      rgb.row(Eigen::Index(v) * cam.width + u) = col.transpose();
    }
  return rgb;
}

Eigen::MatrixXd sparse_depth_from_cloud(const PointCloud& cloud, const Camerad& cam) {
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(cam.height, cam.width);
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    const auto px = project_to_image<double>(cloud.xyz.col(i), cam);
    if (!px) continue;
    const int u = int(std::lround(px->u)), v = int(std::lround(px->v));
    if (u < 0 || v < 0 || u >= cam.width || v >= cam.height) continue;
    if (d(v, u) == 0 || px->depth < d(v, u)) d(v, u) = px->depth;
  }
  return d;
}

Scene FrameRecord::scene() const {
  Scene s;
  s.time = time;
  s.ego = ego;
  s.actors = actors;
  s.ground_z = ground_z;
  return s;
}

fs::path make_sequence(const SimConfig& cfg, int n_frames, const fs::path& root) {
  if (n_frames < 1) throw std::invalid_argument("make_sequence: n_frames must be at least 1");
  cfg.validate();
  const fs::path seq = root / ("seq_" + std::to_string(cfg.sequence_id));
  std::error_code ec;
  fs::create_directories(seq, ec);
  if (ec) throw DataError("cannot create " + seq.string() + ": " + ec.message());

  std::vector<Scene> scenes{initial_scene(cfg)};
  for (int i = 1; i < n_frames; ++i) scenes.push_back(step_world(scenes.back(), cfg.dt()));

  json info;
  info["frames"] = n_frames;
  info["config"] = cfg;
  write_text(seq / "sequence.json", info.dump(2) + "\n");

  const Rng base(cfg.seed);
  parallel_for(std::size_t(n_frames), [&](std::size_t i) {
    const Scene& s = scenes[i];
    const fs::path dir = frame_dir(seq, int(i));
    std::error_code e;
    fs::create_directories(dir, e);
    if (e) throw DataError("cannot create " + dir.string() + ": " + e.message());
    Rng rng = base.fork(i);
    write_lrpc(dir / "cloud.lrpc", cast_lidar(s, cfg, rng));
    json pose;
    pose["time"] = s.time;
    pose["world_from_ego"] = s.ego.world_from_ego;
    pose["speed"] = s.ego.speed;
    pose["yaw_rate"] = s.ego.yaw_rate;
    pose["ground_z"] = s.ground_z;
    write_text(dir / "pose.json", pose.dump(2) + "\n");
    write_text(dir / "actors.json", json(s.actors).dump(2) + "\n");
    for (std::size_t c = 0; c < cfg.cameras.size(); ++c)
      write_svdp(dir / ("depth_cam" + std::to_string(c) + ".svdp"), render_depth_gt(s, cfg.cameras[c], cfg.lidar.max_range));
  });
  return seq;
}

int count_frames(const fs::path& sequence_dir) {
  const json info = read_json(sequence_dir / "sequence.json");
  return info.at("frames").get<int>();
}

SimConfig read_sequence_config(const fs::path& sequence_dir) {
  const fs::path p = sequence_dir / "sequence.json";
  try {
    return read_json(p).at("config").get<SimConfig>();
  } catch (const json::exception& e) {
    throw DataError("malformed " + p.string() + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError("malformed " + p.string() + ": " + e.what());
  }
}

FrameRecord load_frame(const fs::path& sequence_dir, int index, bool with_depth) {
  const fs::path dir = frame_dir(sequence_dir, index);
  if (!fs::is_directory(dir)) throw DataError("missing frame directory: " + dir.string());
  FrameRecord f;
  f.cloud = read_lrpc(dir / "cloud.lrpc");
  try {
    const json pose = read_json(dir / "pose.json");
    f.time = pose.at("time").get<double>();
    f.ego.world_from_ego = pose.at("world_from_ego").get<SE3d>();
    f.ego.speed = pose.at("speed").get<double>();
    f.ego.yaw_rate = pose.at("yaw_rate").get<double>();
    f.ground_z = pose.at("ground_z").get<double>();
    f.actors = read_json(dir / "actors.json").get<std::vector<SceneActor>>();
  } catch (const json::exception& e) {
    throw DataError("malformed frame in " + dir.string() + ": " + e.what());
  }
  if (with_depth) {
    for (int c = 0;; ++c) {
      const fs::path p = dir / ("depth_cam" + std::to_string(c) + ".svdp");
      if (!fs::exists(p)) break;
      f.depth.push_back(read_svdp(p));
    }
  }
  return f;
}

PlaneSample make_plane_frame(const Camerad& cam, double distance, double density, double noise, Rng& rng) {
  PlaneSample s;
  const Eigen::Index HW = Eigen::Index(cam.height) * cam.width;
  s.gt = Eigen::MatrixXd::Constant(cam.height, cam.width, distance);
  s.frame.rgb.resize(HW, 3);
  for (Eigen::Index i = 0; i < HW; ++i) {
    const double t = 0.05 * rng.uniform();
    s.frame.rgb.row(i) << 0.6 + t, 0.5 + t, 0.3 + t;
  }
  s.frame.sparse_depth = Eigen::MatrixXd::Zero(cam.height, cam.width);
  for (int v = 0; v < cam.height; ++v)
    for (int u = 0; u < cam.width; ++u)
      if (rng.uniform() < density) s.frame.sparse_depth(v, u) = std::max(0.1, distance + noise * rng.normal());
  if (s.frame.valid_count() == 0) s.frame.sparse_depth(cam.height / 2, cam.width / 2) = distance;
  return s;
}

}  // namespace svfuse

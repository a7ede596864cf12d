#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "svfuse/depth_refine.hpp"
#include "svfuse/geometry.hpp"
#include "svfuse/point_cloud.hpp"
#include "svfuse/rng.hpp"

namespace svfuse {

/// Oriented box moving at constant velocity (world frame, z up).
struct SceneActor {
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Ones();
  double yaw = 0.0;
  Eigen::Vector3d velocity = Eigen::Vector3d::Zero();
  std::string cls = "car";
};

/// Ego pose plus planar motion: forward speed (m/s) and yaw rate (rad/s).
struct EgoState {
  SE3d world_from_ego;
  double speed = 0.0;
  double yaw_rate = 0.0;

  Eigen::Vector3d velocity_world() const { return world_from_ego.rotation * Eigen::Vector3d(speed, 0, 0); }
  /// Ego velocity expressed in its own frame.
  Eigen::Vector3d velocity_ego() const { return Eigen::Vector3d(speed, 0, 0); }
};

struct Scene {
  double time = 0.0;
  EgoState ego;
  std::vector<SceneActor> actors;
  double ground_z = 0.0;  // world height of the ground plane
};

struct LidarConfig {
  int channels = 32;
  double elevation_min_deg = -15.0;
  double elevation_max_deg = 3.0;
  double azimuth_fov_deg = 120.0;  // centred on +x
  double azimuth_resolution_deg = 0.5;
  double max_range = 300.0;
  double range_noise = 0.02;     // m, additive Gaussian
  double velocity_noise = 0.05;  // m/s
};

/// One forward camera (96 x 64) at the ego origin.
std::vector<Camerad> default_cameras();

struct SimConfig {
  double ego_speed = 25.0;
  double ego_yaw_rate = 0.0;
  int actor_count = 12;
  double actor_min_range = 20.0;
  double actor_max_range = 300.0;
  double frame_rate = 10.0;
  double sensor_height = 1.8;  // ego origin above the ground
  bool guard_rails = true;
  LidarConfig lidar;
  std::vector<Camerad> cameras = default_cameras();
  std::uint64_t seed = 1;
  int sequence_id = 0;

  void validate() const;
  double dt() const { return 1.0 / frame_rate; }
};

/// Ego at the world origin heading +x; actors on five lanes ahead,
/// guard rails (static boxes) along both road edges.
Scene initial_scene(const SimConfig& cfg);

/// Constant-velocity actors; the ego follows a circular arc (a line when
/// the yaw rate is zero).
Scene step_world(const Scene& scene, double dt);

struct RayHit {
  double range = 0.0;
  int actor = -1;  // -1: ground plane
};

/// Nearest intersection of a world-frame ray with the boxes or the ground.
std::optional<RayHit> intersect(const Scene& scene, const Eigen::Vector3d& origin, const Eigen::Vector3d& dir,
                                double max_range);

/// Unit ray directions of the scan pattern in the sensor (ego) frame.
Eigen::Matrix3Xd lidar_ray_directions(const LidarConfig& cfg);

/// One sweep in the ego frame. v_r = (v_hit - v_ego) . dir + noise.
PointCloud cast_lidar(const Scene& scene, const SimConfig& cfg, Rng& rng);

/// Per-pixel camera depth (z) of the nearest surface; 0 where the ray
/// misses everything within `max_range`.
Eigen::MatrixXd render_depth_gt(const Scene& scene, const Camerad& cam, double max_range);

/// Flat-shaded colours (HW x 3): ground grey, actors by class, sky blue.
Eigen::MatrixXd render_rgb(const Scene& scene, const Camerad& cam, double max_range);

/// Camera z-depth of projected points (nearest wins per pixel), 0 elsewhere.
Eigen::MatrixXd sparse_depth_from_cloud(const PointCloud& cloud, const Camerad& cam);

/// Writes seq_<id>/frame_<%06d>/{cloud.lrpc, pose.json, depth_cam<i>.svdp, actors.json}
/// under `root`; returns the sequence directory.
std::filesystem::path make_sequence(const SimConfig& cfg, int n_frames, const std::filesystem::path& root);

struct FrameRecord {
  double time = 0.0;
  PointCloud cloud;
  EgoState ego;
  double ground_z = 0.0;
  std::vector<SceneActor> actors;
  std::vector<Eigen::MatrixXd> depth;  // per camera
  Scene scene() const;
};

int count_frames(const std::filesystem::path& sequence_dir);
SimConfig read_sequence_config(const std::filesystem::path& sequence_dir);
FrameRecord load_frame(const std::filesystem::path& sequence_dir, int index, bool with_depth = true);

/// Noisy samples of a fronto-parallel wall at `distance` m: a fraction
/// `density` of pixels carries depth with Gaussian noise `noise`.
struct PlaneSample {
  ImageFrame frame;
  Eigen::MatrixXd gt;
};
PlaneSample make_plane_frame(const Camerad& cam, double distance, double density, double noise, Rng& rng);

}  // namespace svfuse

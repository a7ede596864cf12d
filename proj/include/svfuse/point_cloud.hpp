#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>

namespace svfuse {

/// One LiDAR sweep in the sensor-centred ego frame (sensor at the origin).
/// `radial_velocity` is the raw FMCW Doppler measurement relative to the ego.
struct PointCloud {
  double timestamp = 0.0;
  Eigen::Matrix3Xd xyz;
  Eigen::VectorXd radial_velocity;
  Eigen::VectorXd intensity;

  PointCloud() = default;
  explicit PointCloud(Eigen::Index n) : xyz(3, n), radial_velocity(n), intensity(n) {
    xyz.setZero();
    radial_velocity.setZero();
    intensity.setZero();
  }

  Eigen::Index size() const { return xyz.cols(); }
  bool empty() const { return xyz.cols() == 0; }

  /// Unit direction from the sensor to point i.
  Eigen::Vector3d ray_direction(Eigen::Index i) const {
    const double n = xyz.col(i).norm();
    return n > 0 ? Eigen::Vector3d(xyz.col(i) / n) : Eigen::Vector3d::UnitX();
  }

  /// Per-point velocity 3-vector: radial speed along the ray direction.
  Eigen::Matrix3Xd velocity_vectors() const {
    Eigen::Matrix3Xd v(3, size());
    for (Eigen::Index i = 0; i < size(); ++i) v.col(i) = radial_velocity(i) * ray_direction(i);
    return v;
  }

  void append(const Eigen::Vector3d& p, double vr, double inten);
};

/// Adds the ego's own motion back onto the Doppler measurement so that
/// static structure reads zero: v_r += v_ego . dir.
PointCloud compensate_ego_velocity(const PointCloud& cloud, const Eigen::Vector3d& ego_velocity);

/// "LRPC" binary format: magic, u32 version, f64 timestamp, u32 count,
/// count x 5 little-endian f32 (x, y, z, v_r, intensity).
void write_lrpc(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_lrpc(const std::filesystem::path& path);

/// ASCII PLY with x y z vr float properties.
void write_ply(const std::filesystem::path& path, const PointCloud& cloud);

}  // namespace svfuse

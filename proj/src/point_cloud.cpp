#include "svfuse/point_cloud.hpp"

#include <cstdio>
#include <fstream>

#include "svfuse/binary_io.hpp"

namespace svfuse {

void PointCloud::append(const Eigen::Vector3d& p, double vr, double inten) {
  const Eigen::Index n = size();
  xyz.conservativeResize(3, n + 1);
  radial_velocity.conservativeResize(n + 1);
  intensity.conservativeResize(n + 1);
  xyz.col(n) = p;
  radial_velocity(n) = vr;
  intensity(n) = inten;
}

PointCloud compensate_ego_velocity(const PointCloud& cloud, const Eigen::Vector3d& ego_velocity) {
  PointCloud out = cloud;
  for (Eigen::Index i = 0; i < cloud.size(); ++i) out.radial_velocity(i) += ego_velocity.dot(cloud.ray_direction(i));
  return out;
}

namespace {
constexpr std::uint32_t kLrpcVersion = 1;
}

void write_lrpc(const std::filesystem::path& path, const PointCloud& cloud) {
  binio::Writer w;
  w.bytes("LRPC");
  w.u32(kLrpcVersion);
  w.f64(cloud.timestamp);
  w.u32(static_cast<std::uint32_t>(cloud.size()));
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    w.f32(static_cast<float>(cloud.xyz(0, i)));
    w.f32(static_cast<float>(cloud.xyz(1, i)));
    w.f32(static_cast<float>(cloud.xyz(2, i)));
    w.f32(static_cast<float>(cloud.radial_velocity(i)));
    w.f32(static_cast<float>(cloud.intensity(i)));
  }
  w.save(path);
}

PointCloud read_lrpc(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("LRPC");
  const std::uint32_t version = r.u32();
  if (version != kLrpcVersion) throw DataError("unsupported LRPC version in " + path.string());
  const double t = r.f64();
  const std::uint32_t n = r.u32();
  PointCloud cloud(n);
  cloud.timestamp = t;
  for (std::uint32_t i = 0; i < n; ++i) {
    cloud.xyz(0, i) = r.f32();
    cloud.xyz(1, i) = r.f32();
    cloud.xyz(2, i) = r.f32();
    cloud.radial_velocity(i) = r.f32();
    cloud.intensity(i) = r.f32();
  }
  return cloud;
}

void write_ply(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << "ply\nformat ascii 1.0\nelement vertex " << cloud.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nproperty float vr\nend_header\n";
  char line[128];
  for (Eigen::Index i = 0; i < cloud.size(); ++i) {
    std::snprintf(line, sizeof(line), "%.6g %.6g %.6g %.6g\n", cloud.xyz(0, i), cloud.xyz(1, i), cloud.xyz(2, i),
                  cloud.radial_velocity(i));
    out << line;
  }
}

}  // namespace svfuse

#pragma once

// JSON mappings for simulator types. Objects are read strictly: unknown
// keys are rejected, missing keys keep their defaults.

#include <json.hpp>

#include <set>
#include <stdexcept>
#include <string>

#include "svfuse/sim.hpp"

namespace svfuse {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw std::invalid_argument(what + ": expected a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw std::invalid_argument(what + ": unknown key \"" + k + "\"");
}

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->template get<T>();
}

inline void to_json(nlohmann::json& j, const SE3d& p) {
  j = {{"rotation", {p.rotation(0, 0), p.rotation(0, 1), p.rotation(0, 2), p.rotation(1, 0), p.rotation(1, 1),
                     p.rotation(1, 2), p.rotation(2, 0), p.rotation(2, 1), p.rotation(2, 2)}},
       {"translation", {p.translation(0), p.translation(1), p.translation(2)}}};
}

inline void from_json(const nlohmann::json& j, SE3d& p) {
  reject_unknown_keys(j, {"rotation", "translation"}, "pose");
  const auto r = j.at("rotation").get<std::vector<double>>();
  const auto t = j.at("translation").get<std::vector<double>>();
  if (r.size() != 9 || t.size() != 3) throw std::invalid_argument("pose: rotation needs 9 and translation 3 values");
  for (int i = 0; i < 9; ++i) p.rotation(i / 3, i % 3) = r[std::size_t(i)];
  p.translation = Eigen::Vector3d(t[0], t[1], t[2]);
}

inline nlohmann::json vec3_json(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }

inline Eigen::Vector3d vec3_from(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  if (v.size() != 3) throw std::invalid_argument("expected a 3-vector");
  return {v[0], v[1], v[2]};
}

inline void to_json(nlohmann::json& j, const SceneActor& a) {
  j = {{"center", vec3_json(a.center)},
       {"size", vec3_json(a.size)},
       {"yaw", a.yaw},
       {"velocity", vec3_json(a.velocity)},
       {"class", a.cls}};
}

inline void from_json(const nlohmann::json& j, SceneActor& a) {
  reject_unknown_keys(j, {"center", "size", "yaw", "velocity", "class"}, "actor");
  a.center = vec3_from(j.at("center"));
  a.size = vec3_from(j.at("size"));
  a.yaw = j.at("yaw").get<double>();
  a.velocity = vec3_from(j.at("velocity"));
  a.cls = j.at("class").get<std::string>();
  if ((a.size.array() <= 0).any()) throw std::invalid_argument("actor: size must be positive");
}

inline void to_json(nlohmann::json& j, const Camerad& c) {
  j = {{"fx", c.K(0, 0)}, {"fy", c.K(1, 1)}, {"cx", c.K(0, 2)}, {"cy", c.K(1, 2)},
       {"width", c.width}, {"height", c.height}, {"camera_from_ego", c.camera_from_ego}};
}

inline void from_json(const nlohmann::json& j, Camerad& c) {
  reject_unknown_keys(j, {"fx", "fy", "cx", "cy", "width", "height", "camera_from_ego"}, "camera");
  Eigen::Matrix3d K = Eigen::Matrix3d::Identity();
  K(0, 0) = j.at("fx").get<double>();
  K(1, 1) = j.at("fy").get<double>();
  K(0, 2) = j.at("cx").get<double>();
  K(1, 2) = j.at("cy").get<double>();
  c = Camerad(K, j.at("camera_from_ego").get<SE3d>(), j.at("width").get<int>(), j.at("height").get<int>());
}

inline void to_json(nlohmann::json& j, const LidarConfig& c) {
  j = {{"channels", c.channels},
       {"elevation_min_deg", c.elevation_min_deg},
       {"elevation_max_deg", c.elevation_max_deg},
       {"azimuth_fov_deg", c.azimuth_fov_deg},
       {"azimuth_resolution_deg", c.azimuth_resolution_deg},
       {"max_range", c.max_range},
       {"range_noise", c.range_noise},
       {"velocity_noise", c.velocity_noise}};
}

inline void from_json(const nlohmann::json& j, LidarConfig& c) {
  reject_unknown_keys(j,
                      {"channels", "elevation_min_deg", "elevation_max_deg", "azimuth_fov_deg",
                       "azimuth_resolution_deg", "max_range", "range_noise", "velocity_noise"},
                      "lidar");
  read_if(j, "channels", c.channels);
  read_if(j, "elevation_min_deg", c.elevation_min_deg);
  read_if(j, "elevation_max_deg", c.elevation_max_deg);
  read_if(j, "azimuth_fov_deg", c.azimuth_fov_deg);
  read_if(j, "azimuth_resolution_deg", c.azimuth_resolution_deg);
  read_if(j, "max_range", c.max_range);
  read_if(j, "range_noise", c.range_noise);
  read_if(j, "velocity_noise", c.velocity_noise);
}

inline void to_json(nlohmann::json& j, const SimConfig& c) {
  j = {{"ego_speed", c.ego_speed},
       {"ego_yaw_rate", c.ego_yaw_rate},
       {"actor_count", c.actor_count},
       {"actor_min_range", c.actor_min_range},
       {"actor_max_range", c.actor_max_range},
       {"frame_rate", c.frame_rate},
       {"sensor_height", c.sensor_height},
       {"guard_rails", c.guard_rails},
       {"lidar", c.lidar},
       {"cameras", c.cameras},
       {"seed", c.seed},
       {"sequence_id", c.sequence_id}};
}

inline void from_json(const nlohmann::json& j, SimConfig& c) {
  reject_unknown_keys(j,
                      {"ego_speed", "ego_yaw_rate", "actor_count", "actor_min_range", "actor_max_range", "frame_rate",
                       "sensor_height", "guard_rails", "lidar", "cameras", "seed", "sequence_id"},
                      "sim");
  read_if(j, "ego_speed", c.ego_speed);
  read_if(j, "ego_yaw_rate", c.ego_yaw_rate);
  read_if(j, "actor_count", c.actor_count);
  read_if(j, "actor_min_range", c.actor_min_range);
  read_if(j, "actor_max_range", c.actor_max_range);
  read_if(j, "frame_rate", c.frame_rate);
  read_if(j, "sensor_height", c.sensor_height);
  read_if(j, "guard_rails", c.guard_rails);
  read_if(j, "lidar", c.lidar);
  read_if(j, "cameras", c.cameras);
  read_if(j, "seed", c.seed);
  read_if(j, "sequence_id", c.sequence_id);
}

}  // namespace svfuse

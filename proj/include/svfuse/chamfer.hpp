#pragma once

#include <Eigen/Dense>

#include <vector>

#include "svfuse/point_cloud.hpp"

namespace svfuse {

/// Static 3-d tree over a point set (median splits, leaves of up to 8).
class KdTree {
 public:
  explicit KdTree(const Eigen::Matrix3Xd& points);

  /// Squared distance to the nearest stored point (and its column index).
  double nearest_squared(const Eigen::Vector3d& q, Eigen::Index* index = nullptr) const;

  Eigen::Index size() const { return points_.cols(); }

 private:
  struct Node {
    int begin = 0, end = 0;  // range in order_
    int axis = -1;           // -1: leaf
    double split = 0.0;
    int left = -1, right = -1;
  };

  int build(int begin, int end);
  void search(int node, const Eigen::Vector3d& q, double& best, Eigen::Index& best_index) const;

  Eigen::Matrix3Xd points_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

/// mean_a min_b |a - b|^2 + mean_b min_a |a - b|^2 (squared metres).
double chamfer_distance(const Eigen::Matrix3Xd& a, const Eigen::Matrix3Xd& b);
double chamfer_distance(const PointCloud& a, const PointCloud& b);

/// O(|A| |B|) reference for the same quantity.
double chamfer_distance_brute_force(const Eigen::Matrix3Xd& a, const Eigen::Matrix3Xd& b);

inline constexpr const char* kChamferDefinition =
    "CD(A,B) = mean_{a in A} min_{b in B} |a-b|^2 + mean_{b in B} min_{a in A} |a-b|^2, squared metres";

}  // namespace svfuse

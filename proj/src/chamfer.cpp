#include "svfuse/chamfer.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace svfuse {

namespace {

constexpr int kLeafSize = 8;

double one_sided(const Eigen::Matrix3Xd& from, const KdTree& to) {
  // fixed-order summation keeps the result independent of tree layout
  double s = 0;
  for (Eigen::Index i = 0; i < from.cols(); ++i) s += to.nearest_squared(from.col(i));
  return s / double(from.cols());
}

}  // namespace

KdTree::KdTree(const Eigen::Matrix3Xd& points) : points_(points), order_(std::size_t(points.cols())) {
  std::iota(order_.begin(), order_.end(), 0);
  if (points_.cols() > 0) build(0, int(points_.cols()));
}

int KdTree::build(int begin, int end) {
  const int id = int(nodes_.size());
  nodes_.push_back(Node{begin, end});
  if (end - begin <= kLeafSize) return id;
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
  for (int i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_.col(order_[std::size_t(i)]));
    hi = hi.cwiseMax(points_.col(order_[std::size_t(i)]));
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  const int mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](int a, int b) { return points_(axis, a) < points_(axis, b); });
  const double split = points_(axis, order_[std::size_t(mid)]);
  const int left = build(begin, mid);
  const int right = build(mid, end);
  Node& n = nodes_[std::size_t(id)];
  n.axis = axis;
  n.split = split;
  n.left = left;
  n.right = right;
  return id;
}

void KdTree::search(int node, const Eigen::Vector3d& q, double& best, Eigen::Index& best_index) const {
  const Node& n = nodes_[std::size_t(node)];
  if (n.axis < 0) {
    for (int i = n.begin; i < n.end; ++i) {
      const int c = order_[std::size_t(i)];
      const double d = (points_.col(c) - q).squaredNorm();
      if (d < best || (d == best && c < best_index)) {
        best = d;
        best_index = c;
      }
    }
    return;
  }
  const double diff = q(n.axis) - n.split;
  const int near = diff < 0 ? n.left : n.right;
  const int far = diff < 0 ? n.right : n.left;
  search(near, q, best, best_index);
  if (diff * diff <= best) search(far, q, best, best_index);
}

double KdTree::nearest_squared(const Eigen::Vector3d& q, Eigen::Index* index) const {
  if (points_.cols() == 0) throw std::invalid_argument("KdTree: no points");
  double best = std::numeric_limits<double>::infinity();
  Eigen::Index best_index = -1;
  search(0, q, best, best_index);
  if (index) *index = best_index;
  return best;
}

double chamfer_distance(const Eigen::Matrix3Xd& a, const Eigen::Matrix3Xd& b) {
  if (a.cols() == 0 || b.cols() == 0) throw std::invalid_argument("empty cloud in CD");
  return one_sided(a, KdTree(b)) + one_sided(b, KdTree(a));
}

double chamfer_distance(const PointCloud& a, const PointCloud& b) { return chamfer_distance(a.xyz, b.xyz); }

double chamfer_distance_brute_force(const Eigen::Matrix3Xd& a, const Eigen::Matrix3Xd& b) {
  if (a.cols() == 0 || b.cols() == 0) throw std::invalid_argument("empty cloud in CD");
  auto side = [](const Eigen::Matrix3Xd& from, const Eigen::Matrix3Xd& to) {
    double s = 0;
    for (Eigen::Index i = 0; i < from.cols(); ++i) s += (to.colwise() - from.col(i)).colwise().squaredNorm().minCoeff();
    return s / double(from.cols());
  };
  return side(a, b) + side(b, a);
}

}  // namespace svfuse

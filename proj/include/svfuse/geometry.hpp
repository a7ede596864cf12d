#pragma once

#include <Eigen/Dense>
#include <Eigen/Geometry>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace svfuse {

template <typename Scalar>
using Matrix3 = Eigen::Matrix<Scalar, 3, 3>;
template <typename Scalar>
using Vector3 = Eigen::Matrix<Scalar, 3, 1>;
template <typename Scalar>
using Matrix3X = Eigen::Matrix<Scalar, 3, Eigen::Dynamic>;

namespace detail {
template <typename Scalar>
constexpr Scalar orthonormal_tolerance() {
  if constexpr (sizeof(Scalar) >= 8) {
    return Scalar(1e-9);
  } else {
    return Scalar(1e-5);
  }
}
}  // namespace detail

/// Rigid transform p -> R p + T. Ego frame convention: x forward, y left, z up.
template <typename Scalar>
struct SE3Pose {
  Matrix3<Scalar> rotation = Matrix3<Scalar>::Identity();
  Vector3<Scalar> translation = Vector3<Scalar>::Zero();

  SE3Pose() = default;
  SE3Pose(const Matrix3<Scalar>& R, const Vector3<Scalar>& T) : rotation(R), translation(T) {
    if (!is_valid()) {
      throw std::invalid_argument("SE3Pose: rotation is not orthonormal with det +1");
    }
  }

  static SE3Pose Identity() { return SE3Pose(); }

  static SE3Pose from_yaw(Scalar yaw, const Vector3<Scalar>& T) {
    SE3Pose p;
    p.rotation = Eigen::AngleAxis<Scalar>(yaw, Vector3<Scalar>::UnitZ()).toRotationMatrix();
    p.translation = T;
    return p;
  }

  bool is_valid(Scalar tol = detail::orthonormal_tolerance<Scalar>()) const {
    const Matrix3<Scalar> err = rotation.transpose() * rotation - Matrix3<Scalar>::Identity();
    return err.cwiseAbs().maxCoeff() <= tol && std::abs(rotation.determinant() - Scalar(1)) <= tol;
  }

  SE3Pose inverse() const {
    SE3Pose inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  /// (this * other)(p) = this(other(p))
  SE3Pose operator*(const SE3Pose& other) const {
    SE3Pose out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  Vector3<Scalar> operator*(const Vector3<Scalar>& p) const { return rotation * p + translation; }

  template <typename NewScalar>
  SE3Pose<NewScalar> cast() const {
    SE3Pose<NewScalar> out;
    out.rotation = rotation.template cast<NewScalar>();
    out.translation = translation.template cast<NewScalar>();
    return out;
  }
};

using SE3d = SE3Pose<double>;
using SE3f = SE3Pose<float>;

/// Applies `pose` to every column of a 3xN point matrix.
template <typename Derived, typename Scalar = typename Derived::Scalar>
Matrix3X<Scalar> transform_points(const Eigen::MatrixBase<Derived>& points, const SE3Pose<Scalar>& pose) {
  static_assert(Derived::RowsAtCompileTime == 3 || Derived::RowsAtCompileTime == Eigen::Dynamic);
  Matrix3X<Scalar> out = pose.rotation * points;
  out.colwise() += pose.translation;
  return out;
}

/// Pinhole camera. Pixel (u, v) = (column, row), origin top-left, integer
/// coordinates at pixel centers. Camera frame: x right, y down, z forward.
template <typename Scalar>
struct CameraModel {
  Matrix3<Scalar> K = Matrix3<Scalar>::Identity();
  SE3Pose<Scalar> camera_from_ego;
  int width = 0;
  int height = 0;

  CameraModel() = default;
  CameraModel(const Matrix3<Scalar>& intrinsics, const SE3Pose<Scalar>& extrinsics, int w, int h)
      : K(intrinsics), camera_from_ego(extrinsics), width(w), height(h) {
    if (!is_valid()) throw std::invalid_argument("CameraModel: invalid intrinsics or image size");
  }

  /// Forward-looking camera mounted at `offset` in the ego frame, optical axis along ego +x rotated by `yaw`.
  static CameraModel forward_looking(Scalar fx, Scalar fy, int w, int h, const Vector3<Scalar>& offset,
                                     Scalar yaw = Scalar(0)) {
    Matrix3<Scalar> K = Matrix3<Scalar>::Identity();
    K(0, 0) = fx;
    K(1, 1) = fy;
    K(0, 2) = Scalar(w - 1) / 2;
    K(1, 2) = Scalar(h - 1) / 2;
    // rows: camera axes expressed in the ego frame
    Matrix3<Scalar> axes;
    axes << 0, -1, 0,  //
        0, 0, -1,      //
        1, 0, 0;
    const Matrix3<Scalar> ego_from_mount = Eigen::AngleAxis<Scalar>(yaw, Vector3<Scalar>::UnitZ()).toRotationMatrix();
    SE3Pose<Scalar> ego_from_cam;
    ego_from_cam.rotation = ego_from_mount * axes.transpose();
    ego_from_cam.translation = offset;
    return CameraModel(K, ego_from_cam.inverse(), w, h);
  }

  template <typename NewScalar>
  CameraModel<NewScalar> cast() const {
    return CameraModel<NewScalar>(K.template cast<NewScalar>(), camera_from_ego.template cast<NewScalar>(), width, height);
  }

  bool is_valid() const {
    const bool upper = K(1, 0) == 0 && K(2, 0) == 0 && K(2, 1) == 0 && K(2, 2) == 1;
    const bool focal = K(0, 0) > 0 && K(1, 1) > 0;
    const bool pp = K(0, 2) >= Scalar(-0.5) && K(0, 2) < Scalar(width) - Scalar(0.5) && K(1, 2) >= Scalar(-0.5) &&
                    K(1, 2) < Scalar(height) - Scalar(0.5);
    return upper && focal && pp && width > 0 && height > 0 && camera_from_ego.is_valid();
  }

  /// 16 calibration values: fx, fy, cx, cy, R (row-major), T.
  Eigen::Matrix<Scalar, 16, 1> calibration_vector() const {
    Eigen::Matrix<Scalar, 16, 1> v;
    v << K(0, 0), K(1, 1), K(0, 2), K(1, 2), camera_from_ego.rotation(0, 0), camera_from_ego.rotation(0, 1),
        camera_from_ego.rotation(0, 2), camera_from_ego.rotation(1, 0), camera_from_ego.rotation(1, 1),
        camera_from_ego.rotation(1, 2), camera_from_ego.rotation(2, 0), camera_from_ego.rotation(2, 1),
        camera_from_ego.rotation(2, 2), camera_from_ego.translation(0), camera_from_ego.translation(1),
        camera_from_ego.translation(2);
    return v;
  }
};

using Camerad = CameraModel<double>;

template <typename Scalar>
struct PixelHit {
  Scalar u;
  Scalar v;
  Scalar depth;
};

/// Projects an ego-frame point; std::nullopt when behind the camera or outside the image.
template <typename Scalar>
std::optional<PixelHit<Scalar>> project_to_image(const Vector3<Scalar>& point_ego, const CameraModel<Scalar>& cam) {
  const Vector3<Scalar> pc = cam.camera_from_ego * point_ego;
  if (!(pc.z() > Scalar(0))) return std::nullopt;
  const Vector3<Scalar> uvw = cam.K * pc;
  const Scalar u = uvw.x() / uvw.z();
  const Scalar v = uvw.y() / uvw.z();
  if (u < Scalar(-0.5) || u >= Scalar(cam.width) - Scalar(0.5) || v < Scalar(-0.5) ||
      v >= Scalar(cam.height) - Scalar(0.5)) {
    return std::nullopt;
  }
  return PixelHit<Scalar>{u, v, pc.z()};
}

/// depth * K^-1 (u, v, 1), expressed in the ego frame.
template <typename Scalar>
Vector3<Scalar> unproject_pixel(Scalar u, Scalar v, Scalar depth, const CameraModel<Scalar>& cam) {
  if (!(depth > Scalar(0))) throw std::invalid_argument("unproject_pixel: depth must be positive");
  const Vector3<Scalar> ray = cam.K.template triangularView<Eigen::Upper>().solve(Vector3<Scalar>(u, v, Scalar(1)));
  return cam.camera_from_ego.inverse() * (depth * ray);
}

}  // namespace svfuse

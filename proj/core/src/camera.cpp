#include "splatfix/camera.hpp"

#include <cmath>
#include <stdexcept>

namespace splatfix {

Camera Camera::scaled(int factor) const {
  Camera c = *this;
  c.fx *= factor;
  c.fy *= factor;
  c.cx *= factor;
  c.cy *= factor;
  c.width *= factor;
  c.height *= factor;
  return c;
}

void Camera::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) throw std::invalid_argument("camera: focal lengths must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera: image size must be positive");
  if (!(cx >= 0.0) || !(cx < width) || !(cy >= 0.0) || !(cy < height))
    throw std::invalid_argument("camera: principal point outside image");
  if (!pose_wc.allFinite()) throw std::invalid_argument("camera: non-finite pose");
  const Eigen::Matrix3d r = rot_wc();
  const double err = (r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (err > 1e-6) throw std::invalid_argument("camera: rotation not orthonormal");
  const Eigen::Vector4d bottom = pose_wc.row(3);
  if ((bottom - Eigen::Vector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > 1e-12)
    throw std::invalid_argument("camera: pose bottom row must be [0 0 0 1]");
}

Camera look_at_camera(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                      double fx, double fy, double cx, double cy, int width, int height,
                      const Eigen::Vector3d& up_hint) {
  Eigen::Vector3d f = target - eye;
  if (f.norm() < 1e-12) throw std::invalid_argument("look_at_camera: eye coincides with target");
  f.normalize();

  Eigen::Vector3d up = up_hint;
  if (f.cross(up).norm() < 1e-8) up = Eigen::Vector3d(0, 0, 1);
  const Eigen::Vector3d x = f.cross(up).normalized();
  const Eigen::Vector3d y = f.cross(x);

  Camera cam;
  cam.fx = fx;
  cam.fy = fy;
  cam.cx = cx;
  cam.cy = cy;
  cam.width = width;
  cam.height = height;
  cam.pose_wc.setIdentity();
  cam.pose_wc.block<3, 1>(0, 0) = x;
  cam.pose_wc.block<3, 1>(0, 1) = y;
  cam.pose_wc.block<3, 1>(0, 2) = f;
  cam.pose_wc.block<3, 1>(0, 3) = eye;
  cam.validate();
  return cam;
}

}  // namespace splatfix

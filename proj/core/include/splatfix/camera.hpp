#pragma once

#include <Eigen/Dense>

namespace splatfix {

// Pinhole camera. pose_wc maps camera coordinates to world coordinates;
// the camera frame is +X right, +Y down, +Z forward (into the scene).
// Pixel (row i, col j) has continuous center (j + 0.5, i + 0.5).
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  Eigen::Matrix4d pose_wc = Eigen::Matrix4d::Identity();

  Eigen::Matrix3d rot_wc() const { return pose_wc.block<3, 3>(0, 0); }
  Eigen::Vector3d position() const { return pose_wc.block<3, 1>(0, 3); }

  Eigen::Vector3d world_to_cam(const Eigen::Vector3d& p) const {
    return rot_wc().transpose() * (p - position());
  }
  Eigen::Vector3d cam_to_world(const Eigen::Vector3d& p) const {
    return rot_wc() * p + position();
  }

  // Projects a camera-space point; valid only for z > 0.
  Eigen::Vector2d project_cam(const Eigen::Vector3d& pc) const {
    return {fx * pc.x() / pc.z() + cx, fy * pc.y() / pc.z() + cy};
  }

  // World-space direction through pixel center, scaled so that the ray
  // parameter equals camera-space depth (unit z in camera coordinates).
  Eigen::Vector3d ray_dir_world(double u, double v) const {
    const Eigen::Vector3d d((u - cx) / fx, (v - cy) / fy, 1.0);
    return rot_wc() * d;
  }

  bool in_image(const Eigen::Vector2d& uv) const {
    return uv.x() >= 0.0 && uv.x() < width && uv.y() >= 0.0 && uv.y() < height;
  }

  // Same view rendered at an integer multiple of the resolution.
  Camera scaled(int factor) const;

  // Throws std::invalid_argument on non-finite or inconsistent parameters,
  // or if the rotation block is not orthonormal within 1e-6.
  void validate() const;
};

// Places a camera at eye looking at target. up_hint is the world-space up
// direction; the camera Y axis ends up pointing opposite to it (image down).
Camera look_at_camera(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                      double fx, double fy, double cx, double cy, int width, int height,
                      const Eigen::Vector3d& up_hint = Eigen::Vector3d(0, 1, 0));

}  // namespace splatfix

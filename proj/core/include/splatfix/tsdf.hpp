#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "splatfix/camera.hpp"
#include "splatfix/image.hpp"
#include "splatfix/scene.hpp"

namespace splatfix {

struct TsdfConfig {
  int dims = 64;                  // cubic grid
  double truncation_voxels = 4.0; // truncation band in voxel units
  double weight_cap = 64.0;
  double margin_frac = 0.05;      // volume padding around the observed points
};

// Voxel-grid TSDF. sdf is stored normalized to [-1, 1] in truncation units;
// voxel (i,j,k) has center origin + (i+0.5, j+0.5, k+0.5)*voxel_size.
struct TsdfVolume {
  Eigen::Vector3i dims = Eigen::Vector3i::Zero();
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();
  double voxel_size = 0.0;
  double truncation = 0.0;  // meters
  double weight_cap = 64.0;
  std::vector<double> sdf;     // dims^3, x-fastest
  std::vector<double> weight;  // dims^3
  std::vector<double> color;   // dims^3 * 3

  size_t index(int i, int j, int k) const {
    return (static_cast<size_t>(k) * dims.y() + j) * dims.x() + i;
  }
  bool in_grid(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims.x() && j < dims.y() && k < dims.z();
  }
  Eigen::Vector3d voxel_center(int i, int j, int k) const {
    return origin + voxel_size * Eigen::Vector3d(i + 0.5, j + 0.5, k + 0.5);
  }
};

TsdfVolume make_tsdf_volume(const Eigen::Vector3d& origin, double voxel_size, int dims,
                            double truncation, double weight_cap = 64.0);

// Cubic volume sized from the backprojected depth points of all frames.
// Throws if no frame carries valid depth.
TsdfVolume fit_tsdf_volume(const std::vector<CaptureFrame>& frames, const TsdfConfig& cfg = {});

// Projective integration: each voxel is projected into the frame and its
// signed distance along the camera z axis is folded into the running
// weighted average, truncated to the configured band. Pixels with zero
// depth and voxels projecting outside the image are ignored.
void tsdf_integrate(TsdfVolume& vol, const CaptureFrame& frame);

struct MeshRender {
  Image rgb;    // 3-channel, background black where no surface was found
  Image depth;  // 1-channel camera-z, 0 where no surface was found
};

// Marches each pixel ray at half-voxel steps; a surface is declared at the
// first positive-to-negative sign change between consecutive samples whose
// trilinear neighborhoods are fully observed, with the crossing located by
// linear interpolation. Color is trilinear at the crossing point.
MeshRender raycast_tsdf(const TsdfVolume& vol, const Camera& cam);

void save_tsdf(const std::string& dir, const TsdfVolume& vol);
TsdfVolume load_tsdf(const std::string& dir);

}  // namespace splatfix

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "splatfix/camera.hpp"
#include "splatfix/image.hpp"
#include "splatfix/scene.hpp"

namespace splatfix {

// Anisotropic 3D Gaussians, structure-of-arrays. Rotations are quaternions
// (w,x,y,z); scales are stored in log space; opacities and colors are
// logits decoded through a sigmoid at render time.
struct GaussianCloud {
  std::vector<double> positions;       // 3N
  std::vector<double> rotations;       // 4N
  std::vector<double> log_scales;      // 3N
  std::vector<double> opacity_logits;  // N
  std::vector<double> color_logits;    // 3N

  int size() const { return static_cast<int>(opacity_logits.size()); }
  void resize(int n);
  void renormalize_rotations();
  // Throws std::invalid_argument on inconsistent sizes or non-finite values.
  void validate() const;
};

struct RenderConfig {
  double alpha_clamp = 0.999;  // per-splat alpha ceiling
  double t_stop = 1e-4;        // stop compositing when transmittance drops below
  double alpha_cut = 1e-6;     // ignore contributions below this alpha
  double znear = 0.02;
  double dilation = 0.3;       // screen-space low-pass added to the 2D covariance
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
};

struct RenderOutput {
  Image rgb;    // 3-channel
  Image alpha;  // 1-channel accumulated opacity
  Image depth;  // 1-channel alpha-weighted expected camera-z
};

// Per-pixel contribution lists captured by the forward pass so the backward
// pass can replay compositing exactly. Contents are internal.
struct RenderCache {
  struct Proj {
    int idx;
    double z, mx, my;
    double ca, cb, cc;  // conic (inverse 2D covariance)
    double o;
    double col[3];
    int x0, x1, y0, y1;
  };
  std::vector<Proj> splats;  // visible, depth-sorted
  std::vector<int32_t> contrib_splat;
  std::vector<double> contrib_alpha;
  std::vector<uint32_t> pix_offset;  // H*W + 1
  std::vector<double> final_t;
  int width = 0, height = 0;
};

struct CloudGrads {
  std::vector<double> positions, rotations, log_scales, opacity_logits, color_logits;
  std::vector<double> screen_grad_norm;  // per-splat 2D positional gradient norm
  std::vector<uint8_t> visible;
  void resize_for(const GaussianCloud& cloud);
  void zero();
};

// EWA projection and front-to-back alpha compositing. Deterministic: splats
// are composited in (depth, index) order.
RenderOutput render(const GaussianCloud& cloud, const Camera& cam, const RenderConfig& cfg = {});

RenderOutput render_forward(const GaussianCloud& cloud, const Camera& cam,
                            const RenderConfig& cfg, RenderCache& cache);

// Accumulates parameter gradients for one rendered view. dl_dalpha and
// dl_ddepth may be null. grads must be sized via resize_for beforehand.
void render_backward(const GaussianCloud& cloud, const Camera& cam, const RenderConfig& cfg,
                     const RenderCache& cache, const Image& dl_drgb, const Image* dl_dalpha,
                     const Image* dl_ddepth, CloudGrads& grads);

struct PhotometricLossConfig {
  double lambda = 0.2;  // SSIM weight: (1-lambda)*L1 + lambda*(1-SSIM)
  int ssim_window = 11;
  double ssim_sigma = 1.5;
};

double photometric_loss(const Image& rendered, const Image& target,
                        const PhotometricLossConfig& cfg = {}, Image* grad_rendered = nullptr);

struct InitConfig {
  double scale_mult = 1.0;  // splat radius relative to the local sample spacing
  double opacity = 0.5;
};

// Seeds a cloud from every pixel_stride-th pixel (flattened order) that has
// valid depth: position by backprojection, color from the pixel, isotropic
// scale from the depth-dependent sample footprint. Throws if no frame has
// valid depth.
GaussianCloud init_from_rgbd(const std::vector<CaptureFrame>& frames, int pixel_stride,
                             const InitConfig& cfg = {});

struct LrTable {
  double position = 1.6e-4;  // scaled by scene extent inside the trainer
  double color = 2.5e-3;
  double opacity = 5e-2;
  double scale = 5e-3;
  double rotation = 1e-3;
};

struct DensityConfig {
  int interval = 100;
  double grad_threshold = 1.2e-3;   // mean per-view screen-gradient norm
  double split_scale_frac = 0.015;  // world-size boundary between clone and split
  double split_shrink = 1.6;
  double opacity_prune = 0.012;
  double max_scale_frac = 0.5;      // prune runaway splats
  int max_splats = 80000;
};

struct DensityResult {
  int cloned = 0, split = 0, pruned = 0;
};

class SplatTrainer {
 public:
  SplatTrainer(GaussianCloud cloud, double scene_extent);

  GaussianCloud& cloud() { return cloud_; }
  const GaussianCloud& cloud() const { return cloud_; }
  double scene_extent() const { return extent_; }

  // Adam step over the five parameter groups. Throws std::runtime_error on
  // non-finite gradients; the step is rejected and state stays untouched.
  void optimize_step(const CloudGrads& grads, const LrTable& lr);

  // Clone small / split large high-gradient splats, prune transparent and
  // oversized ones, using screen-gradient statistics gathered since the
  // last call. Optimizer moments follow survivors; new entries start fresh.
  DensityResult density_control(const DensityConfig& cfg);

  void zero_stats();

 private:
  GaussianCloud cloud_;
  double extent_;
  int64_t step_ = 0;
  struct Moments {
    std::vector<double> m, v;
  };
  Moments pos_, rot_, scale_, opa_, col_;
  std::vector<double> grad_sum_;
  std::vector<int> grad_cnt_;

  void ensure_state_sizes();
  friend struct SplatTrainerTestPeek;
};

struct FitConfig {
  int iterations = 700;
  uint64_t seed = 1;
  LrTable lr;
  RenderConfig render;
  PhotometricLossConfig loss;
  DensityConfig density;
  double densify_stop_frac = 0.8;  // no density control in the final stretch
};

struct FitReport {
  int iterations = 0;
  int final_count = 0;
  int rejected_steps = 0;
  DensityResult density_totals;
  double mean_train_psnr = 0.0;
  std::vector<double> loss_history;  // one entry per iteration
};

// Full reconstruction loop: seeded frame order, render, photometric loss,
// backward, Adam, periodic density control.
GaussianCloud fit_cloud(GaussianCloud init, const std::vector<CaptureFrame>& frames,
                        const FitConfig& cfg, FitReport* report = nullptr);

// Position bounding-box diagonal, floored at 1e-3; the scene scale used to
// normalize position learning rates and density thresholds.
double cloud_extent(const GaussianCloud& cloud);

double sigmoid(double x);
double logit(double p);

void save_gaussians(const std::string& dir, const GaussianCloud& cloud);
GaussianCloud load_gaussians(const std::string& dir);

}  // namespace splatfix

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splatfix/codec.hpp"
#include "splatfix/diffusion.hpp"
#include "splatfix/scene.hpp"
#include "splatfix/splat.hpp"
#include "splatfix/tsdf.hpp"
#include "splatfix/unet.hpp"

namespace splatfix {

struct DistillConfig {
  int per_image_iters = 20;
  int global_iters = 50;
  int keyframe_stride = 5;
  uint64_t seed = 1;
  LrTable lr;
  RenderConfig render;
  PhotometricLossConfig loss;
  DensityConfig density;

  // Hole seeding at the start of per-view distillation: repaired pixels the
  // cloud does not cover yet (render alpha below the threshold) are lifted to
  // 3D at mesh depth — neighbor-filled where the mesh is also blind — so the
  // photometric loss has something to optimize inside holes.
  bool seed_unobserved = true;
  double seed_alpha_threshold = 0.15;
  int seed_stride = 2;
  double seed_opacity = 0.5;
  double seed_scale_mult = 1.0;
};

struct FixerModels {
  Codec* codec = nullptr;
  nn::UNet<float>* net = nullptr;
  NoiseSchedule schedule;
  std::vector<std::string> condition_order;
  std::string checkpoint_hash;  // stamped onto repaired dataset entries
  int ddim_steps = 4;
};

// Render both conditions at the camera, push them through the fixer, decode.
// Deterministic given seed.
Image repair_view(const Camera& cam, const GaussianCloud& cloud, const TsdfVolume& volume,
                  FixerModels& models, uint64_t seed, const RenderConfig& render_cfg = {});

// Zero-depth pixels take the mean of their valid 8-neighbors, repeated until
// converged; leaves all-zero maps untouched.
Image fill_depth_holes(const Image& depth, int max_passes = 256);

// Adds splats for uncovered repaired pixels (see DistillConfig); returns how
// many were added.
int seed_unobserved_regions(GaussianCloud& cloud, const Camera& cam, const Image& fixed_image,
                            const Image& mesh_depth, const Image& alpha,
                            const DistillConfig& cfg);

// Per-view distillation: optional hole seeding at the iteration-0 boundary,
// then per_image_iters photometric steps against the fixed image with density
// control at its interval. Non-finite gradients propagate as errors.
GaussianCloud distill_view(GaussianCloud cloud, const Camera& cam, const Image& fixed_image,
                           const DistillConfig& cfg, const TsdfVolume* volume = nullptr,
                           double scene_extent = 0.0, std::vector<double>* loss_trace = nullptr);

struct AugmentedEntry {
  Image image;
  Camera camera;
  std::string origin;  // "captured_keyframe" | "repaired_view"
  double weight = 1.0;
  std::string fixer_hash;  // nonempty only for repaired entries
};

struct AugmentedDataset {
  std::vector<AugmentedEntry> entries;
};

// global_iters steps, each on one uniformly drawn entry (seeded), density
// control at its interval.
GaussianCloud global_refine(GaussianCloud cloud, const AugmentedDataset& dataset,
                            const DistillConfig& cfg, double scene_extent = 0.0,
                            std::vector<double>* loss_trace = nullptr);

struct ViewRepairRecord {
  int cam_index = 0;
  int seeded = 0;
  // against the repaired target (always available)
  double psnr_raw_vs_fixed = 0.0;
  double psnr_distilled_vs_fixed = 0.0;
  // against ground truth when the caller supplies it
  double psnr_raw_vs_gt = -1.0;
  double psnr_fixed_vs_gt = -1.0;
  double psnr_final_vs_gt = -1.0;
};

struct GsfixReport {
  std::vector<ViewRepairRecord> views;
  double keyframe_psnr_before = 0.0;
  double keyframe_psnr_after = 0.0;
  int initial_count = 0;
  int final_count = 0;
};

// The full loop: repair + distill each novel view, then refine over keyframes
// plus repaired views. Mutates cloud in place and leaves models untouched.
GsfixReport run_gsfix3d(GaussianCloud& cloud, const TsdfVolume& volume, FixerModels& models,
                        const std::vector<Camera>& novel_cams,
                        const std::vector<CaptureFrame>& frames, const DistillConfig& cfg,
                        uint64_t seed, const std::vector<Image>* novel_gt = nullptr,
                        std::vector<Image>* repaired_out = nullptr,
                        std::vector<Image>* final_renders_out = nullptr);

}  // namespace splatfix

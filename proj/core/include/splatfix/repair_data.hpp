#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splatfix/camera.hpp"
#include "splatfix/image.hpp"
#include "splatfix/rng.hpp"
#include "splatfix/scene.hpp"
#include "splatfix/splat.hpp"
#include "splatfix/tsdf.hpp"

namespace splatfix {

// One fine-tuning sample: both reconstruction renders plus the captured photo
// at the same pose. i_gt is never touched by augmentation.
struct TrainingTriplet {
  Image i_mesh, i_gs, i_gt;
  Camera camera;
  int frame_id = 0;
};

struct MaskSpec {
  Image mask;          // H×W×1 in [0,1], 1 = removed; binary until blurred
  std::string source;  // "procedural_blob" | "procedural_polygon"
  uint64_t seed = 0;
};

struct AugmentConfig {
  double p_shared = 0.5;
  double p_gs_only = 0.5;
  double blur_sigma = 1.5;
  double area_min = 0.02;
  double area_max = 0.40;
  int max_shapes = 4;
};

// Union of 1..max_shapes smooth blobs or polygon shapes, resampled (bounded)
// until the area fraction lands inside [area_min, area_max]. Draws one child
// seed from rng; the same MaskSpec::seed regenerates the identical mask.
MaskSpec generate_mask(Rng& rng, const AugmentConfig& cfg, int width, int height);
MaskSpec generate_mask_from_seed(uint64_t seed, const AugmentConfig& cfg, int width, int height);

// Same mask to black on both condition images; ground truth untouched.
TrainingTriplet apply_shared_mask(const TrainingTriplet& triplet, const Image& mask);

// Blurred mask multiplied into i_gs only.
TrainingTriplet apply_gs_mask(const TrainingTriplet& triplet, const Image& mask,
                              double blur_sigma);

// Independent coin flips for the shared and gs-only masks; both may fire.
TrainingTriplet augment(const TrainingTriplet& triplet, const AugmentConfig& cfg, Rng& rng);

// Renders every captured pose with both reconstructions: i_gs from the splat
// cloud, i_mesh from the TSDF raycast (black at misses), i_gt the capture.
std::vector<TrainingTriplet> build_triplets(const std::vector<CaptureFrame>& frames,
                                            const GaussianCloud& cloud, const TsdfVolume& volume,
                                            const RenderConfig& render_cfg = {});

// Directory layout: {dir}/{split}/{frame_id:05d}_{gt|gs|mesh}.png plus one
// poses.json per split (intrinsics + camera-to-world matrices).
void write_triplet_dataset(const std::string& dir, const std::string& split,
                           const std::vector<TrainingTriplet>& triplets);
std::vector<TrainingTriplet> read_triplet_dataset(const std::string& dir,
                                                  const std::string& split);

}  // namespace splatfix

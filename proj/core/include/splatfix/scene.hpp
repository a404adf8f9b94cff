#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "splatfix/camera.hpp"
#include "splatfix/image.hpp"

namespace splatfix {

enum class TextureKind { solid, checker, stripes, noise };

struct PrimitiveSpec {
  std::string type;  // "box" | "plane"
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  // Boxes: half-extents per axis. Planes: in-plane half-extents for the two
  // non-normal axes (the normal-axis entry is ignored).
  Eigen::Vector3d extents = Eigen::Vector3d::Ones();
  int axis = 1;  // planes only: normal axis (0=x, 1=y, 2=z)
  TextureKind texture = TextureKind::checker;
  Eigen::Vector3d base_rgb = Eigen::Vector3d(0.7, 0.7, 0.7);
  double tex_scale = 0.4;
};

struct SceneSpec {
  uint64_t seed = 1;
  Eigen::Vector3d background = Eigen::Vector3d::Zero();
  std::vector<PrimitiveSpec> primitives;

  std::string to_json() const;
  static SceneSpec from_json(const std::string& text);
};

void save_scene_spec(const std::string& path, const SceneSpec& spec);
SceneSpec load_scene_spec(const std::string& path);

// A cluttered desk-top arrangement with seeded jitter in placement and color.
SceneSpec make_default_scene_spec(uint64_t seed);

struct Primitive {
  PrimitiveSpec spec;
  Eigen::Vector3d secondary_rgb;  // contrast color for two-tone textures
  uint64_t tex_seed = 0;
  double phase_u = 0.0, phase_v = 0.0;
};

struct Scene {
  SceneSpec spec;
  std::vector<Primitive> prims;
  Eigen::Vector3d bbox_min, bbox_max;
  Eigen::Vector3d center() const { return 0.5 * (bbox_min + bbox_max); }
  double diameter() const { return (bbox_max - bbox_min).norm(); }
};

// Validates and instantiates a spec. Throws std::invalid_argument on an
// empty primitive list, non-positive extents, or bad axes.
Scene build_scene(const SceneSpec& spec);

struct Hit {
  double t = 0.0;  // camera-space depth (rays carry unit camera z)
  int prim = -1;
  Eigen::Vector3d point, normal;
};

// Nearest hit along origin + t*dir. Ties resolved toward the lower
// primitive index; iteration order is fixed so results are deterministic.
std::optional<Hit> intersect_scene(const Scene& scene, const Eigen::Vector3d& origin,
                                   const Eigen::Vector3d& dir, double t_min = 1e-6);

struct RgbdRender {
  Image rgb;    // 3-channel
  Image depth;  // 1-channel, 0 where no surface was hit
};

// Analytic render: per-pixel ray casts through pixel centers, two-sided
// Lambertian shading under a fixed directional light plus ambient, so the
// surface color is view-independent. Depth is camera-space z.
RgbdRender render_ground_truth(const Scene& scene, const Camera& cam);

// Fraction of pixels whose ray hits scene geometry.
double render_coverage(const Scene& scene, const Camera& cam);

struct TrajectoryConfig {
  double fov_deg = 55.0;
  double radius_scale = 1.45;     // orbit radius as a multiple of bbox radius
  double arc_deg = 220.0;         // azimuth span of the training sweep
  double max_step_deg = 24.0;     // cap on consecutive azimuth steps
  double elev_deg = 27.0;         // mean elevation above the scene center
  double elev_jitter_deg = 7.0;
  double min_coverage = 0.30;
  int resolution = 96;
};

// n cameras spread over a partial orbit, every view looking at the scene
// center with at least min_coverage of pixels on geometry. Deterministic in
// (scene, n, seed). Throws if n < 1 or coverage cannot be met.
std::vector<Camera> sample_training_trajectory(const Scene& scene, int n, uint64_t seed,
                                               const TrajectoryConfig& cfg = {});

struct NovelViewConfig {
  double min_unobserved = 0.15;  // fraction of pixels unseen by all training views
  double min_dist_frac = 0.10;   // min distance to any training camera, in diameters
  double radius_lo = 0.60, radius_hi = 1.45;
  double elev_lo_deg = 8.0, elev_hi_deg = 55.0;
  double target_jitter = 0.15;  // look-at jitter as a fraction of bbox radius
  int max_candidates = 800;
  int supersample = 2;
  double depth_tol_rel = 0.02, depth_tol_abs = 0.01;
};

// 1 where the surface point under the pixel is invisible in every training
// view (occluded or out of frame), 0 on observed surface and background.
Image compute_unobserved_mask(const Scene& scene, const std::vector<Camera>& training,
                              const Camera& novel, const NovelViewConfig& cfg = {});

// Rejection-samples cameras whose unobserved fraction and distance to the
// training set both clear the configured thresholds. Throws if the candidate
// budget is exhausted before n views are found.
std::vector<Camera> sample_extreme_novel_views(const Scene& scene,
                                               const std::vector<Camera>& training, int n,
                                               uint64_t seed, const NovelViewConfig& cfg = {});

struct CaptureFrame {
  int frame_id = 0;
  Image rgb;
  Image depth;
  Camera cam;
};

// Directory layout: frames/{id:05d}.png, depth/{id:05d}.bin, poses.json
// (row-major 4x4 camera-to-world), intrinsics.json (shared pinhole model).
void write_capture_dataset(const std::string& dir, const std::vector<CaptureFrame>& frames);
std::vector<CaptureFrame> read_capture_dataset(const std::string& dir);

}  // namespace splatfix

#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "doctest.h"
#include "splatfix/hash.hpp"
#include "splatfix/scene.hpp"
#include "splatfix/tsdf.hpp"

using namespace splatfix;

namespace {

Scene plane_scene(double z) {
  SceneSpec spec;
  spec.seed = 1;
  PrimitiveSpec p;
  p.type = "plane";
  p.axis = 2;
  p.center = {0, 0, z};
  p.extents = {50, 50, 0};
  p.texture = TextureKind::checker;
  p.base_rgb = {0.8, 0.3, 0.2};
  p.tex_scale = 0.33;
  spec.primitives.push_back(p);
  return build_scene(spec);
}

CaptureFrame frame_from(const Scene& scene, const Camera& cam, int id = 0) {
  CaptureFrame f;
  f.frame_id = id;
  const auto r = render_ground_truth(scene, cam);
  f.rgb = r.rgb;
  f.depth = r.depth;
  f.cam = cam;
  return f;
}

}  // namespace

TEST_CASE("single plane frame raycasts within half a voxel everywhere") {
  const Scene scene = plane_scene(2.0);
  Camera cam;
  cam.fx = cam.fy = 80;
  cam.cx = cam.cy = 48;
  cam.width = cam.height = 96;

  const CaptureFrame f = frame_from(scene, cam);
  TsdfVolume vol = fit_tsdf_volume({f});
  tsdf_integrate(vol, f);

  const MeshRender r = raycast_tsdf(vol, cam);
  int hits = 0;
  double max_err = 0.0;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const double d = r.depth.at(y, x, 0);
      if (d <= 0.0) continue;
      ++hits;
      max_err = std::max(max_err, std::abs(d - 2.0));
    }
  CHECK(hits > cam.width * cam.height / 2);
  CHECK(max_err <= vol.voxel_size / 2.0);
}

TEST_CASE("re-integrating the same frame leaves sdf unchanged") {
  const Scene scene = build_scene(make_default_scene_spec(4));
  const auto cams = sample_training_trajectory(scene, 1, 5);
  const CaptureFrame f = frame_from(scene, cams[0]);

  TsdfVolume vol = fit_tsdf_volume({f});
  tsdf_integrate(vol, f);
  const auto sdf_once = vol.sdf;
  const auto w_once = vol.weight;

  tsdf_integrate(vol, f);
  double max_sdf_diff = 0.0;
  for (size_t i = 0; i < vol.sdf.size(); ++i)
    max_sdf_diff = std::max(max_sdf_diff, std::abs(vol.sdf[i] - sdf_once[i]));
  CHECK(max_sdf_diff < 1e-12);
  // Observed voxels doubled their weight (cap is far away after two frames).
  for (size_t i = 0; i < vol.weight.size(); ++i)
    if (w_once[i] > 0.0) CHECK(vol.weight[i] == doctest::Approx(2.0 * w_once[i]));
}

TEST_CASE("degenerate frames do not change the volume") {
  const Scene scene = plane_scene(2.0);
  Camera cam;
  cam.fx = cam.fy = 80;
  cam.cx = cam.cy = 48;
  cam.width = cam.height = 96;
  const CaptureFrame good = frame_from(scene, cam);

  TsdfVolume vol = fit_tsdf_volume({good});
  tsdf_integrate(vol, good);
  const auto sdf_ref = vol.sdf;
  const auto w_ref = vol.weight;

  // All-zero depth.
  CaptureFrame empty = good;
  for (auto& v : empty.depth.data) v = 0.0;
  tsdf_integrate(vol, empty);
  CHECK(vol.sdf == sdf_ref);
  CHECK(vol.weight == w_ref);

  // Camera pointed away from the volume.
  Camera away = look_at_camera({0, 0, -3}, {0, 0, -10}, 80, 80, 48, 48, 96, 96);
  const CaptureFrame outside = frame_from(plane_scene(-20.0), away);
  tsdf_integrate(vol, outside);
  CHECK(vol.sdf == sdf_ref);
  CHECK(vol.weight == w_ref);
}

TEST_CASE("weights saturate at the cap") {
  const Scene scene = plane_scene(2.0);
  Camera cam;
  cam.fx = cam.fy = 80;
  cam.cx = cam.cy = 48;
  cam.width = cam.height = 96;
  const CaptureFrame f = frame_from(scene, cam);

  TsdfConfig cfg;
  cfg.weight_cap = 8.0;
  TsdfVolume vol = fit_tsdf_volume({f}, cfg);
  for (int i = 0; i < 12; ++i) tsdf_integrate(vol, f);
  double max_w = 0.0;
  for (double w : vol.weight) max_w = std::max(max_w, w);
  CHECK(max_w == doctest::Approx(8.0));
}

TEST_CASE("tsdf checkpoint round trip is stable") {
  const Scene scene = build_scene(make_default_scene_spec(6));
  const auto cams = sample_training_trajectory(scene, 4, 6);
  TsdfVolume vol;
  std::vector<CaptureFrame> frames;
  for (size_t i = 0; i < cams.size(); ++i) frames.push_back(frame_from(scene, cams[i], static_cast<int>(i)));
  vol = fit_tsdf_volume(frames);
  for (const auto& f : frames) tsdf_integrate(vol, f);

  const auto dir = (std::filesystem::temp_directory_path() / "splatfix_tests" / "tsdf").string();
  std::filesystem::remove_all(dir);
  save_tsdf(dir, vol);
  const TsdfVolume back = load_tsdf(dir);
  CHECK(back.dims == vol.dims);
  CHECK(back.voxel_size == doctest::Approx(vol.voxel_size));

  // Saving the loaded volume reproduces the files byte for byte.
  const auto dir2 = dir + "_resaved";
  std::filesystem::remove_all(dir2);
  save_tsdf(dir2, back);
  CHECK(hash_dir(dir) == hash_dir(dir2));
}

TEST_CASE("fused capture raycast tracks ground-truth depth") {
  const Scene scene = build_scene(make_default_scene_spec(8));
  const auto cams = sample_training_trajectory(scene, 12, 8);
  std::vector<CaptureFrame> frames;
  for (size_t i = 0; i < cams.size(); ++i)
    frames.push_back(frame_from(scene, cams[i], static_cast<int>(i)));

  TsdfVolume vol = fit_tsdf_volume(frames);
  for (const auto& f : frames) tsdf_integrate(vol, f);

  const MeshRender r = raycast_tsdf(vol, cams[0]);
  const auto gt = render_ground_truth(scene, cams[0]);
  std::vector<double> errs;
  for (int y = 0; y < cams[0].height; ++y)
    for (int x = 0; x < cams[0].width; ++x) {
      const double d = r.depth.at(y, x, 0);
      const double g = gt.depth.at(y, x, 0);
      if (d <= 0.0 || g <= 0.0) continue;
      errs.push_back(std::abs(d - g));
    }
  REQUIRE(errs.size() > 1000);
  std::sort(errs.begin(), errs.end());
  CHECK(errs[errs.size() / 2] < vol.voxel_size);
}

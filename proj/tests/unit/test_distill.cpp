#include <cmath>
#include <limits>

#include "doctest.h"
#include "splatfix/distill.hpp"
#include "splatfix/metrics.hpp"

using namespace splatfix;

namespace {

constexpr int kW = 32, kH = 32;

std::vector<CaptureFrame> make_frames() {
  std::vector<CaptureFrame> frames;
  for (int i = 0; i < 3; ++i) {
    CaptureFrame f;
    f.frame_id = i;
    f.cam = look_at_camera(Eigen::Vector3d(0.3 * i - 0.3, -0.2, -2.0), Eigen::Vector3d(0, 0, 0),
                           30.0, 30.0, kW / 2.0, kH / 2.0, kW, kH);
    f.rgb = Image(kW, kH, 3);
    for (int y = 0; y < kH; ++y)
      for (int x = 0; x < kW; ++x) {
        f.rgb.at(y, x, 0) = x / double(kW - 1);
        f.rgb.at(y, x, 1) = y / double(kH - 1);
        f.rgb.at(y, x, 2) = 0.5;
      }
    f.depth = Image(kW, kH, 1, 2.0);
    frames.push_back(std::move(f));
  }
  return frames;
}

struct Fixture {
  std::vector<CaptureFrame> frames = make_frames();
  GaussianCloud cloud = init_from_rgbd(frames, 8);
  TsdfVolume volume;
  Fixture() {
    TsdfConfig tcfg;
    tcfg.dims = 32;
    volume = fit_tsdf_volume(frames, tcfg);
    for (const auto& f : frames) tsdf_integrate(volume, f);
  }
};

// keep only splats on the -x side, leaving the other half of the scene bare
GaussianCloud left_half(const GaussianCloud& c) {
  GaussianCloud out;
  for (int i = 0; i < c.size(); ++i) {
    if (c.positions[3 * i] >= 0.0) continue;
    for (int a = 0; a < 3; ++a) out.positions.push_back(c.positions[3 * i + a]);
    for (int a = 0; a < 4; ++a) out.rotations.push_back(c.rotations[4 * i + a]);
    for (int a = 0; a < 3; ++a) out.log_scales.push_back(c.log_scales[3 * i + a]);
    out.opacity_logits.push_back(c.opacity_logits[i]);
    for (int a = 0; a < 3; ++a) out.color_logits.push_back(c.color_logits[3 * i + a]);
  }
  return out;
}

bool clouds_equal(const GaussianCloud& a, const GaussianCloud& b) {
  return a.positions == b.positions && a.rotations == b.rotations &&
         a.log_scales == b.log_scales && a.opacity_logits == b.opacity_logits &&
         a.color_logits == b.color_logits;
}

int low_alpha_pixels(const Image& alpha, double thr) {
  int n = 0;
  for (double v : alpha.data)
    if (v < thr) ++n;
  return n;
}

struct TinyModels {
  Codec codec;
  nn::UNet<float> net;
  FixerModels models;
  TinyModels(const std::vector<CaptureFrame>& frames) {
    CodecConfig ccfg;
    ccfg.downsample = 2;
    ccfg.latent_channels = 4;
    ccfg.hidden = {16, 32};
    std::vector<Image> imgs;
    for (const auto& f : frames) imgs.push_back(f.rgb);
    codec = pretrain_codec(imgs, ccfg, 0, 5);

    nn::UNetConfig ncfg;
    ncfg.in_channels = 12;
    ncfg.out_channels = 4;
    ncfg.base = 16;
    ncfg.mult1 = 2;
    ncfg.mult2 = 2;
    ncfg.temb_dim = 32;
    net.configure(ncfg, 17);

    models.codec = &codec;
    models.net = &net;
    models.schedule = make_schedule(50);
    models.condition_order = {"mesh", "gs"};
    models.checkpoint_hash = "aabbccdd";
    models.ddim_steps = 4;
  }
};

}  // namespace

TEST_CASE("depth holes take the mean of their neighbors") {
  Image flat(8, 8, 1, 2.0);
  for (int y = 3; y < 6; ++y)
    for (int x = 3; x < 6; ++x) flat.at(y, x, 0) = 0.0;
  Image filled = fill_depth_holes(flat);
  for (double v : filled.data) CHECK(v == 2.0);

  Image ramp(8, 8, 1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) ramp.at(y, x, 0) = x < 3 ? 1.0 : (x > 4 ? 3.0 : 0.0);
  Image rf = fill_depth_holes(ramp);
  for (int y = 0; y < 8; ++y) {
    CHECK(rf.at(y, 3, 0) >= 1.0);
    CHECK(rf.at(y, 4, 0) <= 3.0);
    CHECK(rf.at(y, 3, 0) <= rf.at(y, 4, 0));
  }

  Image zero(6, 6, 1, 0.0);
  Image still = fill_depth_holes(zero);
  for (double v : still.data) CHECK(v == 0.0);

  Image untouched = fill_depth_holes(flat, 0);
  CHECK(untouched.data == flat.data);

  CHECK_THROWS_AS(fill_depth_holes(Image(4, 4, 3)), std::invalid_argument);
}

TEST_CASE("uncovered pixels seed splats at mesh depth") {
  Fixture fx;
  const Camera& cam = fx.frames[0].cam;
  DistillConfig cfg;

  GaussianCloud cloud;
  Image alpha(kW, kH, 1, 0.0);
  Image depth(kW, kH, 1, 2.0);
  Image fixed(kW, kH, 3, 0.5);
  const int added = seed_unobserved_regions(cloud, cam, fixed, depth, alpha, cfg);
  CHECK(added == kW * kH / cfg.seed_stride);
  CHECK(cloud.size() == added);

  // first seeded pixel is (0,0); its parameters follow the backprojection rule
  const Eigen::Vector3d p = cam.position() + 2.0 * cam.ray_dir_world(0.5, 0.5);
  CHECK(cloud.positions[0] == p.x());
  CHECK(cloud.positions[1] == p.y());
  CHECK(cloud.positions[2] == p.z());
  CHECK(cloud.rotations[0] == 1.0);
  CHECK(cloud.rotations[1] == 0.0);
  CHECK(cloud.opacity_logits[0] == 0.0);  // logit(0.5)
  CHECK(cloud.color_logits[0] == 0.0);
  const double want_ls = std::log(std::sqrt(2.0) * 2.0 / cam.fx);
  CHECK(cloud.log_scales[0] == doctest::Approx(want_ls).epsilon(1e-12));
  cloud.validate();

  GaussianCloud covered;
  Image opaque(kW, kH, 1, 1.0);
  CHECK(seed_unobserved_regions(covered, cam, fixed, depth, opaque, cfg) == 0);

  // only a small window is uncovered
  Image window = opaque;
  for (int y = 8; y < 12; ++y)
    for (int x = 8; x < 12; ++x) window.at(y, x, 0) = 0.0;
  GaussianCloud patch;
  int expect = 0;
  for (int flat = 0; flat < kW * kH; flat += cfg.seed_stride) {
    const int y = flat / kW, x = flat % kW;
    if (y >= 8 && y < 12 && x >= 8 && x < 12) ++expect;
  }
  CHECK(seed_unobserved_regions(patch, cam, fixed, depth, window, cfg) == expect);
  CHECK(expect > 0);

  // no depth anywhere means nothing to lift
  GaussianCloud none;
  Image nodepth(kW, kH, 1, 0.0);
  CHECK(seed_unobserved_regions(none, cam, fixed, nodepth, alpha, cfg) == 0);

  // a half-empty depth map still seeds everywhere after hole filling
  Image halfdepth(kW, kH, 1, 2.0);
  for (int y = 0; y < kH; ++y)
    for (int x = kW / 2; x < kW; ++x) halfdepth.at(y, x, 0) = 0.0;
  GaussianCloud full;
  CHECK(seed_unobserved_regions(full, cam, fixed, halfdepth, alpha, cfg) ==
        kW * kH / cfg.seed_stride);

  CHECK_THROWS_AS(seed_unobserved_regions(cloud, cam, fixed, depth, Image(8, 8, 1), cfg),
                  std::invalid_argument);
}

TEST_CASE("per-view distillation pulls the render toward the target") {
  Fixture fx;
  const Camera& cam = fx.frames[1].cam;
  DistillConfig cfg;

  Image base = render(fx.cloud, cam, cfg.render).rgb;
  Image target = base;
  for (int y = 0; y < kH; ++y)
    for (int x = 0; x < kW; ++x) {
      target.at(y, x, 0) = 0.7 * base.at(y, x, 0) + 0.3;
      target.at(y, x, 1) = 0.7 * base.at(y, x, 1);
      target.at(y, x, 2) = 0.7 * base.at(y, x, 2);
    }

  std::vector<double> trace;
  GaussianCloud tuned = distill_view(fx.cloud, cam, target, cfg, nullptr, 0.0, &trace);
  REQUIRE(trace.size() == static_cast<size_t>(cfg.per_image_iters));
  CHECK(trace.back() < trace.front());
  const double before = photometric_loss(base, target);
  const double after = photometric_loss(render(tuned, cam, cfg.render).rgb, target);
  CHECK(after < before);

  // zero iterations is an exact no-op, seeding included
  DistillConfig idle = cfg;
  idle.per_image_iters = 0;
  GaussianCloud same = distill_view(fx.cloud, cam, target, idle, &fx.volume);
  CHECK(clouds_equal(same, fx.cloud));

  CHECK_THROWS_AS(distill_view(fx.cloud, cam, Image(8, 8, 3), cfg), std::invalid_argument);

  // a poisoned target reaches the optimizer as non-finite gradients
  Image poison = target;
  for (int y = 14; y < 18; ++y)
    for (int x = 14; x < 18; ++x)
      for (int c = 0; c < 3; ++c)
        poison.at(y, x, c) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(distill_view(fx.cloud, cam, poison, cfg), std::runtime_error);
}

TEST_CASE("seeding lets distillation reach unobserved regions") {
  Fixture fx;
  GaussianCloud half = left_half(fx.cloud);
  REQUIRE(half.size() > 0);
  REQUIRE(half.size() < fx.cloud.size());

  Camera novel = look_at_camera(Eigen::Vector3d(0.5, -0.3, -1.8), Eigen::Vector3d(0, 0, 0), 30.0,
                                30.0, kW / 2.0, kH / 2.0, kW, kH);
  DistillConfig cfg;

  const Image alpha0 = render(half, novel, cfg.render).alpha;
  const int holes0 = low_alpha_pixels(alpha0, cfg.seed_alpha_threshold);
  REQUIRE(holes0 > 50);

  // stand-in for a repaired view: what the full scene actually looks like
  const Image fixed = render(fx.cloud, novel, cfg.render).rgb;

  std::vector<double> trace;
  GaussianCloud out = distill_view(half, novel, fixed, cfg, &fx.volume, 0.0, &trace);
  CHECK(out.size() > half.size());
  CHECK(trace.back() < trace.front());

  const int holes1 = low_alpha_pixels(render(out, novel, cfg.render).alpha,
                                      cfg.seed_alpha_threshold);
  CHECK(holes1 < holes0);

  // without the volume no splats appear and the holes stay
  GaussianCloud blind = distill_view(half, novel, fixed, cfg);
  CHECK(blind.size() == half.size());
}

TEST_CASE("repairing a view is deterministic in the seed") {
  Fixture fx;
  TinyModels tm(fx.frames);
  const Camera& cam = fx.frames[2].cam;

  Image a = repair_view(cam, fx.cloud, fx.volume, tm.models, 7);
  Image b = repair_view(cam, fx.cloud, fx.volume, tm.models, 7);
  CHECK(a.same_shape(Image(kW, kH, 3)));
  CHECK(a.data == b.data);
  for (double v : a.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }

  Image c = repair_view(cam, fx.cloud, fx.volume, tm.models, 8);
  CHECK(a.data != c.data);

  FixerModels bad = tm.models;
  bad.condition_order = {"mesh", "flow"};
  CHECK_THROWS_AS(repair_view(cam, fx.cloud, fx.volume, bad, 7), std::invalid_argument);

  FixerModels empty;
  CHECK_THROWS_AS(repair_view(cam, fx.cloud, fx.volume, empty, 7), std::invalid_argument);
}

TEST_CASE("global refinement draws from the whole augmented set") {
  Fixture fx;
  DistillConfig cfg;
  cfg.global_iters = 40;

  CHECK_THROWS_AS(global_refine(fx.cloud, AugmentedDataset{}, cfg), std::invalid_argument);

  // zero-weight entries leave every parameter bit untouched
  AugmentedDataset idle;
  for (int i = 0; i < 2; ++i) {
    AugmentedEntry e;
    e.image = fx.frames[i].rgb;
    e.camera = fx.frames[i].cam;
    e.origin = "captured_keyframe";
    e.weight = 0.0;
    idle.entries.push_back(std::move(e));
  }
  GaussianCloud frozen = global_refine(fx.cloud, idle, cfg);
  CHECK(clouds_equal(frozen, fx.cloud));

  AugmentedDataset ds;
  for (const auto& f : fx.frames) {
    AugmentedEntry e;
    e.image = f.rgb;
    e.camera = f.cam;
    e.origin = "captured_keyframe";
    ds.entries.push_back(std::move(e));
  }
  std::vector<double> trace;
  GaussianCloud tuned = global_refine(fx.cloud, ds, cfg, 0.0, &trace);
  REQUIRE(trace.size() == static_cast<size_t>(cfg.global_iters));
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 10; ++i) {
    head += trace[i];
    tail += trace[trace.size() - 10 + i];
  }
  CHECK(tail < head);
  tuned.validate();

  // a poisoned entry wastes its turns but never aborts the refine
  AugmentedDataset mixed = ds;
  for (auto& v : mixed.entries[1].image.data) v = std::numeric_limits<double>::quiet_NaN();
  GaussianCloud survived = global_refine(fx.cloud, mixed, cfg);
  survived.validate();
}

TEST_CASE("the full repair loop accounts for every view") {
  Fixture fx;
  TinyModels tm(fx.frames);
  GaussianCloud half = left_half(fx.cloud);

  std::vector<Camera> novel;
  novel.push_back(look_at_camera(Eigen::Vector3d(0.5, -0.3, -1.8), Eigen::Vector3d(0, 0, 0),
                                 30.0, 30.0, kW / 2.0, kH / 2.0, kW, kH));
  novel.push_back(look_at_camera(Eigen::Vector3d(0.4, 0.2, -1.9), Eigen::Vector3d(0, 0, 0),
                                 30.0, 30.0, kW / 2.0, kH / 2.0, kW, kH));
  std::vector<Image> gt;
  DistillConfig cfg;
  cfg.global_iters = 30;
  cfg.keyframe_stride = 2;
  for (const auto& cam : novel) gt.push_back(render(fx.cloud, cam, cfg.render).rgb);

  const std::vector<float> net_before = nn::flatten_params(tm.net.params());
  const std::vector<float> codec_before = nn::flatten_params(tm.codec.params());

  GaussianCloud cloud = half;
  std::vector<Image> repaired, finals;
  GsfixReport rep =
      run_gsfix3d(cloud, fx.volume, tm.models, novel, fx.frames, cfg, 99, &gt, &repaired, &finals);

  REQUIRE(rep.views.size() == novel.size());
  CHECK(rep.initial_count == half.size());
  CHECK(rep.final_count == cloud.size());
  CHECK(rep.views[0].seeded > 0);
  for (size_t i = 0; i < rep.views.size(); ++i) {
    const auto& v = rep.views[i];
    CHECK(v.cam_index == static_cast<int>(i));
    CHECK(v.psnr_raw_vs_fixed > 0.0);
    CHECK(v.psnr_distilled_vs_fixed > v.psnr_raw_vs_fixed);
    CHECK(v.psnr_raw_vs_gt >= 0.0);
    CHECK(v.psnr_fixed_vs_gt >= 0.0);
    CHECK(v.psnr_final_vs_gt >= 0.0);
  }
  CHECK(rep.keyframe_psnr_before > 0.0);
  CHECK(rep.keyframe_psnr_after > 0.0);

  REQUIRE(repaired.size() == novel.size());
  REQUIRE(finals.size() == novel.size());
  for (const auto& img : repaired) CHECK(img.same_shape(Image(kW, kH, 3)));
  for (const auto& img : finals) CHECK(img.same_shape(Image(kW, kH, 3)));
  cloud.validate();

  // the models only read their weights
  CHECK(nn::flatten_params(tm.net.params()) == net_before);
  CHECK(nn::flatten_params(tm.codec.params()) == codec_before);

  SUBCASE("a rerun reproduces the report bit for bit") {
    GaussianCloud again = half;
    GsfixReport rep2 = run_gsfix3d(again, fx.volume, tm.models, novel, fx.frames, cfg, 99, &gt);
    CHECK(clouds_equal(again, cloud));
    CHECK(rep2.keyframe_psnr_before == rep.keyframe_psnr_before);
    CHECK(rep2.keyframe_psnr_after == rep.keyframe_psnr_after);
    for (size_t i = 0; i < rep.views.size(); ++i) {
      CHECK(rep2.views[i].seeded == rep.views[i].seeded);
      CHECK(rep2.views[i].psnr_distilled_vs_fixed == rep.views[i].psnr_distilled_vs_fixed);
      CHECK(rep2.views[i].psnr_final_vs_gt == rep.views[i].psnr_final_vs_gt);
    }
  }

  SUBCASE("no novel cameras leaves only keyframe refinement") {
    GaussianCloud only = half;
    GsfixReport r = run_gsfix3d(only, fx.volume, tm.models, {}, fx.frames, cfg, 99);
    CHECK(r.views.empty());
    CHECK(r.initial_count == half.size());
    CHECK(r.final_count == only.size());
    CHECK(r.keyframe_psnr_after >= r.keyframe_psnr_before - 0.5);
  }

  CHECK_THROWS_AS(run_gsfix3d(cloud, fx.volume, tm.models, novel, {}, cfg, 99),
                  std::invalid_argument);
  std::vector<Image> short_gt(1);
  CHECK_THROWS_AS(run_gsfix3d(cloud, fx.volume, tm.models, novel, fx.frames, cfg, 99, &short_gt),
                  std::invalid_argument);
}

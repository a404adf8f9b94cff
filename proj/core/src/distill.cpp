#include "splatfix/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "splatfix/metrics.hpp"

namespace splatfix {

Image repair_view(const Camera& cam, const GaussianCloud& cloud, const TsdfVolume& volume,
                  FixerModels& models, uint64_t seed, const RenderConfig& render_cfg) {
  if (!models.codec || !models.net) throw std::invalid_argument("repair_view: models not loaded");
  const Image i_gs = render(cloud, cam, render_cfg).rgb;
  const Image i_mesh = raycast_tsdf(volume, cam).rgb;

  const nn::Tensor<float> z_gs = models.codec->encode(i_gs);
  const nn::Tensor<float> z_mesh = models.codec->encode(i_mesh);
  std::vector<const nn::Tensor<float>*> conds;
  for (const auto& name : models.condition_order) {
    if (name == "mesh")
      conds.push_back(&z_mesh);
    else if (name == "gs")
      conds.push_back(&z_gs);
    else
      throw std::invalid_argument("repair_view: unknown condition '" + name + "'");
  }

  Rng rng = Rng::stream(seed, "repair_zT");
  const nn::Tensor<float> z0 = ddim_sample(*models.net, models.schedule, conds, z_gs.c, z_gs.h,
                                           z_gs.w, models.ddim_steps, rng);
  return models.codec->decode(z0);
}

Image fill_depth_holes(const Image& depth, int max_passes) {
  if (depth.channels != 1) throw std::invalid_argument("fill_depth_holes: depth must be 1-channel");
  Image cur = depth;
  for (int pass = 0; pass < max_passes; ++pass) {
    Image next = cur;
    bool changed = false;
    for (int y = 0; y < cur.height; ++y)
      for (int x = 0; x < cur.width; ++x) {
        if (cur.at(y, x, 0) > 0.0) continue;
        double sum = 0.0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int ny = y + dy, nx = x + dx;
            if (ny < 0 || ny >= cur.height || nx < 0 || nx >= cur.width) continue;
            const double d = cur.at(ny, nx, 0);
            if (d > 0.0) {
              sum += d;
              ++n;
            }
          }
        if (n > 0) {
          next.at(y, x, 0) = sum / n;
          changed = true;
        }
      }
    cur = std::move(next);
    if (!changed) break;
  }
  return cur;
}

int seed_unobserved_regions(GaussianCloud& cloud, const Camera& cam, const Image& fixed_image,
                            const Image& mesh_depth, const Image& alpha,
                            const DistillConfig& cfg) {
  if (fixed_image.width != cam.width || fixed_image.height != cam.height ||
      fixed_image.channels != 3 || !mesh_depth.same_shape(alpha) || alpha.channels != 1 ||
      alpha.width != cam.width || alpha.height != cam.height)
    throw std::invalid_argument("seed_unobserved_regions: image/camera shape mismatch");
  const Image depth = fill_depth_holes(mesh_depth);
  const double op_logit = logit(std::clamp(cfg.seed_opacity, 1e-4, 1.0 - 1e-4));
  const double spacing = std::sqrt(static_cast<double>(cfg.seed_stride));
  int added = 0;
  const int np = cam.width * cam.height;
  for (int flat = 0; flat < np; flat += cfg.seed_stride) {
    const int y = flat / cam.width;
    const int x = flat % cam.width;
    if (alpha.at(y, x, 0) >= cfg.seed_alpha_threshold) continue;
    const double d = depth.at(y, x, 0);
    if (d <= 0.0) continue;

    const Eigen::Vector3d p = cam.position() + d * cam.ray_dir_world(x + 0.5, y + 0.5);
    for (int a = 0; a < 3; ++a) cloud.positions.push_back(p[a]);
    cloud.rotations.insert(cloud.rotations.end(), {1.0, 0.0, 0.0, 0.0});
    const double footprint = cfg.seed_scale_mult * spacing * d / cam.fx;
    const double ls = std::log(std::max(footprint, 1e-6));
    cloud.log_scales.insert(cloud.log_scales.end(), {ls, ls, ls});
    cloud.opacity_logits.push_back(op_logit);
    for (int c = 0; c < 3; ++c)
      cloud.color_logits.push_back(logit(std::clamp(fixed_image.at(y, x, c), 0.02, 0.98)));
    ++added;
  }
  return added;
}

namespace {

void photometric_step(SplatTrainer& trainer, const Camera& cam, const Image& target,
                      const DistillConfig& cfg, double weight, CloudGrads& grads,
                      RenderCache& cache, std::vector<double>* loss_trace) {
  const RenderOutput out = render_forward(trainer.cloud(), cam, cfg.render, cache);
  Image dl;
  const double loss = photometric_loss(out.rgb, target, cfg.loss, &dl);
  if (loss_trace) loss_trace->push_back(loss);
  if (weight != 1.0)
    for (auto& v : dl.data) v *= weight;
  grads.resize_for(trainer.cloud());
  render_backward(trainer.cloud(), cam, cfg.render, cache, dl, nullptr, nullptr, grads);
  trainer.optimize_step(grads, cfg.lr);
}

}  // namespace

GaussianCloud distill_view(GaussianCloud cloud, const Camera& cam, const Image& fixed_image,
                           const DistillConfig& cfg, const TsdfVolume* volume,
                           double scene_extent, std::vector<double>* loss_trace) {
  if (fixed_image.width != cam.width || fixed_image.height != cam.height ||
      fixed_image.channels != 3)
    throw std::invalid_argument("distill_view: fixed image does not match camera resolution");
  const double extent = scene_extent > 0.0 ? scene_extent : cloud_extent(cloud);

  if (cfg.seed_unobserved && volume && cfg.per_image_iters > 0) {
    const Image alpha = render(cloud, cam, cfg.render).alpha;
    const Image mesh_depth = raycast_tsdf(*volume, cam).depth;
    seed_unobserved_regions(cloud, cam, fixed_image, mesh_depth, alpha, cfg);
  }

  SplatTrainer trainer(std::move(cloud), extent);
  CloudGrads grads;
  RenderCache cache;
  for (int iter = 0; iter < cfg.per_image_iters; ++iter) {
    photometric_step(trainer, cam, fixed_image, cfg, 1.0, grads, cache, loss_trace);
    if (cfg.density.interval > 0 && (iter + 1) % cfg.density.interval == 0)
      trainer.density_control(cfg.density);
  }
  return std::move(trainer.cloud());
}

GaussianCloud global_refine(GaussianCloud cloud, const AugmentedDataset& dataset,
                            const DistillConfig& cfg, double scene_extent,
                            std::vector<double>* loss_trace) {
  if (dataset.entries.empty()) throw std::invalid_argument("global_refine: empty dataset");
  const double extent = scene_extent > 0.0 ? scene_extent : cloud_extent(cloud);
  SplatTrainer trainer(std::move(cloud), extent);
  Rng rng = Rng::stream(cfg.seed, "global_refine");
  CloudGrads grads;
  RenderCache cache;
  for (int iter = 0; iter < cfg.global_iters; ++iter) {
    const AugmentedEntry& e =
        dataset.entries[rng.uniform_int(static_cast<int>(dataset.entries.size()))];
    try {
      photometric_step(trainer, e.camera, e.image, cfg, e.weight, grads, cache, loss_trace);
    } catch (const std::runtime_error&) {
      // a rejected step costs an iteration but never aborts the refine
    }
    if (cfg.density.interval > 0 && (iter + 1) % cfg.density.interval == 0)
      trainer.density_control(cfg.density);
  }
  return std::move(trainer.cloud());
}

GsfixReport run_gsfix3d(GaussianCloud& cloud, const TsdfVolume& volume, FixerModels& models,
                        const std::vector<Camera>& novel_cams,
                        const std::vector<CaptureFrame>& frames, const DistillConfig& cfg,
                        uint64_t seed, const std::vector<Image>* novel_gt,
                        std::vector<Image>* repaired_out, std::vector<Image>* final_renders_out) {
  if (frames.empty()) throw std::invalid_argument("run_gsfix3d: no captured frames");
  if (novel_gt && novel_gt->size() != novel_cams.size())
    throw std::invalid_argument("run_gsfix3d: ground-truth count mismatch");

  GsfixReport report;
  report.initial_count = cloud.size();
  const double extent = cloud_extent(cloud);

  auto keyframe_psnr = [&](const GaussianCloud& c) {
    double sum = 0.0;
    int n = 0;
    for (size_t i = 0; i < frames.size(); i += cfg.keyframe_stride) {
      sum += psnr(render(c, frames[i].cam, cfg.render).rgb, frames[i].rgb);
      ++n;
    }
    return n ? sum / n : 0.0;
  };
  report.keyframe_psnr_before = keyframe_psnr(cloud);

  std::vector<Image> repaired;
  for (size_t i = 0; i < novel_cams.size(); ++i) {
    const Camera& cam = novel_cams[i];
    ViewRepairRecord rec;
    rec.cam_index = static_cast<int>(i);

    const Image raw = render(cloud, cam, cfg.render).rgb;
    const Image fixed =
        repair_view(cam, cloud, volume, models, seed + 1000 * (i + 1), cfg.render);
    rec.psnr_raw_vs_fixed = psnr(raw, fixed);

    const int before = cloud.size();
    cloud = distill_view(std::move(cloud), cam, fixed, cfg, &volume, extent);
    rec.seeded = std::max(0, cloud.size() - before);

    const Image distilled = render(cloud, cam, cfg.render).rgb;
    rec.psnr_distilled_vs_fixed = psnr(distilled, fixed);
    if (novel_gt) {
      rec.psnr_raw_vs_gt = psnr(raw, (*novel_gt)[i]);
      rec.psnr_fixed_vs_gt = psnr(fixed, (*novel_gt)[i]);
    }
    report.views.push_back(rec);
    repaired.push_back(fixed);
  }

  AugmentedDataset dataset;
  for (size_t i = 0; i < frames.size(); i += cfg.keyframe_stride) {
    AugmentedEntry e;
    e.image = frames[i].rgb;
    e.camera = frames[i].cam;
    e.origin = "captured_keyframe";
    dataset.entries.push_back(std::move(e));
  }
  for (size_t i = 0; i < novel_cams.size(); ++i) {
    AugmentedEntry e;
    e.image = repaired[i];
    e.camera = novel_cams[i];
    e.origin = "repaired_view";
    e.fixer_hash = models.checkpoint_hash;
    dataset.entries.push_back(std::move(e));
  }
  cloud = global_refine(std::move(cloud), dataset, cfg, extent);

  report.keyframe_psnr_after = keyframe_psnr(cloud);
  report.final_count = cloud.size();
  for (size_t i = 0; i < novel_cams.size(); ++i) {
    const Image final_render = render(cloud, novel_cams[i], cfg.render).rgb;
    if (novel_gt) report.views[i].psnr_final_vs_gt = psnr(final_render, (*novel_gt)[i]);
    if (final_renders_out) final_renders_out->push_back(final_render);
  }
  if (repaired_out) *repaired_out = std::move(repaired);
  return report;
}

}  // namespace splatfix

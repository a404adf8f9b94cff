#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splatfix/codec.hpp"
#include "splatfix/diffusion.hpp"
#include "splatfix/distill.hpp"
#include "splatfix/repair_data.hpp"
#include "splatfix/splat.hpp"
#include "splatfix/unet.hpp"

namespace splatfix {

// One JSON document drives every stage. Loading is strict: unknown keys and
// type mismatches are errors, so a typo cannot silently fall back to a
// default. schema_version guards against stale run directories.
struct PipelineConfig {
  uint64_t seed = 1;
  std::string out_dir = "run";

  struct SceneCfg {
    std::string spec_path;  // empty → generate the default desk arrangement
  } scene;

  struct CaptureCfg {
    int train_views = 48;
    int novel_views = 6;
    int resolution = 96;
    double fov_deg = 55.0;
    double min_unobserved = 0.15;
  } capture;

  struct ReconstructCfg {
    int iterations = 700;
    int init_stride = 4;
    int tsdf_dims = 64;
  } reconstruct;

  struct CodecStageCfg {
    CodecConfig arch;
    int iterations = 3000;  // batch/lr/KL weight are fixed by the codec trainer
  } codec;

  struct ScheduleCfg {
    int timesteps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
  } schedule;

  struct DenoiserCfg {
    int base = 64;
    int mult1 = 2;
    int mult2 = 2;
    int temb_dim = 128;
    std::vector<std::string> condition_order{"mesh", "gs"};
  } denoiser;

  struct PretrainCfg {
    int scenes = 6;
    int views_per_scene = 24;
    int iterations = 2000;
    int batch_size = 2;
    int grad_accum = 16;
    double lr = 3e-5;
    bool mask_augment = true;
    int augment_variants = 4;  // pre-generated masked variants per view
    double blur_lo = 0.5;      // mesh/gs degradation proxies
    double blur_hi = 1.5;
    double speckle = 0.08;
  } pretrain;

  struct FinetuneCfg {
    int iterations = 400;  // synthetic-scene setting; see configs/finetune_real.json
    int batch_size = 2;
    int grad_accum = 16;
    double lr = 3e-5;
    bool mask_augment = true;
    int augment_variants = 4;
  } finetune;

  AugmentConfig augment;

  struct DistillStageCfg {
    int per_image_iters = 20;
    int global_iters = 50;
    int keyframe_stride = 5;
    int ddim_steps = 4;
  } distill;
};

PipelineConfig default_pipeline_config();

// Strict parse: every key must exist in the default document with a matching
// type. Throws std::invalid_argument naming the offending key path.
PipelineConfig load_pipeline_config(const std::string& path);
void save_pipeline_config(const std::string& path, const PipelineConfig& cfg);

// JSON round-trip used by both file I/O and the CLI --set overrides.
std::string pipeline_config_to_json(const PipelineConfig& cfg);
PipelineConfig pipeline_config_from_json(const std::string& text);

// Applies dotted-path overrides ("codec.lr=0.0005", "denoiser.condition_order=[\"gs\"]")
// on top of cfg; values parse as JSON scalars with a bare-string fallback.
PipelineConfig apply_overrides(const PipelineConfig& cfg,
                               const std::vector<std::string>& overrides);

void validate_pipeline_config(const PipelineConfig& cfg);

// stage_seed(root, "capture.train") — every stage derives its randomness from
// the one root seed through a named stream, so stages reproduce independently
// of execution order.
uint64_t stage_seed(uint64_t root, const std::string& stage);

// Canonical artifact layout under the run directory.
struct RunPaths {
  std::string root;
  explicit RunPaths(std::string out_dir) : root(std::move(out_dir)) {}

  std::string config() const { return root + "/config.json"; }
  std::string scene_spec() const { return root + "/scene/spec.json"; }
  std::string capture_train() const { return root + "/capture/train"; }
  std::string capture_novel() const { return root + "/capture/novel"; }
  std::string novel_masks() const { return root + "/capture/novel_masks"; }
  std::string recon_dir() const { return root + "/recon"; }
  std::string gaussians() const { return root + "/recon/gaussians"; }
  std::string tsdf() const { return root + "/recon/tsdf"; }
  std::string fit_report() const { return root + "/recon/fit_report.json"; }
  std::string dataset() const { return root + "/dataset"; }
  std::string codec_ckpt() const { return root + "/checkpoints/codec"; }
  std::string fixer_pretrain_ckpt() const { return root + "/checkpoints/fixer_pretrain"; }
  std::string fixer_ckpt() const { return root + "/checkpoints/fixer"; }
  std::string infer_dir() const { return root + "/infer"; }
  std::string gsfix_dir() const { return root + "/gsfix"; }
  std::string gsfix_gaussians() const { return root + "/gsfix/gaussians"; }
  std::string gsfix_report() const { return root + "/gsfix/report.json"; }
  std::string eval_metrics() const { return root + "/eval/metrics.json"; }
  std::string report_dir() const { return root + "/report"; }
};

// Widens a trained single-latent denoiser to n_parts input groups: every
// layer copies the base weights and the input conv replicates its kernel over
// the extra channels divided by n_parts, so the wide net initially reproduces
// the base prediction when all groups carry the same content.
nn::UNet<float> widen_denoiser(nn::UNet<float>& base, int n_parts);

// Stage entry points. Each one reads its inputs from the run directory (or
// the scene spec for gen-scene), writes its artifacts back, and is safe to
// re-run: identical config and seed reproduce the artifacts bit for bit.
void stage_gen_scene(const PipelineConfig& cfg);
void stage_capture(const PipelineConfig& cfg);
void stage_reconstruct(const PipelineConfig& cfg);
void stage_build_dataset(const PipelineConfig& cfg);
void stage_pretrain_codec(const PipelineConfig& cfg);
void stage_pretrain_fixer(const PipelineConfig& cfg);
void stage_finetune_fixer(const PipelineConfig& cfg);
void stage_infer(const PipelineConfig& cfg);
// novel_override < 0 repairs every captured novel view; otherwise caps the
// count (0 is valid: global refinement over keyframes only, empty view list
// in the report).
void stage_gsfix3d(const PipelineConfig& cfg, int novel_override = -1);
void stage_evaluate(const PipelineConfig& cfg);
void stage_report(const PipelineConfig& cfg);

}  // namespace splatfix

#include "splatfix/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "splatfix/hash.hpp"
#include "splatfix/metrics.hpp"
#include "splatfix/scene.hpp"
#include "splatfix/serial.hpp"
#include "splatfix/tsdf.hpp"

namespace splatfix {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json config_to_doc(const PipelineConfig& c) {
  json j;
  j["schema_version"] = 1;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["scene"] = {{"spec_path", c.scene.spec_path}};
  j["capture"] = {{"train_views", c.capture.train_views},
                  {"novel_views", c.capture.novel_views},
                  {"resolution", c.capture.resolution},
                  {"fov_deg", c.capture.fov_deg},
                  {"min_unobserved", c.capture.min_unobserved}};
  j["reconstruct"] = {{"iterations", c.reconstruct.iterations},
                      {"init_stride", c.reconstruct.init_stride},
                      {"tsdf_dims", c.reconstruct.tsdf_dims}};
  j["codec"] = {{"downsample", c.codec.arch.downsample},
                {"latent_channels", c.codec.arch.latent_channels},
                {"hidden", c.codec.arch.hidden},
                {"iterations", c.codec.iterations}};
  j["schedule"] = {{"timesteps", c.schedule.timesteps},
                   {"beta_start", c.schedule.beta_start},
                   {"beta_end", c.schedule.beta_end}};
  j["denoiser"] = {{"base", c.denoiser.base},
                   {"mult1", c.denoiser.mult1},
                   {"mult2", c.denoiser.mult2},
                   {"temb_dim", c.denoiser.temb_dim},
                   {"condition_order", c.denoiser.condition_order}};
  j["pretrain"] = {{"scenes", c.pretrain.scenes},
                   {"views_per_scene", c.pretrain.views_per_scene},
                   {"iterations", c.pretrain.iterations},
                   {"batch_size", c.pretrain.batch_size},
                   {"grad_accum", c.pretrain.grad_accum},
                   {"lr", c.pretrain.lr},
                   {"mask_augment", c.pretrain.mask_augment},
                   {"augment_variants", c.pretrain.augment_variants},
                   {"blur_lo", c.pretrain.blur_lo},
                   {"blur_hi", c.pretrain.blur_hi},
                   {"speckle", c.pretrain.speckle}};
  j["finetune"] = {{"iterations", c.finetune.iterations},
                   {"batch_size", c.finetune.batch_size},
                   {"grad_accum", c.finetune.grad_accum},
                   {"lr", c.finetune.lr},
                   {"mask_augment", c.finetune.mask_augment},
                   {"augment_variants", c.finetune.augment_variants}};
  j["augment"] = {{"p_shared", c.augment.p_shared},
                  {"p_gs_only", c.augment.p_gs_only},
                  {"blur_sigma", c.augment.blur_sigma},
                  {"area_min", c.augment.area_min},
                  {"area_max", c.augment.area_max},
                  {"max_shapes", c.augment.max_shapes}};
  j["distill"] = {{"per_image_iters", c.distill.per_image_iters},
                  {"global_iters", c.distill.global_iters},
                  {"keyframe_stride", c.distill.keyframe_stride},
                  {"ddim_steps", c.distill.ddim_steps}};
  return j;
}

PipelineConfig config_from_doc(const json& j) {
  PipelineConfig c;
  c.seed = j.at("seed").get<uint64_t>();
  c.out_dir = j.at("out_dir").get<std::string>();
  const json& sc = j.at("scene");
  c.scene.spec_path = sc.at("spec_path").get<std::string>();
  const json& cap = j.at("capture");
  c.capture.train_views = cap.at("train_views").get<int>();
  c.capture.novel_views = cap.at("novel_views").get<int>();
  c.capture.resolution = cap.at("resolution").get<int>();
  c.capture.fov_deg = cap.at("fov_deg").get<double>();
  c.capture.min_unobserved = cap.at("min_unobserved").get<double>();
  const json& rc = j.at("reconstruct");
  c.reconstruct.iterations = rc.at("iterations").get<int>();
  c.reconstruct.init_stride = rc.at("init_stride").get<int>();
  c.reconstruct.tsdf_dims = rc.at("tsdf_dims").get<int>();
  const json& cd = j.at("codec");
  c.codec.arch.downsample = cd.at("downsample").get<int>();
  c.codec.arch.latent_channels = cd.at("latent_channels").get<int>();
  c.codec.arch.hidden = cd.at("hidden").get<std::vector<int>>();
  c.codec.iterations = cd.at("iterations").get<int>();
  const json& sd = j.at("schedule");
  c.schedule.timesteps = sd.at("timesteps").get<int>();
  c.schedule.beta_start = sd.at("beta_start").get<double>();
  c.schedule.beta_end = sd.at("beta_end").get<double>();
  const json& dn = j.at("denoiser");
  c.denoiser.base = dn.at("base").get<int>();
  c.denoiser.mult1 = dn.at("mult1").get<int>();
  c.denoiser.mult2 = dn.at("mult2").get<int>();
  c.denoiser.temb_dim = dn.at("temb_dim").get<int>();
  c.denoiser.condition_order = dn.at("condition_order").get<std::vector<std::string>>();
  const json& pt = j.at("pretrain");
  c.pretrain.scenes = pt.at("scenes").get<int>();
  c.pretrain.views_per_scene = pt.at("views_per_scene").get<int>();
  c.pretrain.iterations = pt.at("iterations").get<int>();
  c.pretrain.batch_size = pt.at("batch_size").get<int>();
  c.pretrain.grad_accum = pt.at("grad_accum").get<int>();
  c.pretrain.lr = pt.at("lr").get<double>();
  c.pretrain.mask_augment = pt.at("mask_augment").get<bool>();
  c.pretrain.augment_variants = pt.at("augment_variants").get<int>();
  c.pretrain.blur_lo = pt.at("blur_lo").get<double>();
  c.pretrain.blur_hi = pt.at("blur_hi").get<double>();
  c.pretrain.speckle = pt.at("speckle").get<double>();
  const json& ft = j.at("finetune");
  c.finetune.iterations = ft.at("iterations").get<int>();
  c.finetune.batch_size = ft.at("batch_size").get<int>();
  c.finetune.grad_accum = ft.at("grad_accum").get<int>();
  c.finetune.lr = ft.at("lr").get<double>();
  c.finetune.mask_augment = ft.at("mask_augment").get<bool>();
  c.finetune.augment_variants = ft.at("augment_variants").get<int>();
  const json& ag = j.at("augment");
  c.augment.p_shared = ag.at("p_shared").get<double>();
  c.augment.p_gs_only = ag.at("p_gs_only").get<double>();
  c.augment.blur_sigma = ag.at("blur_sigma").get<double>();
  c.augment.area_min = ag.at("area_min").get<double>();
  c.augment.area_max = ag.at("area_max").get<double>();
  c.augment.max_shapes = ag.at("max_shapes").get<int>();
  const json& di = j.at("distill");
  c.distill.per_image_iters = di.at("per_image_iters").get<int>();
  c.distill.global_iters = di.at("global_iters").get<int>();
  c.distill.keyframe_stride = di.at("keyframe_stride").get<int>();
  c.distill.ddim_steps = di.at("ddim_steps").get<int>();
  return c;
}

void check_keys(const json& user, const json& ref, const std::string& path) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!ref.contains(it.key())) throw std::invalid_argument("unknown config key: " + p);
    const json& rv = ref.at(it.key());
    const json& uv = it.value();
    if (rv.is_object()) {
      if (!uv.is_object()) throw std::invalid_argument("config key must be an object: " + p);
      check_keys(uv, rv, p);
      continue;
    }
    const bool ok = (rv.is_number() && uv.is_number()) || (rv.is_string() && uv.is_string()) ||
                    (rv.is_boolean() && uv.is_boolean()) || (rv.is_array() && uv.is_array());
    if (!ok) throw std::invalid_argument("config type mismatch at: " + p);
  }
}

void merge_into(json& dst, const json& src) {
  for (auto it = src.begin(); it != src.end(); ++it) {
    if (it.value().is_object() && dst.contains(it.key()) && dst.at(it.key()).is_object())
      merge_into(dst.at(it.key()), it.value());
    else
      dst[it.key()] = it.value();
  }
}

PipelineConfig config_from_user_doc(const json& user) {
  const json ref = config_to_doc(PipelineConfig{});
  check_keys(user, ref, "");
  if (user.contains("schema_version") && user.at("schema_version").get<int>() != 1)
    throw std::invalid_argument("unsupported config schema_version");
  json merged = ref;
  merge_into(merged, user);
  return config_from_doc(merged);
}

std::string idx5(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05d", i);
  return buf;
}

void write_json_file(const std::string& path, const json& j) {
  const fs::path p(path);
  if (p.has_parent_path()) ensure_dir(p.parent_path().string());
  write_text_file(path, j.dump(2) + "\n");
}

json read_json_file(const std::string& path) { return json::parse(read_text_file(path)); }

void require_artifact(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw std::runtime_error("missing " + path + "; run " + hint + " first");
}

Image vstack(const std::vector<Image>& rows) {
  if (rows.empty()) throw std::invalid_argument("vstack: no rows");
  int h = 0;
  for (const auto& r : rows) {
    if (r.width != rows[0].width || r.channels != rows[0].channels)
      throw std::invalid_argument("vstack: shape mismatch");
    h += r.height;
  }
  Image out(rows[0].width, h, rows[0].channels);
  size_t off = 0;
  for (const auto& r : rows) {
    std::copy(r.data.begin(), r.data.end(), out.data.begin() + off);
    off += r.data.size();
  }
  return out;
}

TrajectoryConfig trajectory_config(const PipelineConfig& cfg) {
  TrajectoryConfig tc;
  tc.fov_deg = cfg.capture.fov_deg;
  tc.resolution = cfg.capture.resolution;
  return tc;
}

// The pretraining corpus: renders of freshly generated desk scenes degraded
// toward the two condition domains — blur for the fused-mesh look, blur plus
// speckle for the splat-render look. Ground truth stays clean.
std::vector<TrainingTriplet> build_pretrain_triplets(const PipelineConfig& cfg) {
  std::vector<TrainingTriplet> out;
  const TrajectoryConfig tc = trajectory_config(cfg);
  for (int s = 0; s < cfg.pretrain.scenes; ++s) {
    const std::string tag = "pretrain.scene." + std::to_string(s);
    const SceneSpec spec = make_default_scene_spec(stage_seed(cfg.seed, tag));
    const Scene scene = build_scene(spec);
    const auto cams = sample_training_trajectory(scene, cfg.pretrain.views_per_scene,
                                                 stage_seed(cfg.seed, tag + ".traj"), tc);
    for (size_t v = 0; v < cams.size(); ++v) {
      const RgbdRender rr = render_ground_truth(scene, cams[v]);
      Rng rng = Rng::stream(stage_seed(cfg.seed, tag + ".degrade"), std::to_string(v));
      TrainingTriplet t;
      t.i_gt = rr.rgb;
      t.i_mesh = gaussian_blur(rr.rgb, rng.uniform(cfg.pretrain.blur_lo, cfg.pretrain.blur_hi));
      Image gs = gaussian_blur(rr.rgb, rng.uniform(cfg.pretrain.blur_lo, cfg.pretrain.blur_hi));
      for (double& x : gs.data) x += cfg.pretrain.speckle * rng.normal();
      gs.clamp01();
      t.i_gs = std::move(gs);
      t.camera = cams[v];
      t.frame_id = static_cast<int>(out.size());
      out.push_back(std::move(t));
    }
  }
  return out;
}

// Encodes the training pool once up front; each triplet contributes
// `variants` independently masked copies so that drawing uniformly from the
// pool approximates fresh per-draw augmentation at a fraction of the encode
// cost.
std::vector<LatentTriplet> encode_pool(Codec& codec, const std::vector<TrainingTriplet>& trips,
                                       const AugmentConfig& acfg, bool mask_augment, int variants,
                                       uint64_t seed) {
  const int v_count = mask_augment ? std::max(1, variants) : 1;
  std::vector<LatentTriplet> pool;
  pool.reserve(trips.size() * v_count);
  for (size_t i = 0; i < trips.size(); ++i) {
    for (int k = 0; k < v_count; ++k) {
      LatentTriplet lt;
      if (mask_augment) {
        Rng rng = Rng::stream(seed, std::to_string(i) + "." + std::to_string(k));
        const TrainingTriplet aug = augment(trips[i], acfg, rng);
        lt.z_mesh = codec.encode(aug.i_mesh);
        lt.z_gs = codec.encode(aug.i_gs);
        lt.z_gt = codec.encode(aug.i_gt);
      } else {
        lt.z_mesh = codec.encode(trips[i].i_mesh);
        lt.z_gs = codec.encode(trips[i].i_gs);
        lt.z_gt = codec.encode(trips[i].i_gt);
      }
      pool.push_back(std::move(lt));
    }
  }
  return pool;
}

void train_denoiser_loop(nn::UNet<float>& net, const NoiseSchedule& sched,
                         const std::vector<LatentTriplet>& pool,
                         const std::vector<std::string>& order, int iterations, int batch_size,
                         int grad_accum, double lr, uint64_t seed, const char* stage_name) {
  nn::Adam<float> opt;
  opt.lr = lr;
  DiffusionTrainConfig tcfg;
  tcfg.batch_size = batch_size;
  tcfg.grad_accum = grad_accum;
  tcfg.lr = lr;
  Rng rng = Rng::stream(seed, "updates");
  auto draw = [&pool](Rng& r) -> const LatentTriplet& {
    return pool[r.uniform_int(static_cast<int>(pool.size()))];
  };
  int rejected = 0;
  const int tick = std::max(1, iterations / 10);
  for (int u = 1; u <= iterations; ++u) {
    const double loss = diffusion_train_update(net, opt, sched, draw, order, tcfg, rng, &rejected);
    if (u % tick == 0 || u == iterations)
      std::cout << stage_name << ": update " << u << "/" << iterations << "  loss " << loss
                << "\n";
  }
  if (rejected > 0) std::cout << stage_name << ": rejected " << rejected << " updates\n";
}

FixerModels assemble_models(const PipelineConfig& cfg, Codec& codec, nn::UNet<float>& net,
                            const DenoiserCheckpoint& ckpt, const std::string& ckpt_dir) {
  FixerModels m;
  m.codec = &codec;
  m.net = &net;
  m.schedule = ckpt.schedule;
  m.condition_order = ckpt.condition_order;
  m.checkpoint_hash = hex64(hash_dir(ckpt_dir));
  m.ddim_steps = cfg.distill.ddim_steps;
  return m;
}

DistillConfig distill_config(const PipelineConfig& cfg) {
  DistillConfig d;
  d.per_image_iters = cfg.distill.per_image_iters;
  d.global_iters = cfg.distill.global_iters;
  d.keyframe_stride = cfg.distill.keyframe_stride;
  d.seed = stage_seed(cfg.seed, "gsfix3d.refine");
  return d;
}

double keyframe_psnr(const GaussianCloud& cloud, const std::vector<CaptureFrame>& frames,
                     int stride, const RenderConfig& rcfg) {
  double sum = 0.0;
  int n = 0;
  for (size_t i = 0; i < frames.size(); i += static_cast<size_t>(std::max(1, stride))) {
    sum += psnr(render(cloud, frames[i].cam, rcfg).rgb, frames[i].rgb);
    ++n;
  }
  return n > 0 ? sum / n : 0.0;
}

}  // namespace

PipelineConfig default_pipeline_config() { return PipelineConfig{}; }

std::string pipeline_config_to_json(const PipelineConfig& cfg) {
  return config_to_doc(cfg).dump(2) + "\n";
}

PipelineConfig pipeline_config_from_json(const std::string& text) {
  json user;
  try {
    user = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config parse error: ") + e.what());
  }
  if (!user.is_object()) throw std::invalid_argument("config root must be a JSON object");
  return config_from_user_doc(user);
}

PipelineConfig load_pipeline_config(const std::string& path) {
  if (!fs::exists(path)) throw std::invalid_argument("config file not found: " + path);
  return pipeline_config_from_json(read_text_file(path));
}

void save_pipeline_config(const std::string& path, const PipelineConfig& cfg) {
  const fs::path p(path);
  if (p.has_parent_path()) ensure_dir(p.parent_path().string());
  write_text_file(path, pipeline_config_to_json(cfg));
}

PipelineConfig apply_overrides(const PipelineConfig& cfg,
                               const std::vector<std::string>& overrides) {
  if (overrides.empty()) return cfg;
  json doc = config_to_doc(cfg);
  for (const std::string& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos || eq == 0)
      throw std::invalid_argument("override must look like key.path=value: " + ov);
    std::string key = ov.substr(0, eq);
    const std::string value = ov.substr(eq + 1);
    std::replace(key.begin(), key.end(), '.', '/');
    json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
    if (parsed.is_discarded()) parsed = value;  // bare strings need no quotes
    doc[json::json_pointer("/" + key)] = parsed;
  }
  return config_from_user_doc(doc);
}

void validate_pipeline_config(const PipelineConfig& cfg) {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (cfg.out_dir.empty()) fail("out_dir must not be empty");
  if (cfg.capture.train_views < 1) fail("capture.train_views must be >= 1");
  if (cfg.capture.novel_views < 0) fail("capture.novel_views must be >= 0");
  if (cfg.capture.resolution < 16) fail("capture.resolution must be >= 16");
  if (cfg.capture.fov_deg <= 10.0 || cfg.capture.fov_deg >= 170.0)
    fail("capture.fov_deg out of range");
  if (cfg.codec.arch.hidden.empty()) fail("codec.hidden must not be empty");
  const int expect_ds = 1 << (static_cast<int>(cfg.codec.arch.hidden.size()) - 1);
  if (cfg.codec.arch.downsample != expect_ds)
    fail("codec.downsample must equal 2^(len(hidden)-1)");
  if (cfg.capture.resolution % cfg.codec.arch.downsample != 0)
    fail("capture.resolution must be divisible by codec.downsample");
  if ((cfg.capture.resolution / cfg.codec.arch.downsample) % 4 != 0)
    fail("latent resolution must be divisible by 4 for the denoiser");
  if (cfg.reconstruct.iterations < 0 || cfg.codec.iterations < 0 ||
      cfg.pretrain.iterations < 0 || cfg.finetune.iterations < 0)
    fail("iteration counts must be >= 0");
  if (cfg.reconstruct.init_stride < 1) fail("reconstruct.init_stride must be >= 1");
  if (cfg.reconstruct.tsdf_dims < 8) fail("reconstruct.tsdf_dims must be >= 8");
  if (cfg.schedule.timesteps < 1) fail("schedule.timesteps must be >= 1");
  if (!(cfg.schedule.beta_start > 0.0) || !(cfg.schedule.beta_end < 1.0) ||
      cfg.schedule.beta_start > cfg.schedule.beta_end)
    fail("schedule betas must satisfy 0 < beta_start <= beta_end < 1");
  if (cfg.denoiser.condition_order.empty()) fail("denoiser.condition_order must not be empty");
  for (const auto& name : cfg.denoiser.condition_order)
    if (name != "mesh" && name != "gs") fail("unknown condition '" + name + "'");
  for (size_t i = 0; i < cfg.denoiser.condition_order.size(); ++i)
    for (size_t k = i + 1; k < cfg.denoiser.condition_order.size(); ++k)
      if (cfg.denoiser.condition_order[i] == cfg.denoiser.condition_order[k])
        fail("duplicate condition '" + cfg.denoiser.condition_order[i] + "'");
  if (cfg.pretrain.scenes < 1 || cfg.pretrain.views_per_scene < 1)
    fail("pretrain corpus must have at least one scene and view");
  if (cfg.pretrain.batch_size < 1 || cfg.pretrain.grad_accum < 1 || cfg.finetune.batch_size < 1 ||
      cfg.finetune.grad_accum < 1)
    fail("batch sizes and grad accumulation must be >= 1");
  if (cfg.pretrain.augment_variants < 1 || cfg.finetune.augment_variants < 1)
    fail("augment_variants must be >= 1");
  if (cfg.pretrain.blur_lo < 0.0 || cfg.pretrain.blur_hi < cfg.pretrain.blur_lo)
    fail("pretrain blur range invalid");
  if (cfg.pretrain.speckle < 0.0) fail("pretrain.speckle must be >= 0");
  if (cfg.augment.p_shared < 0.0 || cfg.augment.p_shared > 1.0 || cfg.augment.p_gs_only < 0.0 ||
      cfg.augment.p_gs_only > 1.0)
    fail("augment probabilities must lie in [0,1]");
  if (cfg.augment.area_min < 0.0 || cfg.augment.area_max < cfg.augment.area_min)
    fail("augment area range invalid");
  if (cfg.augment.max_shapes < 1) fail("augment.max_shapes must be >= 1");
  if (cfg.distill.per_image_iters < 0 || cfg.distill.global_iters < 0)
    fail("distill iteration counts must be >= 0");
  if (cfg.distill.keyframe_stride < 1) fail("distill.keyframe_stride must be >= 1");
  if (cfg.distill.ddim_steps < 1 || cfg.distill.ddim_steps > cfg.schedule.timesteps)
    fail("distill.ddim_steps must lie in [1, schedule.timesteps]");
}

uint64_t stage_seed(uint64_t root, const std::string& stage) {
  return Rng::stream(root, stage).next_u64();
}

nn::UNet<float> widen_denoiser(nn::UNet<float>& base, int n_parts) {
  if (n_parts < 1) throw std::invalid_argument("widen_denoiser: n_parts must be >= 1");
  const nn::UNetConfig& bcfg = base.config();
  nn::UNetConfig wcfg = bcfg;
  wcfg.in_channels = bcfg.in_channels * n_parts;
  nn::UNet<float> wide;
  wide.configure(wcfg, 0);
  auto bp = base.params();
  auto wp = wide.params();
  if (bp.size() != wp.size()) throw std::logic_error("widen_denoiser: parameter list mismatch");
  int expanded = 0;
  for (size_t i = 0; i < bp.size(); ++i) {
    if (bp[i]->w.size() == wp[i]->w.size()) {
      wp[i]->w = bp[i]->w;
    } else {
      wp[i]->w = nn::expand_input_layer(bp[i]->w, bcfg.base, bcfg.in_channels, 3, n_parts);
      ++expanded;
    }
  }
  // only the input conv may differ in shape between the two nets
  if (expanded != (n_parts == 1 ? 0 : 1))
    throw std::logic_error("widen_denoiser: unexpected layer shape difference");
  return wide;
}

void stage_gen_scene(const PipelineConfig& cfg) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  SceneSpec spec;
  if (cfg.scene.spec_path.empty()) {
    spec = make_default_scene_spec(stage_seed(cfg.seed, "scene"));
  } else {
    if (!fs::exists(cfg.scene.spec_path))
      throw std::runtime_error("scene spec not found: " + cfg.scene.spec_path);
    spec = load_scene_spec(cfg.scene.spec_path);
  }
  ensure_dir(cfg.out_dir + "/scene");
  save_scene_spec(paths.scene_spec(), spec);
  save_pipeline_config(paths.config(), cfg);
  std::cout << "gen-scene: wrote " << paths.scene_spec() << " (" << spec.primitives.size()
            << " primitives)\n";
}

void stage_capture(const PipelineConfig& cfg) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  require_artifact(paths.scene_spec(), "gen-scene");
  const SceneSpec spec = load_scene_spec(paths.scene_spec());
  const Scene scene = build_scene(spec);
  const TrajectoryConfig tc = trajectory_config(cfg);
  const auto train_cams = sample_training_trajectory(scene, cfg.capture.train_views,
                                                     stage_seed(cfg.seed, "capture.train"), tc);
  std::vector<CaptureFrame> frames;
  frames.reserve(train_cams.size());
  for (size_t i = 0; i < train_cams.size(); ++i) {
    const RgbdRender rr = render_ground_truth(scene, train_cams[i]);
    frames.push_back({static_cast<int>(i), rr.rgb, rr.depth, train_cams[i]});
  }
  write_capture_dataset(paths.capture_train(), frames);

  int novel_count = 0;
  if (cfg.capture.novel_views > 0) {
    NovelViewConfig nv;
    nv.min_unobserved = cfg.capture.min_unobserved;
    const auto novel_cams = sample_extreme_novel_views(
        scene, train_cams, cfg.capture.novel_views, stage_seed(cfg.seed, "capture.novel"), nv);
    std::vector<CaptureFrame> novel;
    novel.reserve(novel_cams.size());
    for (size_t i = 0; i < novel_cams.size(); ++i) {
      const RgbdRender rr = render_ground_truth(scene, novel_cams[i]);
      novel.push_back({static_cast<int>(i), rr.rgb, rr.depth, novel_cams[i]});
    }
    write_capture_dataset(paths.capture_novel(), novel);
    ensure_dir(paths.novel_masks());
    for (size_t i = 0; i < novel_cams.size(); ++i) {
      const Image mask = compute_unobserved_mask(scene, train_cams, novel_cams[i], nv);
      save_png(paths.novel_masks() + "/" + idx5(static_cast<int>(i)) + ".png", mask);
    }
    novel_count = static_cast<int>(novel_cams.size());
  }
  save_pipeline_config(paths.config(), cfg);
  std::cout << "capture: " << frames.size() << " training views, " << novel_count
            << " novel views at " << cfg.capture.resolution << "px\n";
}

void stage_reconstruct(const PipelineConfig& cfg) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  require_artifact(paths.capture_train(), "capture");
  const auto frames = read_capture_dataset(paths.capture_train());

  GaussianCloud cloud = init_from_rgbd(frames, cfg.reconstruct.init_stride);
  FitConfig fc;
  fc.iterations = cfg.reconstruct.iterations;
  fc.seed = stage_seed(cfg.seed, "reconstruct.fit");
  FitReport rep;
  cloud = fit_cloud(std::move(cloud), frames, fc, &rep);
  save_gaussians(paths.gaussians(), cloud);

  TsdfConfig tcfg;
  tcfg.dims = cfg.reconstruct.tsdf_dims;
  TsdfVolume vol = fit_tsdf_volume(frames, tcfg);
  for (const auto& f : frames) tsdf_integrate(vol, f);
  save_tsdf(paths.tsdf(), vol);

  json fr;
  fr["schema_version"] = 1;
  fr["iterations"] = rep.iterations;
  fr["final_count"] = rep.final_count;
  fr["rejected_steps"] = rep.rejected_steps;
  fr["mean_train_psnr"] = rep.mean_train_psnr;
  fr["final_loss"] = rep.loss_history.empty() ? 0.0 : rep.loss_history.back();
  write_json_file(paths.fit_report(), fr);
  save_pipeline_config(paths.config(), cfg);
  std::cout << "reconstruct: " << rep.final_count << " splats, mean train psnr "
            << rep.mean_train_psnr << " dB\n";
}

void stage_build_dataset(const PipelineConfig& cfg) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  require_artifact(paths.capture_train(), "capture");
  require_artifact(paths.gaussians(), "reconstruct");
  require_artifact(paths.tsdf(), "reconstruct");
  const auto frames = read_capture_dataset(paths.capture_train());
  const GaussianCloud cloud = load_gaussians(paths.gaussians());
  const TsdfVolume vol = load_tsdf(paths.tsdf());
  const auto trips = build_triplets(frames, cloud, vol);
  write_triplet_dataset(paths.dataset(), "train", trips);
  save_pipeline_config(paths.config(), cfg);
  std::cout << "build-dataset: " << trips.size() << " triplets\n";
}

void stage_pretrain_codec(const PipelineConfig& cfg) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  require_artifact(paths.capture_train(), "capture");
  const auto trips = build_pretrain_triplets(cfg);
  std::vector<Image> corpus;
  corpus.reserve(trips.size() * 3 + 64);
  for (const auto& t : trips) {
    corpus.push_back(t.i_gt);
    corpus.push_back(t.i_mesh);
    corpus.push_back(t.i_gs);
  }
  // the target scene's captures join the corpus so its palette is in-domain
  for (const auto& f : read_capture_dataset(paths.capture_train())) corpus.push_back(f.rgb);

  CodecTrainReport rep;
  Codec codec = pretrain_codec(corpus, cfg.codec.arch, cfg.codec.iterations,
                               stage_seed(cfg.seed, "codec.train"), &rep);
  save_codec(paths.codec_ckpt(), codec, cfg.codec.iterations);
  save_pipeline_config(paths.config(), cfg);
  std::cout << "pretrain-codec: " << corpus.size() << " images, final loss " << rep.final_loss
            << "\n";
}

void stage_pretrain_fixer(const PipelineConfig& cfg) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  require_artifact(paths.codec_ckpt(), "pretrain-codec");
  Codec codec;
  load_codec(paths.codec_ckpt(), codec);

  const auto trips = build_pretrain_triplets(cfg);
  const auto pool = encode_pool(codec, trips, cfg.augment, cfg.pretrain.mask_augment,
                                cfg.pretrain.augment_variants,
                                stage_seed(cfg.seed, "pretrain.augment"));
  std::cout << "pretrain-fixer: " << pool.size() << " encoded triplets in the pool\n";

  const NoiseSchedule sched =
      make_schedule(cfg.schedule.timesteps, cfg.schedule.beta_start, cfg.schedule.beta_end);
  nn::UNetConfig bcfg;
  bcfg.in_channels = cfg.codec.arch.latent_channels;
  bcfg.out_channels = cfg.codec.arch.latent_channels;
  bcfg.base = cfg.denoiser.base;
  bcfg.mult1 = cfg.denoiser.mult1;
  bcfg.mult2 = cfg.denoiser.mult2;
  bcfg.temb_dim = cfg.denoiser.temb_dim;
  nn::UNet<float> base;
  base.configure(bcfg, stage_seed(cfg.seed, "denoiser.init"));
  nn::UNet<float> net =
      widen_denoiser(base, 1 + static_cast<int>(cfg.denoiser.condition_order.size()));

  train_denoiser_loop(net, sched, pool, cfg.denoiser.condition_order, cfg.pretrain.iterations,
                      cfg.pretrain.batch_size, cfg.pretrain.grad_accum, cfg.pretrain.lr,
                      stage_seed(cfg.seed, "pretrain.train"), "pretrain-fixer");
  save_denoiser(paths.fixer_pretrain_ckpt(), net, sched, cfg.denoiser.condition_order,
                cfg.pretrain.iterations);
  save_pipeline_config(paths.config(), cfg);
  std::cout << "pretrain-fixer: saved " << paths.fixer_pretrain_ckpt() << "\n";
}

void stage_finetune_fixer(const PipelineConfig& cfg) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  require_artifact(paths.codec_ckpt(), "pretrain-codec");
  require_artifact(paths.fixer_pretrain_ckpt(), "pretrain-fixer");
  require_artifact(paths.dataset() + "/train", "build-dataset");
  Codec codec;
  load_codec(paths.codec_ckpt(), codec);
  nn::UNet<float> net;
  const DenoiserCheckpoint ckpt =
      load_denoiser(paths.fixer_pretrain_ckpt(), net, cfg.denoiser.condition_order);

  const auto trips = read_triplet_dataset(paths.dataset(), "train");
  const auto pool = encode_pool(codec, trips, cfg.augment, cfg.finetune.mask_augment,
                                cfg.finetune.augment_variants,
                                stage_seed(cfg.seed, "finetune.augment"));
  std::cout << "finetune-fixer: " << pool.size() << " encoded triplets in the pool\n";

  train_denoiser_loop(net, ckpt.schedule, pool, ckpt.condition_order, cfg.finetune.iterations,
                      cfg.finetune.batch_size, cfg.finetune.grad_accum, cfg.finetune.lr,
                      stage_seed(cfg.seed, "finetune.train"), "finetune-fixer");
  save_denoiser(paths.fixer_ckpt(), net, ckpt.schedule, ckpt.condition_order,
                ckpt.trained_iterations + cfg.finetune.iterations);
  save_pipeline_config(paths.config(), cfg);
  std::cout << "finetune-fixer: saved " << paths.fixer_ckpt() << "\n";
}

void stage_infer(const PipelineConfig& cfg) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  require_artifact(paths.codec_ckpt(), "pretrain-codec");
  require_artifact(paths.fixer_ckpt(), "finetune-fixer");
  require_artifact(paths.gaussians(), "reconstruct");
  require_artifact(paths.tsdf(), "reconstruct");
  require_artifact(paths.capture_novel(), "capture with novel_views > 0");
  Codec codec;
  load_codec(paths.codec_ckpt(), codec);
  nn::UNet<float> net;
  const DenoiserCheckpoint ckpt = load_denoiser(paths.fixer_ckpt(), net);
  const GaussianCloud cloud = load_gaussians(paths.gaussians());
  const TsdfVolume vol = load_tsdf(paths.tsdf());
  const auto novel = read_capture_dataset(paths.capture_novel());
  FixerModels models = assemble_models(cfg, codec, net, ckpt, paths.fixer_ckpt());

  const RenderConfig rcfg;
  fs::remove_all(paths.infer_dir());  // stale views from a previous run must not survive
  ensure_dir(paths.infer_dir());
  const uint64_t s0 = stage_seed(cfg.seed, "infer");
  for (size_t i = 0; i < novel.size(); ++i) {
    const std::string stem = paths.infer_dir() + "/" + idx5(static_cast<int>(i));
    save_png(stem + "_gs.png", render(cloud, novel[i].cam, rcfg).rgb);
    save_png(stem + "_mesh.png", raycast_tsdf(vol, novel[i].cam).rgb);
    const Image fixed =
        repair_view(novel[i].cam, cloud, vol, models, s0 + 1000ull * (i + 1), rcfg);
    save_png(stem + "_fixed.png", fixed);
  }

  // metric values always come from the saved files, so a later evaluate
  // recomputes exactly the same numbers
  std::vector<MetricsRecord> records;
  double raw_sum = 0.0, fixed_sum = 0.0;
  for (size_t i = 0; i < novel.size(); ++i) {
    const std::string stem = paths.infer_dir() + "/" + idx5(static_cast<int>(i));
    const Image gs = load_png(stem + "_gs.png");
    const Image fixed = load_png(stem + "_fixed.png");
    const std::string view = "novel_" + idx5(static_cast<int>(i));
    records.push_back({view, "infer_raw", psnr(gs, novel[i].rgb), ssim(gs, novel[i].rgb)});
    records.push_back(
        {view, "infer_fixed", psnr(fixed, novel[i].rgb), ssim(fixed, novel[i].rgb)});
    raw_sum += records[records.size() - 2].psnr;
    fixed_sum += records.back().psnr;
  }
  write_metrics_json(paths.infer_dir() + "/metrics.json", records);
  save_pipeline_config(paths.config(), cfg);
  const double n = novel.empty() ? 1.0 : static_cast<double>(novel.size());
  std::cout << "infer: " << novel.size() << " views, mean psnr raw " << raw_sum / n << " -> fixed "
            << fixed_sum / n << " dB\n";
}

void stage_gsfix3d(const PipelineConfig& cfg, int novel_override) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  require_artifact(paths.codec_ckpt(), "pretrain-codec");
  require_artifact(paths.fixer_ckpt(), "finetune-fixer");
  require_artifact(paths.gaussians(), "reconstruct");
  require_artifact(paths.tsdf(), "reconstruct");
  require_artifact(paths.capture_train(), "capture");
  Codec codec;
  load_codec(paths.codec_ckpt(), codec);
  nn::UNet<float> net;
  const DenoiserCheckpoint ckpt = load_denoiser(paths.fixer_ckpt(), net);
  GaussianCloud cloud = load_gaussians(paths.gaussians());
  const TsdfVolume vol = load_tsdf(paths.tsdf());
  const auto frames = read_capture_dataset(paths.capture_train());
  std::vector<CaptureFrame> novel;
  if (fs::exists(paths.capture_novel())) novel = read_capture_dataset(paths.capture_novel());
  if (novel_override >= 0 && static_cast<size_t>(novel_override) < novel.size())
    novel.resize(novel_override);

  std::vector<Camera> cams;
  std::vector<Image> gt;
  for (const auto& f : novel) {
    cams.push_back(f.cam);
    gt.push_back(f.rgb);
  }

  FixerModels models = assemble_models(cfg, codec, net, ckpt, paths.fixer_ckpt());
  const DistillConfig dcfg = distill_config(cfg);

  for (const char* sub : {"/raw", "/repaired", "/final"}) {
    fs::remove_all(paths.gsfix_dir() + sub);
    ensure_dir(paths.gsfix_dir() + sub);
  }
  for (size_t i = 0; i < cams.size(); ++i)
    save_png(paths.gsfix_dir() + "/raw/" + idx5(static_cast<int>(i)) + ".png",
             render(cloud, cams[i], dcfg.render).rgb);

  std::vector<Image> repaired, finals;
  const GsfixReport rep = run_gsfix3d(cloud, vol, models, cams, frames, dcfg,
                                      stage_seed(cfg.seed, "gsfix3d"), &gt, &repaired, &finals);
  save_gaussians(paths.gsfix_gaussians(), cloud);
  for (size_t i = 0; i < repaired.size(); ++i)
    save_png(paths.gsfix_dir() + "/repaired/" + idx5(static_cast<int>(i)) + ".png", repaired[i]);
  for (size_t i = 0; i < finals.size(); ++i)
    save_png(paths.gsfix_dir() + "/final/" + idx5(static_cast<int>(i)) + ".png", finals[i]);

  // every number in the report is recomputed from the artifacts just written,
  // so evaluate can verify them byte for byte against its own recomputation
  const GaussianCloud before = load_gaussians(paths.gaussians());
  const GaussianCloud after = load_gaussians(paths.gsfix_gaussians());
  const double kf_before = keyframe_psnr(before, frames, dcfg.keyframe_stride, dcfg.render);
  const double kf_after = keyframe_psnr(after, frames, dcfg.keyframe_stride, dcfg.render);

  json rj;
  rj["schema_version"] = 1;
  rj["seed"] = cfg.seed;
  rj["codec_hash"] = hex64(hash_dir(paths.codec_ckpt()));
  rj["fixer_hash"] = models.checkpoint_hash;
  rj["keyframe_stride"] = dcfg.keyframe_stride;
  rj["initial_count"] = rep.initial_count;
  rj["final_count"] = rep.final_count;
  rj["keyframe_psnr_before"] = kf_before;
  rj["keyframe_psnr_after"] = kf_after;
  rj["views"] = json::array();
  for (size_t i = 0; i < novel.size(); ++i) {
    const std::string id = idx5(static_cast<int>(i));
    const Image raw = load_png(paths.gsfix_dir() + "/raw/" + id + ".png");
    const Image fix = load_png(paths.gsfix_dir() + "/repaired/" + id + ".png");
    const Image fin = load_png(paths.gsfix_dir() + "/final/" + id + ".png");
    json v;
    v["index"] = static_cast<int>(i);
    v["seeded"] = rep.views[i].seeded;
    v["psnr_raw_vs_fixed"] = psnr(raw, fix);
    v["psnr_raw_vs_gt"] = psnr(raw, novel[i].rgb);
    v["psnr_fixed_vs_gt"] = psnr(fix, novel[i].rgb);
    v["psnr_final_vs_gt"] = psnr(fin, novel[i].rgb);
    v["ssim_final_vs_gt"] = ssim(fin, novel[i].rgb);
    rj["views"].push_back(v);
  }
  write_json_file(paths.gsfix_report(), rj);
  save_pipeline_config(paths.config(), cfg);
  std::cout << "gsfix3d: " << novel.size() << " views repaired, splats " << rep.initial_count
            << " -> " << rep.final_count << ", keyframe psnr " << kf_before << " -> " << kf_after
            << " dB\n";
}

void stage_evaluate(const PipelineConfig& cfg) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  const bool have_gsfix = fs::exists(paths.gsfix_report());
  const bool have_infer = fs::exists(paths.infer_dir() + "/metrics.json");
  if (!have_gsfix && !have_infer)
    throw std::runtime_error("nothing to evaluate; run gsfix3d or infer first");

  std::vector<CaptureFrame> novel;
  if (fs::exists(paths.capture_novel())) novel = read_capture_dataset(paths.capture_novel());
  auto mask_for = [&](int i) -> Image {
    const std::string p = paths.novel_masks() + "/" + idx5(i) + ".png";
    return fs::exists(p) ? load_png(p) : Image();
  };
  auto drift = [](const std::string& where) {
    throw std::runtime_error("stored metrics diverge from the saved images at " + where);
  };

  json out;
  out["schema_version"] = 1;
  out["lpips"] = nullptr;  // no trained perceptual metric ships with this project
  out["records"] = json::array();
  auto add_record = [&out](const std::string& view, const std::string& stage, double p, double s,
                           double masked) {
    json r = {{"view_id", view}, {"stage", stage}, {"psnr", p}, {"ssim", s}};
    if (masked >= 0.0) r["psnr_masked"] = masked;
    out["records"].push_back(r);
  };

  double raw_sum = 0.0, fixed_sum = 0.0, final_sum = 0.0;
  double masked_raw_sum = 0.0, masked_fixed_sum = 0.0;
  int n_views = 0, n_masked = 0;

  if (have_gsfix) {
    const json rj = read_json_file(paths.gsfix_report());
    for (const json& v : rj.at("views")) {
      const int i = v.at("index").get<int>();
      if (static_cast<size_t>(i) >= novel.size())
        throw std::runtime_error("gsfix report references novel view " + std::to_string(i) +
                                 " but the capture has " + std::to_string(novel.size()));
      const std::string id = idx5(i);
      const Image raw = load_png(paths.gsfix_dir() + "/raw/" + id + ".png");
      const Image fix = load_png(paths.gsfix_dir() + "/repaired/" + id + ".png");
      const Image fin = load_png(paths.gsfix_dir() + "/final/" + id + ".png");
      const Image& gt = novel[i].rgb;
      const double p_raw = psnr(raw, gt), p_fix = psnr(fix, gt), p_fin = psnr(fin, gt);
      const double s_fin = ssim(fin, gt);
      if (psnr(raw, fix) != v.at("psnr_raw_vs_fixed").get<double>() ||
          p_raw != v.at("psnr_raw_vs_gt").get<double>() ||
          p_fix != v.at("psnr_fixed_vs_gt").get<double>() ||
          p_fin != v.at("psnr_final_vs_gt").get<double>() ||
          s_fin != v.at("ssim_final_vs_gt").get<double>())
        drift("gsfix view " + id);
      const Image mask = mask_for(i);
      double m_raw = -1.0, m_fix = -1.0;
      if (!mask.empty()) {
        m_raw = psnr_masked(raw, gt, mask);
        m_fix = psnr_masked(fix, gt, mask);
        masked_raw_sum += m_raw;
        masked_fixed_sum += m_fix;
        ++n_masked;
      }
      const std::string view = "novel_" + id;
      add_record(view, "gsfix_raw", p_raw, ssim(raw, gt), m_raw);
      add_record(view, "gsfix_repaired", p_fix, ssim(fix, gt), m_fix);
      add_record(view, "gsfix_final", p_fin, s_fin, -1.0);
      raw_sum += p_raw;
      fixed_sum += p_fix;
      final_sum += p_fin;
      ++n_views;
    }

    // the keyframe numbers must reproduce from the saved clouds as well
    const auto frames = read_capture_dataset(paths.capture_train());
    const int stride = rj.at("keyframe_stride").get<int>();
    const RenderConfig rcfg;
    const double kf_before =
        keyframe_psnr(load_gaussians(paths.gaussians()), frames, stride, rcfg);
    const double kf_after =
        keyframe_psnr(load_gaussians(paths.gsfix_gaussians()), frames, stride, rcfg);
    if (kf_before != rj.at("keyframe_psnr_before").get<double>() ||
        kf_after != rj.at("keyframe_psnr_after").get<double>())
      drift("keyframe psnr");
    out["keyframe"] = {{"before", kf_before}, {"after", kf_after}, {"report_match", true}};
  }

  if (have_infer) {
    const auto stored = read_metrics_json(paths.infer_dir() + "/metrics.json");
    for (const auto& r : stored) {
      const int i = std::stoi(r.view_id.substr(r.view_id.rfind('_') + 1));
      if (static_cast<size_t>(i) >= novel.size())
        throw std::runtime_error("infer metrics reference missing novel view " + r.view_id);
      const std::string suffix = r.stage == "infer_raw" ? "_gs.png" : "_fixed.png";
      const Image img = load_png(paths.infer_dir() + "/" + idx5(i) + suffix);
      const double p = psnr(img, novel[i].rgb), s = ssim(img, novel[i].rgb);
      if (p != r.psnr || s != r.ssim) drift("infer view " + r.view_id);
      const Image mask = mask_for(i);
      add_record(r.view_id, r.stage, p, s,
                 mask.empty() ? -1.0 : psnr_masked(img, novel[i].rgb, mask));
    }
  }

  json summary;
  if (n_views > 0) {
    summary["mean_psnr_raw"] = raw_sum / n_views;
    summary["mean_psnr_fixed"] = fixed_sum / n_views;
    summary["mean_psnr_final"] = final_sum / n_views;
    summary["gain_full_db"] = final_sum / n_views - raw_sum / n_views;
  }
  if (n_masked > 0) {
    summary["mean_masked_psnr_raw"] = masked_raw_sum / n_masked;
    summary["mean_masked_psnr_fixed"] = masked_fixed_sum / n_masked;
    summary["gain_masked_db"] = (masked_fixed_sum - masked_raw_sum) / n_masked;
  }
  out["summary"] = summary;
  write_json_file(paths.eval_metrics(), out);
  std::cout << "evaluate: " << out["records"].size() << " records";
  if (n_views > 0)
    std::cout << ", mean final psnr " << final_sum / n_views << " dB (raw " << raw_sum / n_views
              << ")";
  std::cout << "\n";
}

void stage_report(const PipelineConfig& cfg) {
  validate_pipeline_config(cfg);
  const RunPaths paths(cfg.out_dir);
  require_artifact(paths.eval_metrics(), "evaluate");
  const json em = read_json_file(paths.eval_metrics());

  json rep;
  rep["schema_version"] = 1;
  rep["lpips"] = nullptr;
  rep["summary"] = em.value("summary", json::object());
  if (em.contains("keyframe")) rep["keyframe"] = em.at("keyframe");
  rep["records"] = em.at("records");
  if (fs::exists(paths.gsfix_report())) {
    const json rj = read_json_file(paths.gsfix_report());
    rep["checkpoints"] = {{"codec", rj.at("codec_hash")}, {"fixer", rj.at("fixer_hash")}};
    rep["splats"] = {{"initial", rj.at("initial_count")}, {"final", rj.at("final_count")}};
  }
  ensure_dir(paths.report_dir());
  write_json_file(paths.report_dir() + "/report.json", rep);

  // one row per repaired view: ground truth, raw render, repaired, refined
  std::vector<Image> rows;
  if (fs::exists(paths.capture_novel()) && fs::exists(paths.gsfix_dir() + "/final")) {
    const auto novel = read_capture_dataset(paths.capture_novel());
    for (size_t i = 0; i < novel.size(); ++i) {
      const std::string id = idx5(static_cast<int>(i));
      const std::string fin = paths.gsfix_dir() + "/final/" + id + ".png";
      if (!fs::exists(fin)) continue;
      rows.push_back(hstack({novel[i].rgb, load_png(paths.gsfix_dir() + "/raw/" + id + ".png"),
                             load_png(paths.gsfix_dir() + "/repaired/" + id + ".png"),
                             load_png(fin)}));
    }
  }
  if (!rows.empty())
    save_png(paths.report_dir() + "/grid.png", vstack(rows));
  else
    fs::remove(paths.report_dir() + "/grid.png");
  std::cout << "report: wrote " << paths.report_dir() << "/report.json"
            << (rows.empty() ? "" : " and grid.png") << "\n";
}

}  // namespace splatfix

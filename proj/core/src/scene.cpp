#include "splatfix/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "splatfix/hash.hpp"
#include "splatfix/rng.hpp"
#include "splatfix/serial.hpp"

namespace splatfix {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* texture_name(TextureKind k) {
  switch (k) {
    case TextureKind::solid: return "solid";
    case TextureKind::checker: return "checker";
    case TextureKind::stripes: return "stripes";
    case TextureKind::noise: return "noise";
  }
  return "checker";
}

TextureKind texture_from_name(const std::string& s) {
  if (s == "solid") return TextureKind::solid;
  if (s == "checker") return TextureKind::checker;
  if (s == "stripes") return TextureKind::stripes;
  if (s == "noise") return TextureKind::noise;
  throw std::invalid_argument("scene: unknown texture kind '" + s + "'");
}

json vec3_to_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

Eigen::Vector3d vec3_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("scene: expected 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

std::string SceneSpec::to_json() const {
  json j;
  j["schema_version"] = 1;
  j["seed"] = seed;
  j["background"] = vec3_to_json(background);
  j["primitives"] = json::array();
  for (const auto& p : primitives) {
    json pj;
    pj["type"] = p.type;
    pj["center"] = vec3_to_json(p.center);
    pj["extents"] = vec3_to_json(p.extents);
    if (p.type == "plane") pj["axis"] = p.axis;
    pj["texture"] = texture_name(p.texture);
    pj["base_rgb"] = vec3_to_json(p.base_rgb);
    pj["tex_scale"] = p.tex_scale;
    j["primitives"].push_back(pj);
  }
  return j.dump(2) + "\n";
}

SceneSpec SceneSpec::from_json(const std::string& text) {
  const json j = json::parse(text);
  SceneSpec s;
  s.seed = j.at("seed").get<uint64_t>();
  s.background = vec3_from_json(j.at("background"));
  for (const auto& pj : j.at("primitives")) {
    PrimitiveSpec p;
    p.type = pj.at("type").get<std::string>();
    p.center = vec3_from_json(pj.at("center"));
    p.extents = vec3_from_json(pj.at("extents"));
    if (pj.contains("axis")) p.axis = pj.at("axis").get<int>();
    p.texture = texture_from_name(pj.at("texture").get<std::string>());
    p.base_rgb = vec3_from_json(pj.at("base_rgb"));
    p.tex_scale = pj.at("tex_scale").get<double>();
    s.primitives.push_back(p);
  }
  return s;
}

void save_scene_spec(const std::string& path, const SceneSpec& spec) {
  write_text_file(path, spec.to_json());
}

SceneSpec load_scene_spec(const std::string& path) {
  return SceneSpec::from_json(read_text_file(path));
}

SceneSpec make_default_scene_spec(uint64_t seed) {
  Rng rng = Rng::stream(seed, "scene_layout");
  auto jitter = [&](double amt) { return rng.uniform(-amt, amt); };

  SceneSpec s;
  s.seed = seed;
  s.background = Eigen::Vector3d::Zero();

  PrimitiveSpec desk;
  desk.type = "plane";
  desk.axis = 1;
  desk.center = {0.0, 0.0, 0.1};
  desk.extents = {1.05 + jitter(0.06), 0.0, 0.75 + jitter(0.05)};
  desk.texture = TextureKind::checker;
  desk.base_rgb = {0.62, 0.47, 0.33};
  desk.tex_scale = 0.26;
  s.primitives.push_back(desk);

  PrimitiveSpec wall;
  wall.type = "plane";
  wall.axis = 2;
  wall.center = {0.0, 0.40, 0.82};
  wall.extents = {1.05, 0.45, 0.0};
  wall.texture = TextureKind::stripes;
  wall.base_rgb = {0.40, 0.46, 0.54};
  wall.tex_scale = 0.21;
  s.primitives.push_back(wall);

  PrimitiveSpec monitor;
  monitor.type = "box";
  monitor.extents = {0.30 * rng.uniform(0.9, 1.1), 0.22 * rng.uniform(0.9, 1.1), 0.035};
  monitor.center = {-0.28 + jitter(0.05), monitor.extents.y(), 0.46 + jitter(0.04)};
  monitor.texture = TextureKind::noise;
  monitor.base_rgb = {0.30, 0.33, 0.40};
  monitor.tex_scale = 0.14;
  s.primitives.push_back(monitor);

  PrimitiveSpec books;
  books.type = "box";
  books.extents = {0.17 * rng.uniform(0.9, 1.1), 0.055, 0.12};
  books.center = {0.34 + jitter(0.05), books.extents.y(), 0.28 + jitter(0.04)};
  books.texture = TextureKind::checker;
  books.base_rgb = {0.56, 0.22, 0.18};
  books.tex_scale = 0.085;
  s.primitives.push_back(books);

  PrimitiveSpec mug;
  mug.type = "box";
  mug.extents = {0.050, 0.075, 0.050};
  mug.center = {0.05 + jitter(0.04), mug.extents.y(), 0.05 + jitter(0.03)};
  mug.texture = TextureKind::stripes;
  mug.base_rgb = {0.18, 0.52, 0.47};
  mug.tex_scale = 0.05;
  s.primitives.push_back(mug);

  PrimitiveSpec crate;
  crate.type = "box";
  crate.extents = {0.11, 0.085, 0.09};
  crate.center = {-0.42 + jitter(0.04), crate.extents.y(), -0.12 + jitter(0.04)};
  crate.texture = TextureKind::noise;
  crate.base_rgb = {0.63, 0.55, 0.28};
  crate.tex_scale = 0.09;
  s.primitives.push_back(crate);

  return s;
}

Scene build_scene(const SceneSpec& spec) {
  if (spec.primitives.empty()) throw std::invalid_argument("build_scene: no primitives");

  Scene scene;
  scene.spec = spec;
  scene.bbox_min = Eigen::Vector3d::Constant(std::numeric_limits<double>::max());
  scene.bbox_max = Eigen::Vector3d::Constant(std::numeric_limits<double>::lowest());

  Rng rng = Rng::stream(spec.seed, "scene_texture");
  int index = 0;
  for (const auto& ps : spec.primitives) {
    if (ps.type != "box" && ps.type != "plane")
      throw std::invalid_argument("build_scene: unknown primitive type '" + ps.type + "'");
    if (ps.type == "plane" && (ps.axis < 0 || ps.axis > 2))
      throw std::invalid_argument("build_scene: plane axis out of range");
    if (ps.tex_scale <= 0.0) throw std::invalid_argument("build_scene: tex_scale must be positive");
    for (int a = 0; a < 3; ++a) {
      const bool in_plane = ps.type == "box" || a != ps.axis;
      if (in_plane && !(ps.extents[a] > 0.0))
        throw std::invalid_argument("build_scene: extents must be positive");
    }

    Primitive p;
    p.spec = ps;
    for (int c = 0; c < 3; ++c) {
      p.spec.base_rgb[c] = std::clamp(ps.base_rgb[c] + rng.uniform(-0.05, 0.05), 0.03, 0.97);
      p.secondary_rgb[c] = std::clamp(p.spec.base_rgb[c] * 0.42 + rng.uniform(-0.03, 0.03), 0.02, 0.95);
    }
    p.tex_seed = fnv1a64(&index, sizeof(index), spec.seed ^ 0x5bd1e995u);
    p.phase_u = rng.uniform(0.0, ps.tex_scale);
    p.phase_v = rng.uniform(0.0, ps.tex_scale);
    scene.prims.push_back(p);

    Eigen::Vector3d ext = ps.extents;
    if (ps.type == "plane") ext[ps.axis] = 0.0;
    scene.bbox_min = scene.bbox_min.cwiseMin(ps.center - ext);
    scene.bbox_max = scene.bbox_max.cwiseMax(ps.center + ext);
    ++index;
  }
  return scene;
}

namespace {

bool intersect_box(const PrimitiveSpec& b, const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                   double t_min, double& t_out, int& axis_out, double& sign_out) {
  double t_near = -std::numeric_limits<double>::max();
  double t_far = std::numeric_limits<double>::max();
  int near_axis = -1;
  double near_sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double lo = b.center[a] - b.extents[a];
    const double hi = b.center[a] + b.extents[a];
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo || o[a] > hi) return false;
      continue;
    }
    const double inv = 1.0 / d[a];
    double t1 = (lo - o[a]) * inv;
    double t2 = (hi - o[a]) * inv;
    double sign = d[a] > 0 ? -1.0 : 1.0;  // normal of the entry face
    if (t1 > t2) std::swap(t1, t2);
    if (t1 > t_near) {
      t_near = t1;
      near_axis = a;
      near_sign = sign;
    }
    t_far = std::min(t_far, t2);
    if (t_near > t_far) return false;
  }
  if (near_axis < 0 || t_near <= t_min) return false;
  t_out = t_near;
  axis_out = near_axis;
  sign_out = near_sign;
  return true;
}

bool intersect_plane(const PrimitiveSpec& p, const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                     double t_min, double& t_out, double& sign_out) {
  const int a = p.axis;
  if (std::abs(d[a]) < 1e-12) return false;
  const double t = (p.center[a] - o[a]) / d[a];
  if (t <= t_min) return false;
  const Eigen::Vector3d q = o + t * d;
  for (int b = 0; b < 3; ++b) {
    if (b == a) continue;
    if (std::abs(q[b] - p.center[b]) > p.extents[b]) return false;
  }
  t_out = t;
  sign_out = o[a] > p.center[a] ? 1.0 : -1.0;
  return true;
}

double lattice_value(uint64_t tex_seed, int64_t ix, int64_t iy) {
  uint64_t h = tex_seed;
  h = fnv1a64(&ix, sizeof(ix), h);
  h = fnv1a64(&iy, sizeof(iy), h);
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smoothstep(double t) { return t * t * (3.0 - 2.0 * t); }

Eigen::Vector3d sample_albedo(const Primitive& p, int face_axis, const Eigen::Vector3d& point) {
  const int ua = (face_axis + 1) % 3;
  const int va = (face_axis + 2) % 3;
  const double u = (point[ua] + p.phase_u) / p.spec.tex_scale;
  const double v = (point[va] + p.phase_v) / p.spec.tex_scale;

  switch (p.spec.texture) {
    case TextureKind::solid: return p.spec.base_rgb;
    case TextureKind::checker: {
      const auto iu = static_cast<int64_t>(std::floor(u));
      const auto iv = static_cast<int64_t>(std::floor(v));
      return ((iu + iv) & 1) == 0 ? p.spec.base_rgb : p.secondary_rgb;
    }
    case TextureKind::stripes: {
      const auto iu = static_cast<int64_t>(std::floor(u));
      return (iu & 1) == 0 ? p.spec.base_rgb : p.secondary_rgb;
    }
    case TextureKind::noise: {
      const auto ix = static_cast<int64_t>(std::floor(u));
      const auto iy = static_cast<int64_t>(std::floor(v));
      const double fx = smoothstep(u - std::floor(u));
      const double fy = smoothstep(v - std::floor(v));
      const double v00 = lattice_value(p.tex_seed, ix, iy);
      const double v10 = lattice_value(p.tex_seed, ix + 1, iy);
      const double v01 = lattice_value(p.tex_seed, ix, iy + 1);
      const double v11 = lattice_value(p.tex_seed, ix + 1, iy + 1);
      const double val = (v00 * (1 - fx) + v10 * fx) * (1 - fy) + (v01 * (1 - fx) + v11 * fx) * fy;
      return p.secondary_rgb + (p.spec.base_rgb - p.secondary_rgb) * val;
    }
  }
  return p.spec.base_rgb;
}

const Eigen::Vector3d kLightDir = Eigen::Vector3d(-0.35, 0.9, -0.25).normalized();

Eigen::Vector3d shade(const Primitive& p, const Hit& hit) {
  int face_axis = 0;
  double an = 0.0;
  for (int a = 0; a < 3; ++a)
    if (std::abs(hit.normal[a]) > an) {
      an = std::abs(hit.normal[a]);
      face_axis = a;
    }
  const Eigen::Vector3d albedo = sample_albedo(p, face_axis, hit.point);
  const double lit = 0.35 + 0.65 * std::abs(hit.normal.dot(kLightDir));
  return albedo * lit;
}

}  // namespace

std::optional<Hit> intersect_scene(const Scene& scene, const Eigen::Vector3d& origin,
                                   const Eigen::Vector3d& dir, double t_min) {
  Hit best;
  best.t = std::numeric_limits<double>::max();
  for (size_t i = 0; i < scene.prims.size(); ++i) {
    const auto& ps = scene.prims[i].spec;
    double t;
    if (ps.type == "box") {
      int axis;
      double sign;
      if (intersect_box(ps, origin, dir, t_min, t, axis, sign) && t < best.t) {
        best.t = t;
        best.prim = static_cast<int>(i);
        best.normal = Eigen::Vector3d::Zero();
        best.normal[axis] = sign;
      }
    } else {
      double sign;
      if (intersect_plane(ps, origin, dir, t_min, t, sign) && t < best.t) {
        best.t = t;
        best.prim = static_cast<int>(i);
        best.normal = Eigen::Vector3d::Zero();
        best.normal[ps.axis] = sign;
      }
    }
  }
  if (best.prim < 0) return std::nullopt;
  best.point = origin + best.t * dir;
  return best;
}

RgbdRender render_ground_truth(const Scene& scene, const Camera& cam) {
  cam.validate();
  RgbdRender out;
  out.rgb = Image(cam.width, cam.height, 3);
  out.depth = Image(cam.width, cam.height, 1);
  const Eigen::Vector3d origin = cam.position();

  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Eigen::Vector3d dir = cam.ray_dir_world(x + 0.5, y + 0.5);
      const auto hit = intersect_scene(scene, origin, dir);
      if (hit) {
        const Eigen::Vector3d c = shade(scene.prims[hit->prim], *hit);
        for (int ch = 0; ch < 3; ++ch) out.rgb.at(y, x, ch) = std::clamp(c[ch], 0.0, 1.0);
        out.depth.at(y, x, 0) = hit->t;
      } else {
        for (int ch = 0; ch < 3; ++ch) out.rgb.at(y, x, ch) = scene.spec.background[ch];
      }
    }
  return out;
}

double render_coverage(const Scene& scene, const Camera& cam) {
  const Eigen::Vector3d origin = cam.position();
  int hits = 0;
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x)
      if (intersect_scene(scene, origin, cam.ray_dir_world(x + 0.5, y + 0.5))) ++hits;
  return static_cast<double>(hits) / (static_cast<double>(cam.width) * cam.height);
}

namespace {

Camera orbit_camera(const Scene& scene, const Eigen::Vector3d& target, double radius,
                    double az_rad, double el_rad, const TrajectoryConfig& cfg) {
  const Eigen::Vector3d eye =
      target + radius * Eigen::Vector3d(std::cos(el_rad) * std::sin(az_rad), std::sin(el_rad),
                                        std::cos(el_rad) * std::cos(az_rad));
  const int res = cfg.resolution;
  const double f = (res / 2.0) / std::tan(0.5 * cfg.fov_deg * M_PI / 180.0);
  return look_at_camera(eye, target, f, f, res / 2.0, res / 2.0, res, res);
}

}  // namespace

std::vector<Camera> sample_training_trajectory(const Scene& scene, int n, uint64_t seed,
                                               const TrajectoryConfig& cfg) {
  if (n < 1) throw std::invalid_argument("sample_training_trajectory: need n >= 1");

  const Eigen::Vector3d target = scene.center();
  const double bbox_radius = std::max(0.5 * scene.diameter(), 1e-3);
  const double arc = n > 1 ? std::min(cfg.arc_deg, cfg.max_step_deg * (n - 1)) : 0.0;

  double radius = cfg.radius_scale * bbox_radius;
  for (int attempt = 0; attempt < 10; ++attempt) {
    Rng rng = Rng::stream(seed, "trajectory");
    std::vector<Camera> cams;
    double worst = 1.0;
    for (int i = 0; i < n; ++i) {
      const double frac = n > 1 ? static_cast<double>(i) / (n - 1) : 0.5;
      const double az = 180.0 + (-0.5 * arc + arc * frac) + rng.uniform(-1.5, 1.5);
      const double el = cfg.elev_deg + rng.uniform(-cfg.elev_jitter_deg, cfg.elev_jitter_deg);
      Camera cam = orbit_camera(scene, target, radius, az * M_PI / 180.0, el * M_PI / 180.0, cfg);
      worst = std::min(worst, render_coverage(scene, cam));
      cams.push_back(std::move(cam));
    }
    if (worst >= cfg.min_coverage) return cams;
    radius *= 0.9;  // tighten the orbit until the scene fills enough of the frame
  }
  throw std::runtime_error("sample_training_trajectory: coverage target unreachable");
}

namespace {

struct VisibilityContext {
  std::vector<Camera> cams_ss;
  std::vector<Image> depth_ss;
};

VisibilityContext make_visibility_context(const Scene& scene, const std::vector<Camera>& training,
                                          int ss) {
  VisibilityContext ctx;
  for (const auto& cam : training) {
    Camera c = cam.scaled(ss);
    ctx.depth_ss.push_back(render_ground_truth(scene, c).depth);
    ctx.cams_ss.push_back(std::move(c));
  }
  return ctx;
}

// A surface point counts as observed only if some training camera sees it
// from the same side it is being rendered from (normal points at the novel
// camera); the far side of a thin plane is a different surface.
bool observed_by_any(const VisibilityContext& ctx, const Eigen::Vector3d& p,
                     const Eigen::Vector3d& normal, const NovelViewConfig& cfg) {
  for (size_t i = 0; i < ctx.cams_ss.size(); ++i) {
    const Camera& cam = ctx.cams_ss[i];
    if (normal.dot(cam.position() - p) <= 0.0) continue;
    const Eigen::Vector3d pc = cam.world_to_cam(p);
    if (pc.z() <= 0.02) continue;
    const Eigen::Vector2d uv = cam.project_cam(pc);
    if (!cam.in_image(uv)) continue;
    const int px = static_cast<int>(uv.x());
    const int py = static_cast<int>(uv.y());
    const double d = ctx.depth_ss[i].at(py, px, 0);
    if (d <= 0.0) continue;
    if (pc.z() <= d * (1.0 + cfg.depth_tol_rel) + cfg.depth_tol_abs) return true;
  }
  return false;
}

// Supersampled binary mask plus the unobserved pixel fraction.
std::pair<Image, double> unobserved_mask_ss(const Scene& scene, const VisibilityContext& ctx,
                                            const Camera& novel_ss, const NovelViewConfig& cfg) {
  Image mask(novel_ss.width, novel_ss.height, 1);
  const Eigen::Vector3d origin = novel_ss.position();
  size_t unobserved = 0;
  for (int y = 0; y < novel_ss.height; ++y)
    for (int x = 0; x < novel_ss.width; ++x) {
      const auto hit = intersect_scene(scene, origin, novel_ss.ray_dir_world(x + 0.5, y + 0.5));
      if (!hit) continue;
      if (!observed_by_any(ctx, hit->point, hit->normal, cfg)) {
        mask.at(y, x, 0) = 1.0;
        ++unobserved;
      }
    }
  const double frac = static_cast<double>(unobserved) /
                      (static_cast<double>(novel_ss.width) * novel_ss.height);
  return {std::move(mask), frac};
}

Image downsample_binary(const Image& mask_ss, int ss) {
  Image out(mask_ss.width / ss, mask_ss.height / ss, 1);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x) {
      double acc = 0.0;
      for (int dy = 0; dy < ss; ++dy)
        for (int dx = 0; dx < ss; ++dx) acc += mask_ss.at(y * ss + dy, x * ss + dx, 0);
      out.at(y, x, 0) = acc >= 0.5 * ss * ss ? 1.0 : 0.0;
    }
  return out;
}

}  // namespace

Image compute_unobserved_mask(const Scene& scene, const std::vector<Camera>& training,
                              const Camera& novel, const NovelViewConfig& cfg) {
  const auto ctx = make_visibility_context(scene, training, cfg.supersample);
  auto [mask_ss, frac] = unobserved_mask_ss(scene, ctx, novel.scaled(cfg.supersample), cfg);
  (void)frac;
  return downsample_binary(mask_ss, cfg.supersample);
}

std::vector<Camera> sample_extreme_novel_views(const Scene& scene,
                                               const std::vector<Camera>& training, int n,
                                               uint64_t seed, const NovelViewConfig& cfg) {
  if (n < 0) throw std::invalid_argument("sample_extreme_novel_views: negative n");
  std::vector<Camera> out;
  if (n == 0) return out;
  if (training.empty())
    throw std::invalid_argument("sample_extreme_novel_views: empty training set");

  const auto ctx = make_visibility_context(scene, training, cfg.supersample);
  const Eigen::Vector3d center = scene.center();
  const double diameter = scene.diameter();
  const double bbox_radius = std::max(0.5 * diameter, 1e-3);
  const double base_radius = (training[0].position() - center).norm();

  // Reuse the training intrinsics so every rendered view shares one model.
  TrajectoryConfig tcfg;
  tcfg.resolution = training[0].width;
  tcfg.fov_deg = 2.0 * std::atan((training[0].width / 2.0) / training[0].fx) * 180.0 / M_PI;

  Rng rng = Rng::stream(seed, "novel_views");
  for (int attempt = 0; attempt < cfg.max_candidates && static_cast<int>(out.size()) < n;
       ++attempt) {
    const double az = rng.uniform(0.0, 360.0) * M_PI / 180.0;
    const double el = rng.uniform(cfg.elev_lo_deg, cfg.elev_hi_deg) * M_PI / 180.0;
    const double radius = base_radius * rng.uniform(cfg.radius_lo, cfg.radius_hi);
    Eigen::Vector3d target = center;
    for (int a = 0; a < 3; ++a)
      target[a] += rng.uniform(-cfg.target_jitter, cfg.target_jitter) * bbox_radius;

    Camera cand;
    try {
      cand = orbit_camera(scene, target, radius, az, el, tcfg);
    } catch (const std::invalid_argument&) {
      continue;
    }

    double min_dist = std::numeric_limits<double>::max();
    for (const auto& t : training)
      min_dist = std::min(min_dist, (cand.position() - t.position()).norm());
    if (min_dist < cfg.min_dist_frac * diameter) continue;

    const auto [mask_ss, frac] = unobserved_mask_ss(scene, ctx, cand.scaled(cfg.supersample), cfg);
    if (frac < cfg.min_unobserved) continue;
    out.push_back(std::move(cand));
  }
  if (static_cast<int>(out.size()) < n)
    throw std::runtime_error("sample_extreme_novel_views: candidate budget exhausted");
  return out;
}

namespace {

std::string frame_name(int id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", id);
  return buf;
}

}  // namespace

void write_capture_dataset(const std::string& dir, const std::vector<CaptureFrame>& frames) {
  if (frames.empty()) throw std::invalid_argument("write_capture_dataset: no frames");
  const Camera& c0 = frames[0].cam;
  for (const auto& f : frames) {
    const Camera& c = f.cam;
    if (c.fx != c0.fx || c.fy != c0.fy || c.cx != c0.cx || c.cy != c0.cy ||
        c.width != c0.width || c.height != c0.height)
      throw std::invalid_argument("write_capture_dataset: frames must share intrinsics");
  }

  ensure_dir(dir + "/frames");
  ensure_dir(dir + "/depth");

  json poses = json::object();
  for (const auto& f : frames) {
    const std::string name = frame_name(f.frame_id);
    save_png(dir + "/frames/" + name + ".png", f.rgb);
    save_depth(dir + "/depth/" + name + ".bin", f.depth);
    json m = json::array();
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col) m.push_back(f.cam.pose_wc(r, col));
    poses[name] = m;
  }
  write_text_file(dir + "/poses.json", poses.dump(2) + "\n");

  json intr;
  intr["fx"] = c0.fx;
  intr["fy"] = c0.fy;
  intr["cx"] = c0.cx;
  intr["cy"] = c0.cy;
  intr["width"] = c0.width;
  intr["height"] = c0.height;
  write_text_file(dir + "/intrinsics.json", intr.dump(2) + "\n");
}

std::vector<CaptureFrame> read_capture_dataset(const std::string& dir) {
  const json intr = json::parse(read_text_file(dir + "/intrinsics.json"));
  const json poses = json::parse(read_text_file(dir + "/poses.json"));

  std::vector<std::string> names;
  for (auto it = poses.begin(); it != poses.end(); ++it) names.push_back(it.key());
  std::sort(names.begin(), names.end());

  std::vector<CaptureFrame> frames;
  for (const auto& name : names) {
    CaptureFrame f;
    f.frame_id = std::stoi(name);
    f.rgb = load_png(dir + "/frames/" + name + ".png");
    f.depth = load_depth(dir + "/depth/" + name + ".bin");
    f.cam.fx = intr.at("fx").get<double>();
    f.cam.fy = intr.at("fy").get<double>();
    f.cam.cx = intr.at("cx").get<double>();
    f.cam.cy = intr.at("cy").get<double>();
    f.cam.width = intr.at("width").get<int>();
    f.cam.height = intr.at("height").get<int>();
    const auto& m = poses.at(name);
    if (!m.is_array() || m.size() != 16)
      throw std::runtime_error("read_capture_dataset: pose for " + name + " must have 16 entries");
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col) f.cam.pose_wc(r, col) = m[r * 4 + col].get<double>();
    f.cam.validate();
    if (f.rgb.width != f.cam.width || f.rgb.height != f.cam.height || f.rgb.channels != 3)
      throw std::runtime_error("read_capture_dataset: rgb shape mismatch for " + name);
    if (f.depth.width != f.cam.width || f.depth.height != f.cam.height)
      throw std::runtime_error("read_capture_dataset: depth shape mismatch for " + name);
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace splatfix

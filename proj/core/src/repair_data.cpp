#include "splatfix/repair_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "splatfix/serial.hpp"

namespace splatfix {

using nlohmann::json;

namespace {

std::string frame_tag(int frame_id) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%05d", frame_id);
  return buf;
}

void fill_blob(Image& mask, Rng& rng) {
  const int w = mask.width, h = mask.height;
  const double m = std::min(w, h);
  const double cx = rng.uniform(0.1, 0.9) * w;
  const double cy = rng.uniform(0.1, 0.9) * h;
  const double r0 = rng.uniform(0.07, 0.22) * m;
  double amp[4], phase[4];  // harmonics 2..5 keep the boundary smooth
  for (int k = 0; k < 4; ++k) {
    amp[k] = rng.uniform(-1.0, 1.0) * 0.5 / (k + 2);
    phase[k] = rng.uniform(0.0, 2.0 * M_PI);
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double d = std::hypot(dx, dy);
      if (d > 2.0 * r0) continue;
      const double th = std::atan2(dy, dx);
      double r = 1.0;
      for (int k = 0; k < 4; ++k) r += amp[k] * std::cos((k + 2) * th + phase[k]);
      if (d <= r0 * std::max(0.3, r)) mask.at(y, x, 0) = 1.0;
    }
}

void fill_polygon(Image& mask, Rng& rng) {
  const int w = mask.width, h = mask.height;
  const double m = std::min(w, h);
  const double cx = rng.uniform(0.1, 0.9) * w;
  const double cy = rng.uniform(0.1, 0.9) * h;
  const double R = rng.uniform(0.08, 0.22) * m;
  const int nv = 3 + rng.uniform_int(5);
  std::vector<double> px(nv), py(nv);
  for (int i = 0; i < nv; ++i) {
    const double th =
        2.0 * M_PI * i / nv + rng.uniform(-0.3, 0.3) * 2.0 * M_PI / nv;
    const double r = R * rng.uniform(0.5, 1.0);
    px[i] = cx + r * std::cos(th);
    py[i] = cy + r * std::sin(th);
  }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double qx = x + 0.5, qy = y + 0.5;
      bool inside = false;  // ray-crossing test
      for (int i = 0, j = nv - 1; i < nv; j = i++) {
        if ((py[i] > qy) != (py[j] > qy) &&
            qx < (px[j] - px[i]) * (qy - py[i]) / (py[j] - py[i]) + px[i])
          inside = !inside;
      }
      if (inside) mask.at(y, x, 0) = 1.0;
    }
}

double area_fraction(const Image& mask) {
  double s = 0.0;
  for (double v : mask.data) s += v;
  return s / mask.size();
}

}  // namespace

MaskSpec generate_mask_from_seed(uint64_t seed, const AugmentConfig& cfg, int width, int height) {
  if (width < 1 || height < 1) throw std::invalid_argument("generate_mask: empty resolution");
  if (!(cfg.area_min > 0.0 && cfg.area_min < cfg.area_max && cfg.area_max < 1.0))
    throw std::invalid_argument("generate_mask: bad area range");
  Rng rng(seed);
  MaskSpec spec;
  spec.seed = seed;

  const int max_attempts = 24;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    const bool blob = rng.uniform() < 0.5;
    const int count = 1 + rng.uniform_int(cfg.max_shapes);
    Image mask(width, height, 1);
    for (int i = 0; i < count; ++i) {
      if (blob)
        fill_blob(mask, rng);
      else
        fill_polygon(mask, rng);
    }
    const double area = area_fraction(mask);
    if (area >= cfg.area_min && area <= cfg.area_max) {
      spec.mask = std::move(mask);
      spec.source = blob ? "procedural_blob" : "procedural_polygon";
      return spec;
    }
  }

  // Guaranteed-valid fallback: a centered disk at mid-range area.
  const double target = 0.5 * (cfg.area_min + cfg.area_max);
  const double radius = std::sqrt(target * width * height / M_PI);
  Image mask(width, height, 1);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (std::hypot(x + 0.5 - 0.5 * width, y + 0.5 - 0.5 * height) <= radius)
        mask.at(y, x, 0) = 1.0;
  spec.mask = std::move(mask);
  spec.source = "procedural_blob";
  return spec;
}

MaskSpec generate_mask(Rng& rng, const AugmentConfig& cfg, int width, int height) {
  return generate_mask_from_seed(rng.next_u64(), cfg, width, height);
}

static void check_mask_shape(const TrainingTriplet& t, const Image& mask) {
  if (mask.width != t.i_gt.width || mask.height != t.i_gt.height || mask.channels != 1)
    throw std::invalid_argument("mask shape does not match triplet");
  if (!t.i_mesh.same_shape(t.i_gt) || !t.i_gs.same_shape(t.i_gt))
    throw std::invalid_argument("triplet images disagree in shape");
}

TrainingTriplet apply_shared_mask(const TrainingTriplet& triplet, const Image& mask) {
  check_mask_shape(triplet, mask);
  TrainingTriplet out = triplet;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      const double keep = 1.0 - mask.at(y, x, 0);
      for (int c = 0; c < 3; ++c) {
        out.i_mesh.at(y, x, c) *= keep;
        out.i_gs.at(y, x, c) *= keep;
      }
    }
  return out;
}

TrainingTriplet apply_gs_mask(const TrainingTriplet& triplet, const Image& mask,
                              double blur_sigma) {
  check_mask_shape(triplet, mask);
  if (blur_sigma < 0.0) throw std::invalid_argument("apply_gs_mask: negative blur sigma");
  const Image blurred = gaussian_blur(mask, blur_sigma);
  TrainingTriplet out = triplet;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      // clamp: kernel renormalization can land a hair above 1
      const double keep = std::clamp(1.0 - blurred.at(y, x, 0), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) out.i_gs.at(y, x, c) *= keep;
    }
  return out;
}

TrainingTriplet augment(const TrainingTriplet& triplet, const AugmentConfig& cfg, Rng& rng) {
  if (cfg.p_shared < 0.0 || cfg.p_shared > 1.0 || cfg.p_gs_only < 0.0 || cfg.p_gs_only > 1.0)
    throw std::invalid_argument("augment: probabilities must lie in [0,1]");
  TrainingTriplet out = triplet;
  if (rng.uniform() < cfg.p_shared) {
    const MaskSpec m = generate_mask(rng, cfg, triplet.i_gt.width, triplet.i_gt.height);
    out = apply_shared_mask(out, m.mask);
  }
  if (rng.uniform() < cfg.p_gs_only) {
    const MaskSpec m = generate_mask(rng, cfg, triplet.i_gt.width, triplet.i_gt.height);
    out = apply_gs_mask(out, m.mask, cfg.blur_sigma);
  }
  return out;
}

std::vector<TrainingTriplet> build_triplets(const std::vector<CaptureFrame>& frames,
                                            const GaussianCloud& cloud, const TsdfVolume& volume,
                                            const RenderConfig& render_cfg) {
  if (frames.empty()) throw std::invalid_argument("build_triplets: no frames");
  std::vector<TrainingTriplet> out;
  out.reserve(frames.size());
  for (const auto& f : frames) {
    TrainingTriplet t;
    t.frame_id = f.frame_id;
    t.camera = f.cam;
    t.i_gt = f.rgb;
    t.i_gs = render(cloud, f.cam, render_cfg).rgb;
    t.i_mesh = raycast_tsdf(volume, f.cam).rgb;
    out.push_back(std::move(t));
  }
  return out;
}

void write_triplet_dataset(const std::string& dir, const std::string& split,
                           const std::vector<TrainingTriplet>& triplets) {
  if (triplets.empty()) throw std::invalid_argument("write_triplet_dataset: no triplets");
  const Camera& c0 = triplets[0].camera;
  for (const auto& t : triplets) {
    const Camera& c = t.camera;
    if (c.fx != c0.fx || c.fy != c0.fy || c.cx != c0.cx || c.cy != c0.cy ||
        c.width != c0.width || c.height != c0.height)
      throw std::invalid_argument("write_triplet_dataset: triplets must share intrinsics");
  }
  const std::string base = dir + "/" + split;
  ensure_dir(base);

  json poses = json::object();
  for (const auto& t : triplets) {
    const std::string tag = frame_tag(t.frame_id);
    save_png(base + "/" + tag + "_gt.png", t.i_gt);
    save_png(base + "/" + tag + "_gs.png", t.i_gs);
    save_png(base + "/" + tag + "_mesh.png", t.i_mesh);
    json m = json::array();
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col) m.push_back(t.camera.pose_wc(r, col));
    poses[tag] = m;
  }
  json root;
  root["schema_version"] = 1;
  root["intrinsics"] = {{"fx", c0.fx},     {"fy", c0.fy},         {"cx", c0.cx},
                        {"cy", c0.cy},     {"width", c0.width},   {"height", c0.height}};
  root["poses"] = poses;
  write_text_file(base + "/poses.json", root.dump(2) + "\n");
}

std::vector<TrainingTriplet> read_triplet_dataset(const std::string& dir,
                                                  const std::string& split) {
  const std::string base = dir + "/" + split;
  const json root = json::parse(read_text_file(base + "/poses.json"));
  const json& intr = root.at("intrinsics");
  const json& poses = root.at("poses");

  std::vector<std::string> tags;
  for (auto it = poses.begin(); it != poses.end(); ++it) tags.push_back(it.key());
  std::sort(tags.begin(), tags.end());

  std::vector<TrainingTriplet> out;
  for (const auto& tag : tags) {
    TrainingTriplet t;
    t.frame_id = std::stoi(tag);
    t.i_gt = load_png(base + "/" + tag + "_gt.png");
    t.i_gs = load_png(base + "/" + tag + "_gs.png");
    t.i_mesh = load_png(base + "/" + tag + "_mesh.png");
    Camera& c = t.camera;
    c.fx = intr.at("fx").get<double>();
    c.fy = intr.at("fy").get<double>();
    c.cx = intr.at("cx").get<double>();
    c.cy = intr.at("cy").get<double>();
    c.width = intr.at("width").get<int>();
    c.height = intr.at("height").get<int>();
    const auto& m = poses.at(tag);
    if (!m.is_array() || m.size() != 16)
      throw std::runtime_error("read_triplet_dataset: pose for " + tag + " must have 16 entries");
    for (int r = 0; r < 4; ++r)
      for (int col = 0; col < 4; ++col) c.pose_wc(r, col) = m[r * 4 + col].get<double>();
    c.validate();
    if (!t.i_gt.same_shape(t.i_gs) || !t.i_gt.same_shape(t.i_mesh) ||
        t.i_gt.width != c.width || t.i_gt.height != c.height || t.i_gt.channels != 3)
      throw std::runtime_error("read_triplet_dataset: image shapes disagree for " + tag);
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace splatfix

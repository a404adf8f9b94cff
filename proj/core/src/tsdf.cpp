#include "splatfix/tsdf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "splatfix/serial.hpp"

namespace splatfix {

using nlohmann::json;

TsdfVolume make_tsdf_volume(const Eigen::Vector3d& origin, double voxel_size, int dims,
                            double truncation, double weight_cap) {
  if (dims < 2) throw std::invalid_argument("make_tsdf_volume: dims must be >= 2");
  if (!(voxel_size > 0.0)) throw std::invalid_argument("make_tsdf_volume: bad voxel size");
  if (!(truncation > 0.0)) throw std::invalid_argument("make_tsdf_volume: bad truncation");

  TsdfVolume v;
  v.dims = Eigen::Vector3i::Constant(dims);
  v.origin = origin;
  v.voxel_size = voxel_size;
  v.truncation = truncation;
  v.weight_cap = weight_cap;
  const size_t n = static_cast<size_t>(dims) * dims * dims;
  v.sdf.assign(n, 1.0);
  v.weight.assign(n, 0.0);
  v.color.assign(n * 3, 0.0);
  return v;
}

TsdfVolume fit_tsdf_volume(const std::vector<CaptureFrame>& frames, const TsdfConfig& cfg) {
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::max());
  Eigen::Vector3d hi = Eigen::Vector3d::Constant(std::numeric_limits<double>::lowest());
  bool any = false;
  for (const auto& f : frames) {
    for (int y = 0; y < f.cam.height; ++y)
      for (int x = 0; x < f.cam.width; ++x) {
        const double d = f.depth.at(y, x, 0);
        if (d <= 0.0) continue;
        const Eigen::Vector3d p =
            f.cam.position() + d * f.cam.ray_dir_world(x + 0.5, y + 0.5);
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
        any = true;
      }
  }
  if (!any) throw std::invalid_argument("fit_tsdf_volume: no valid depth in any frame");

  const Eigen::Vector3d center = 0.5 * (lo + hi);
  double extent = (hi - lo).maxCoeff();
  extent *= 1.0 + 2.0 * cfg.margin_frac;
  const double voxel = extent / cfg.dims;
  const double truncation = cfg.truncation_voxels * voxel;
  const Eigen::Vector3d origin = center - 0.5 * extent * Eigen::Vector3d::Ones();
  return make_tsdf_volume(origin, voxel, cfg.dims, truncation, cfg.weight_cap);
}

void tsdf_integrate(TsdfVolume& vol, const CaptureFrame& frame) {
  const Camera& cam = frame.cam;
  cam.validate();
  if (frame.depth.width != cam.width || frame.depth.height != cam.height)
    throw std::invalid_argument("tsdf_integrate: depth shape mismatch");
  if (frame.rgb.width != cam.width || frame.rgb.height != cam.height || frame.rgb.channels != 3)
    throw std::invalid_argument("tsdf_integrate: rgb shape mismatch");

  const Eigen::Matrix3d r_cw = cam.rot_wc().transpose();
  const Eigen::Vector3d t_cw = -r_cw * cam.position();

  for (int k = 0; k < vol.dims.z(); ++k)
    for (int j = 0; j < vol.dims.y(); ++j)
      for (int i = 0; i < vol.dims.x(); ++i) {
        const Eigen::Vector3d pc = r_cw * vol.voxel_center(i, j, k) + t_cw;
        if (pc.z() <= 0.0) continue;
        const Eigen::Vector2d uv = cam.project_cam(pc);
        if (!cam.in_image(uv)) continue;
        const int px = static_cast<int>(uv.x());
        const int py = static_cast<int>(uv.y());
        const double d = frame.depth.at(py, px, 0);
        if (d <= 0.0) continue;

        const double sdf_m = d - pc.z();  // positive in front of the surface
        if (sdf_m < -vol.truncation) continue;
        const double s = std::clamp(sdf_m / vol.truncation, -1.0, 1.0);

        const size_t at = vol.index(i, j, k);
        const double w = vol.weight[at];
        vol.sdf[at] = (vol.sdf[at] * w + s) / (w + 1.0);
        if (std::abs(sdf_m) <= vol.truncation) {
          for (int c = 0; c < 3; ++c)
            vol.color[at * 3 + c] =
                (vol.color[at * 3 + c] * w + frame.rgb.at(py, px, c)) / (w + 1.0);
        }
        vol.weight[at] = std::min(w + 1.0, vol.weight_cap);
      }
}

namespace {

// Trilinear sdf sample; valid only when all eight corner voxels carry
// observations (weight > 0).
bool sample_sdf(const TsdfVolume& vol, const Eigen::Vector3d& p, double& out) {
  const Eigen::Vector3d g = (p - vol.origin) / vol.voxel_size - Eigen::Vector3d::Constant(0.5);
  const int i0 = static_cast<int>(std::floor(g.x()));
  const int j0 = static_cast<int>(std::floor(g.y()));
  const int k0 = static_cast<int>(std::floor(g.z()));
  if (!vol.in_grid(i0, j0, k0) || !vol.in_grid(i0 + 1, j0 + 1, k0 + 1)) return false;

  const double fx = g.x() - i0, fy = g.y() - j0, fz = g.z() - k0;
  double acc = 0.0;
  for (int dk = 0; dk < 2; ++dk)
    for (int dj = 0; dj < 2; ++dj)
      for (int di = 0; di < 2; ++di) {
        const size_t at = vol.index(i0 + di, j0 + dj, k0 + dk);
        if (vol.weight[at] <= 0.0) return false;
        const double w = (di ? fx : 1.0 - fx) * (dj ? fy : 1.0 - fy) * (dk ? fz : 1.0 - fz);
        acc += w * vol.sdf[at];
      }
  out = acc;
  return true;
}

Eigen::Vector3d sample_color(const TsdfVolume& vol, const Eigen::Vector3d& p) {
  const Eigen::Vector3d g = (p - vol.origin) / vol.voxel_size - Eigen::Vector3d::Constant(0.5);
  const int i0 = static_cast<int>(std::floor(g.x()));
  const int j0 = static_cast<int>(std::floor(g.y()));
  const int k0 = static_cast<int>(std::floor(g.z()));

  const double fx = g.x() - i0, fy = g.y() - j0, fz = g.z() - k0;
  Eigen::Vector3d acc = Eigen::Vector3d::Zero();
  double wsum = 0.0;
  for (int dk = 0; dk < 2; ++dk)
    for (int dj = 0; dj < 2; ++dj)
      for (int di = 0; di < 2; ++di) {
        if (!vol.in_grid(i0 + di, j0 + dj, k0 + dk)) continue;
        const size_t at = vol.index(i0 + di, j0 + dj, k0 + dk);
        if (vol.weight[at] <= 0.0) continue;
        const double w = (di ? fx : 1.0 - fx) * (dj ? fy : 1.0 - fy) * (dk ? fz : 1.0 - fz);
        acc += w * Eigen::Vector3d(vol.color[at * 3], vol.color[at * 3 + 1], vol.color[at * 3 + 2]);
        wsum += w;
      }
  if (wsum <= 1e-12) return Eigen::Vector3d::Zero();
  return acc / wsum;
}

bool ray_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Eigen::Vector3d& lo,
             const Eigen::Vector3d& hi, double& t0, double& t1) {
  t0 = 0.0;
  t1 = std::numeric_limits<double>::max();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo[a] || o[a] > hi[a]) return false;
      continue;
    }
    double ta = (lo[a] - o[a]) / d[a];
    double tb = (hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return false;
  }
  return true;
}

}  // namespace

MeshRender raycast_tsdf(const TsdfVolume& vol, const Camera& cam) {
  cam.validate();
  MeshRender out;
  out.rgb = Image(cam.width, cam.height, 3);
  out.depth = Image(cam.width, cam.height, 1);

  const Eigen::Vector3d o = cam.position();
  const Eigen::Vector3d lo = vol.origin;
  const Eigen::Vector3d hi = vol.origin + vol.voxel_size * vol.dims.cast<double>();

  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      const Eigen::Vector3d dir = cam.ray_dir_world(x + 0.5, y + 0.5);
      double t0, t1;
      if (!ray_box(o, dir, lo, hi, t0, t1)) continue;
      t0 = std::max(t0, 0.02);
      const double dt = 0.5 * vol.voxel_size / dir.norm();

      bool have_prev = false;
      double prev_s = 0.0, prev_t = 0.0;
      for (double t = t0; t <= t1; t += dt) {
        double s;
        if (!sample_sdf(vol, o + t * dir, s)) {
          have_prev = false;
          continue;
        }
        if (have_prev && prev_s > 0.0 && s <= 0.0) {
          const double tc = prev_t + (t - prev_t) * prev_s / (prev_s - s);
          const Eigen::Vector3d p = o + tc * dir;
          const Eigen::Vector3d c = sample_color(vol, p);
          for (int ch = 0; ch < 3; ++ch) out.rgb.at(y, x, ch) = std::clamp(c[ch], 0.0, 1.0);
          out.depth.at(y, x, 0) = tc;  // rays carry unit camera z
          break;
        }
        have_prev = true;
        prev_s = s;
        prev_t = t;
      }
    }
  return out;
}

void save_tsdf(const std::string& dir, const TsdfVolume& vol) {
  ensure_dir(dir);
  json m;
  m["schema_version"] = 1;
  m["dims"] = {vol.dims.x(), vol.dims.y(), vol.dims.z()};
  m["origin"] = {vol.origin.x(), vol.origin.y(), vol.origin.z()};
  m["voxel_size"] = vol.voxel_size;
  m["truncation"] = vol.truncation;
  m["weight_cap"] = vol.weight_cap;
  m["blobs"] = {{"sdf", "sdf.f32"}, {"weight", "weight.f32"}, {"color", "color.f32"}};
  write_text_file(dir + "/manifest.json", m.dump(2) + "\n");
  write_blob_f32(dir + "/sdf.f32", vol.sdf);
  write_blob_f32(dir + "/weight.f32", vol.weight);
  write_blob_f32(dir + "/color.f32", vol.color);
}

TsdfVolume load_tsdf(const std::string& dir) {
  const json m = json::parse(read_text_file(dir + "/manifest.json"));
  TsdfVolume vol;
  vol.dims = {m.at("dims")[0].get<int>(), m.at("dims")[1].get<int>(), m.at("dims")[2].get<int>()};
  vol.origin = {m.at("origin")[0].get<double>(), m.at("origin")[1].get<double>(),
                m.at("origin")[2].get<double>()};
  vol.voxel_size = m.at("voxel_size").get<double>();
  vol.truncation = m.at("truncation").get<double>();
  vol.weight_cap = m.at("weight_cap").get<double>();
  read_blob_f32(dir + "/sdf.f32", vol.sdf);
  read_blob_f32(dir + "/weight.f32", vol.weight);
  read_blob_f32(dir + "/color.f32", vol.color);

  const size_t n = static_cast<size_t>(vol.dims.x()) * vol.dims.y() * vol.dims.z();
  if (vol.sdf.size() != n || vol.weight.size() != n || vol.color.size() != n * 3)
    throw std::runtime_error("load_tsdf: blob sizes disagree with manifest dims");
  return vol;
}

}  // namespace splatfix

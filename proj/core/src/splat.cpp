#include "splatfix/splat.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "json.hpp"
#include "splatfix/metrics.hpp"
#include "splatfix/rng.hpp"
#include "splatfix/serial.hpp"

namespace splatfix {

using nlohmann::json;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double logit(double p) { return std::log(p / (1.0 - p)); }

namespace {

Eigen::Matrix3d quat_to_rot(const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Eigen::Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// Contraction of dL/dR with dR/dq for a unit quaternion.
Eigen::Vector4d rot_backward(const Eigen::Matrix3d& g, const Eigen::Vector4d& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Eigen::Vector4d d;
  d[0] = 2 * (-z * (g(0, 1) - g(1, 0)) + y * (g(0, 2) - g(2, 0)) - x * (g(1, 2) - g(2, 1)));
  d[1] = 2 * (y * (g(0, 1) + g(1, 0)) + z * (g(0, 2) + g(2, 0)) - w * (g(1, 2) - g(2, 1)) -
              2 * x * (g(1, 1) + g(2, 2)));
  d[2] = 2 * (x * (g(0, 1) + g(1, 0)) + w * (g(0, 2) - g(2, 0)) + z * (g(1, 2) + g(2, 1)) -
              2 * y * (g(0, 0) + g(2, 2)));
  d[3] = 2 * (-w * (g(0, 1) - g(1, 0)) + x * (g(0, 2) + g(2, 0)) + y * (g(1, 2) + g(2, 1)) -
              2 * z * (g(0, 0) + g(1, 1)));
  return d;
}

struct Decoded {
  Eigen::Vector3d p_c;
  Eigen::Matrix<double, 2, 3> J;
  Eigen::Matrix3d W;   // world-to-camera rotation
  Eigen::Matrix3d Rq;  // quaternion rotation
  Eigen::Matrix3d V;   // camera-frame 3D covariance
  Eigen::Vector3d s;
  Eigen::Vector4d qn;
  double qnorm = 1.0;
  Eigen::Matrix2d sigma2;
  double o = 0.0;
  Eigen::Vector3d col;
  Eigen::Vector2d mean2;
};

bool project_splat(const GaussianCloud& cloud, int i, const Camera& cam,
                   const RenderConfig& cfg, Decoded& d) {
  d.o = sigmoid(cloud.opacity_logits[i]);
  if (d.o <= cfg.alpha_cut) return false;

  const Eigen::Vector3d p(cloud.positions[3 * i], cloud.positions[3 * i + 1],
                          cloud.positions[3 * i + 2]);
  d.W = cam.rot_wc().transpose();
  d.p_c = d.W * (p - cam.position());
  if (!(d.p_c.z() > cfg.znear)) return false;

  Eigen::Vector4d q(cloud.rotations[4 * i], cloud.rotations[4 * i + 1],
                    cloud.rotations[4 * i + 2], cloud.rotations[4 * i + 3]);
  d.qnorm = q.norm();
  if (d.qnorm < 1e-12) return false;
  d.qn = q / d.qnorm;
  d.Rq = quat_to_rot(d.qn);
  for (int a = 0; a < 3; ++a) d.s[a] = std::exp(cloud.log_scales[3 * i + a]);

  const Eigen::Matrix3d M = d.Rq * d.s.asDiagonal();
  d.V = d.W * (M * M.transpose()) * d.W.transpose();

  const double px = d.p_c.x(), py = d.p_c.y(), pz = d.p_c.z();
  d.J.setZero();
  d.J(0, 0) = cam.fx / pz;
  d.J(0, 2) = -cam.fx * px / (pz * pz);
  d.J(1, 1) = cam.fy / pz;
  d.J(1, 2) = -cam.fy * py / (pz * pz);

  d.sigma2 = d.J * d.V * d.J.transpose();
  d.sigma2(0, 0) += cfg.dilation;
  d.sigma2(1, 1) += cfg.dilation;

  d.mean2 = Eigen::Vector2d(cam.fx * px / pz + cam.cx, cam.fy * py / pz + cam.cy);
  if (!d.sigma2.allFinite() || !d.mean2.allFinite()) return false;
  return true;
}

constexpr int kTile = 16;

struct TileGrid {
  int tx = 0, ty = 0;
  std::vector<std::vector<int32_t>> lists;
};

}  // namespace

void GaussianCloud::resize(int n) {
  positions.assign(3 * n, 0.0);
  rotations.assign(4 * n, 0.0);
  for (int i = 0; i < n; ++i) rotations[4 * i] = 1.0;
  log_scales.assign(3 * n, 0.0);
  opacity_logits.assign(n, 0.0);
  color_logits.assign(3 * n, 0.0);
}

void GaussianCloud::renormalize_rotations() {
  const int n = size();
  for (int i = 0; i < n; ++i) {
    Eigen::Map<Eigen::Vector4d> q(&rotations[4 * i]);
    const double nn = q.norm();
    if (nn < 1e-12) {
      q = Eigen::Vector4d(1, 0, 0, 0);
    } else {
      q /= nn;
    }
  }
}

void GaussianCloud::validate() const {
  const size_t n = opacity_logits.size();
  if (positions.size() != 3 * n || rotations.size() != 4 * n || log_scales.size() != 3 * n ||
      color_logits.size() != 3 * n)
    throw std::invalid_argument("GaussianCloud: inconsistent array sizes");
  auto finite = [](const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };
  if (!finite(positions) || !finite(rotations) || !finite(log_scales) ||
      !finite(opacity_logits) || !finite(color_logits))
    throw std::invalid_argument("GaussianCloud: non-finite parameter");
}

void CloudGrads::resize_for(const GaussianCloud& cloud) {
  const size_t n = cloud.opacity_logits.size();
  positions.assign(3 * n, 0.0);
  rotations.assign(4 * n, 0.0);
  log_scales.assign(3 * n, 0.0);
  opacity_logits.assign(n, 0.0);
  color_logits.assign(3 * n, 0.0);
  screen_grad_norm.assign(n, 0.0);
  visible.assign(n, 0);
}

void CloudGrads::zero() {
  std::fill(positions.begin(), positions.end(), 0.0);
  std::fill(rotations.begin(), rotations.end(), 0.0);
  std::fill(log_scales.begin(), log_scales.end(), 0.0);
  std::fill(opacity_logits.begin(), opacity_logits.end(), 0.0);
  std::fill(color_logits.begin(), color_logits.end(), 0.0);
  std::fill(screen_grad_norm.begin(), screen_grad_norm.end(), 0.0);
  std::fill(visible.begin(), visible.end(), 0);
}

namespace {

RenderOutput composite(const GaussianCloud& cloud, const Camera& cam, const RenderConfig& cfg,
                       RenderCache* cache) {
  cam.validate();
  cloud.validate();
  const int W = cam.width, H = cam.height;
  RenderOutput out;
  out.rgb = Image(W, H, 3);
  out.alpha = Image(W, H, 1);
  out.depth = Image(W, H, 1);

  // Project and cull.
  std::vector<RenderCache::Proj> vis;
  vis.reserve(cloud.size());
  Decoded d;
  for (int i = 0; i < cloud.size(); ++i) {
    if (!project_splat(cloud, i, cam, cfg, d)) continue;

    const double A = d.sigma2(0, 0), B = d.sigma2(0, 1), C = d.sigma2(1, 1);
    const double det = A * C - B * B;
    if (!(det > 0.0)) continue;

    const double mid = 0.5 * (A + C);
    const double disc = std::sqrt(std::max(0.0, mid * mid - det));
    const double lmax = mid + disc;
    // Radius where alpha falls to the cutoff; beyond it contributions are
    // dropped, so the screen footprint is continuous in the parameters.
    const double r = std::sqrt(std::max(0.0, 2.0 * std::log(d.o / cfg.alpha_cut)) * lmax);
    if (!(r > 0.0)) continue;

    RenderCache::Proj pr;
    pr.idx = i;
    pr.z = d.p_c.z();
    pr.mx = d.mean2.x();
    pr.my = d.mean2.y();
    const double inv_det = 1.0 / det;
    pr.ca = C * inv_det;
    pr.cb = -B * inv_det;
    pr.cc = A * inv_det;
    pr.o = d.o;
    for (int c = 0; c < 3; ++c)
      pr.col[c] = sigmoid(cloud.color_logits[3 * i + c]);
    pr.x0 = std::max(0, static_cast<int>(std::floor(pr.mx - r - 0.5)));
    pr.x1 = std::min(W - 1, static_cast<int>(std::ceil(pr.mx + r)));
    pr.y0 = std::max(0, static_cast<int>(std::floor(pr.my - r - 0.5)));
    pr.y1 = std::min(H - 1, static_cast<int>(std::ceil(pr.my + r)));
    if (pr.x0 > pr.x1 || pr.y0 > pr.y1) continue;
    vis.push_back(pr);
  }

  std::stable_sort(vis.begin(), vis.end(), [](const auto& a, const auto& b) {
    if (a.z != b.z) return a.z < b.z;
    return a.idx < b.idx;
  });

  TileGrid grid;
  grid.tx = (W + kTile - 1) / kTile;
  grid.ty = (H + kTile - 1) / kTile;
  grid.lists.assign(static_cast<size_t>(grid.tx) * grid.ty, {});
  for (int32_t si = 0; si < static_cast<int32_t>(vis.size()); ++si) {
    const auto& pr = vis[si];
    for (int tyy = pr.y0 / kTile; tyy <= pr.y1 / kTile; ++tyy)
      for (int txx = pr.x0 / kTile; txx <= pr.x1 / kTile; ++txx)
        grid.lists[static_cast<size_t>(tyy) * grid.tx + txx].push_back(si);
  }

  if (cache) {
    cache->splats = vis;
    cache->contrib_splat.clear();
    cache->contrib_alpha.clear();
    cache->pix_offset.assign(static_cast<size_t>(W) * H + 1, 0);
    cache->final_t.assign(static_cast<size_t>(W) * H, 1.0);
    cache->width = W;
    cache->height = H;
  }

  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const auto& list = grid.lists[static_cast<size_t>(y / kTile) * grid.tx + x / kTile];
      double T = 1.0;
      double rgb[3] = {0, 0, 0};
      double depth = 0.0;
      if (cache) cache->pix_offset[static_cast<size_t>(y) * W + x] =
          static_cast<uint32_t>(cache->contrib_splat.size());

      for (const int32_t si : list) {
        const auto& pr = vis[si];
        if (x < pr.x0 || x > pr.x1 || y < pr.y0 || y > pr.y1) continue;
        const double dx = x + 0.5 - pr.mx;
        const double dy = y + 0.5 - pr.my;
        const double qv =
            std::max(0.0, pr.ca * dx * dx + 2.0 * pr.cb * dx * dy + pr.cc * dy * dy);
        const double g = std::exp(-0.5 * qv);
        const double a = std::min(pr.o * g, cfg.alpha_clamp);
        if (a < cfg.alpha_cut) continue;

        rgb[0] += T * a * pr.col[0];
        rgb[1] += T * a * pr.col[1];
        rgb[2] += T * a * pr.col[2];
        depth += T * a * pr.z;
        if (cache) {
          cache->contrib_splat.push_back(si);
          cache->contrib_alpha.push_back(a);
        }
        T *= 1.0 - a;
        if (T < cfg.t_stop) break;
      }

      for (int c = 0; c < 3; ++c) out.rgb.at(y, x, c) = rgb[c] + T * cfg.background[c];
      out.alpha.at(y, x, 0) = 1.0 - T;
      out.depth.at(y, x, 0) = depth;
      if (cache) cache->final_t[static_cast<size_t>(y) * W + x] = T;
    }
  if (cache) cache->pix_offset[static_cast<size_t>(W) * H] =
      static_cast<uint32_t>(cache->contrib_splat.size());
  return out;
}

}  // namespace

RenderOutput render(const GaussianCloud& cloud, const Camera& cam, const RenderConfig& cfg) {
  return composite(cloud, cam, cfg, nullptr);
}

RenderOutput render_forward(const GaussianCloud& cloud, const Camera& cam,
                            const RenderConfig& cfg, RenderCache& cache) {
  return composite(cloud, cam, cfg, &cache);
}

void render_backward(const GaussianCloud& cloud, const Camera& cam, const RenderConfig& cfg,
                     const RenderCache& cache, const Image& dl_drgb, const Image* dl_dalpha,
                     const Image* dl_ddepth, CloudGrads& grads) {
  const int W = cache.width, H = cache.height;
  if (dl_drgb.width != W || dl_drgb.height != H || dl_drgb.channels != 3)
    throw std::invalid_argument("render_backward: dl_drgb shape mismatch");
  if (grads.opacity_logits.size() != static_cast<size_t>(cloud.size()))
    throw std::invalid_argument("render_backward: grads not sized for cloud");

  struct Acc {
    double mx = 0, my = 0, a = 0, b = 0, c = 0, o = 0, col[3] = {0, 0, 0}, z = 0;
    bool touched = false;
  };
  std::vector<Acc> acc(cache.splats.size());

  std::vector<double> tbuf;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const size_t pix = static_cast<size_t>(y) * W + x;
      const uint32_t lo = cache.pix_offset[pix];
      const uint32_t hi = cache.pix_offset[pix + 1];
      if (lo == hi) continue;

      const double gr[3] = {dl_drgb.at(y, x, 0), dl_drgb.at(y, x, 1), dl_drgb.at(y, x, 2)};
      const double ga = dl_dalpha ? dl_dalpha->at(y, x, 0) : 0.0;
      const double gd = dl_ddepth ? dl_ddepth->at(y, x, 0) : 0.0;

      tbuf.clear();
      double T = 1.0;
      for (uint32_t k = lo; k < hi; ++k) {
        tbuf.push_back(T);
        T *= 1.0 - cache.contrib_alpha[k];
      }

      // Suffix sums of the compositing outputs below each contribution.
      double s_rgb[3] = {cache.final_t[pix] * cfg.background[0],
                         cache.final_t[pix] * cfg.background[1],
                         cache.final_t[pix] * cfg.background[2]};
      double s_acc = 0.0, s_dep = 0.0;
      for (uint32_t k = hi; k-- > lo;) {
        const int32_t si = cache.contrib_splat[k];
        const auto& pr = cache.splats[si];
        const double a = cache.contrib_alpha[k];
        const double Ti = tbuf[k - lo];
        const double om = 1.0 - a;

        double da = ga * (Ti - s_acc / om) + gd * (pr.z * Ti - s_dep / om);
        for (int c = 0; c < 3; ++c) da += gr[c] * (pr.col[c] * Ti - s_rgb[c] / om);

        Acc& A = acc[si];
        A.touched = true;
        for (int c = 0; c < 3; ++c) A.col[c] += gr[c] * a * Ti;
        A.z += gd * a * Ti;

        s_acc += a * Ti;
        s_dep += pr.z * a * Ti;
        for (int c = 0; c < 3; ++c) s_rgb[c] += pr.col[c] * a * Ti;

        if (a >= cfg.alpha_clamp) continue;  // clamped: no gradient into o, g
        const double g = a / pr.o;
        A.o += da * g;
        const double dqv = -0.5 * g * (da * pr.o);
        const double dx = x + 0.5 - pr.mx;
        const double dy = y + 0.5 - pr.my;
        A.a += dqv * dx * dx;
        A.b += dqv * 2.0 * dx * dy;
        A.c += dqv * dy * dy;
        A.mx -= dqv * (2.0 * pr.ca * dx + 2.0 * pr.cb * dy);
        A.my -= dqv * (2.0 * pr.cb * dx + 2.0 * pr.cc * dy);
      }
    }

  // Chain per-splat screen-space gradients back to cloud parameters.
  Decoded d;
  for (size_t si = 0; si < cache.splats.size(); ++si) {
    const auto& pr = cache.splats[si];
    const Acc& A = acc[si];
    grads.visible[pr.idx] = 1;
    if (!A.touched) continue;
    grads.screen_grad_norm[pr.idx] += std::hypot(A.mx, A.my);

    if (!project_splat(cloud, pr.idx, cam, cfg, d)) continue;

    const Eigen::Matrix2d K = (Eigen::Matrix2d() << pr.ca, pr.cb, pr.cb, pr.cc).finished();
    const Eigen::Matrix2d G = (Eigen::Matrix2d() << A.a, A.b / 2.0, A.b / 2.0, A.c).finished();
    const Eigen::Matrix2d d_sigma2 = -K * G * K;

    const Eigen::Matrix<double, 2, 3> dJ = 2.0 * d_sigma2 * d.J * d.V;
    const Eigen::Matrix3d dV = d.J.transpose() * d_sigma2 * d.J;
    const Eigen::Matrix3d d_sigma3 = d.W.transpose() * dV * d.W;

    const Eigen::Matrix3d M = d.Rq * d.s.asDiagonal();
    const Eigen::Matrix3d dM = 2.0 * d_sigma3 * M;

    Eigen::Vector3d dls;
    for (int a = 0; a < 3; ++a) dls[a] = d.Rq.col(a).dot(dM.col(a)) * d.s[a];
    const Eigen::Matrix3d dRq = dM * d.s.asDiagonal();

    const Eigen::Vector4d dqn = rot_backward(dRq, d.qn);
    const Eigen::Vector4d dq = (dqn - d.qn * d.qn.dot(dqn)) / d.qnorm;

    const double px = d.p_c.x(), py = d.p_c.y(), pz = d.p_c.z();
    Eigen::Vector3d dp_c = d.J.transpose() * Eigen::Vector2d(A.mx, A.my);
    dp_c.z() += A.z;
    dp_c.x() += dJ(0, 2) * (-cam.fx / (pz * pz));
    dp_c.y() += dJ(1, 2) * (-cam.fy / (pz * pz));
    dp_c.z() += dJ(0, 0) * (-cam.fx / (pz * pz)) + dJ(1, 1) * (-cam.fy / (pz * pz)) +
                dJ(0, 2) * (2.0 * cam.fx * px / (pz * pz * pz)) +
                dJ(1, 2) * (2.0 * cam.fy * py / (pz * pz * pz));
    const Eigen::Vector3d dp_w = d.W.transpose() * dp_c;

    const int i = pr.idx;
    for (int a = 0; a < 3; ++a) grads.positions[3 * i + a] += dp_w[a];
    for (int a = 0; a < 4; ++a) grads.rotations[4 * i + a] += dq[a];
    for (int a = 0; a < 3; ++a) grads.log_scales[3 * i + a] += dls[a];
    grads.opacity_logits[i] += A.o * d.o * (1.0 - d.o);
    for (int c = 0; c < 3; ++c) {
      const double cc = pr.col[c];
      grads.color_logits[3 * i + c] += A.col[c] * cc * (1.0 - cc);
    }
  }
}

double photometric_loss(const Image& rendered, const Image& target,
                        const PhotometricLossConfig& cfg, Image* grad_rendered) {
  if (!rendered.same_shape(target))
    throw std::invalid_argument("photometric_loss: shape mismatch");

  const double n = static_cast<double>(rendered.data.size());
  double l1 = 0.0;
  for (size_t i = 0; i < rendered.data.size(); ++i) l1 += std::abs(rendered.data[i] - target.data[i]);
  l1 /= n;

  double ssim_val;
  Image ssim_grad;
  if (grad_rendered) {
    ssim_val = ssim_with_grad(rendered, target, ssim_grad, cfg.ssim_window, cfg.ssim_sigma);
  } else {
    ssim_val = ssim(rendered, target, cfg.ssim_window, cfg.ssim_sigma);
  }

  const double loss = (1.0 - cfg.lambda) * l1 + cfg.lambda * (1.0 - ssim_val);
  if (grad_rendered) {
    *grad_rendered = Image(rendered.width, rendered.height, rendered.channels);
    for (size_t i = 0; i < rendered.data.size(); ++i) {
      const double diff = rendered.data[i] - target.data[i];
      const double sgn = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
      grad_rendered->data[i] = (1.0 - cfg.lambda) * sgn / n - cfg.lambda * ssim_grad.data[i];
    }
  }
  return loss;
}

GaussianCloud init_from_rgbd(const std::vector<CaptureFrame>& frames, int pixel_stride,
                             const InitConfig& cfg) {
  if (frames.empty()) throw std::invalid_argument("init_from_rgbd: no frames");
  if (pixel_stride < 1) throw std::invalid_argument("init_from_rgbd: stride must be >= 1");

  GaussianCloud cloud;
  const double op_logit = logit(std::clamp(cfg.opacity, 1e-4, 1.0 - 1e-4));
  const double spacing = std::sqrt(static_cast<double>(pixel_stride));

  for (const auto& f : frames) {
    const int np = f.cam.width * f.cam.height;
    for (int flat = 0; flat < np; flat += pixel_stride) {
      const int y = flat / f.cam.width;
      const int x = flat % f.cam.width;
      const double depth = f.depth.at(y, x, 0);
      if (depth <= 0.0) continue;

      const Eigen::Vector3d p =
          f.cam.position() + depth * f.cam.ray_dir_world(x + 0.5, y + 0.5);
      for (int a = 0; a < 3; ++a) cloud.positions.push_back(p[a]);
      cloud.rotations.insert(cloud.rotations.end(), {1.0, 0.0, 0.0, 0.0});

      const double footprint = cfg.scale_mult * spacing * depth / f.cam.fx;
      const double ls = std::log(std::max(footprint, 1e-6));
      cloud.log_scales.insert(cloud.log_scales.end(), {ls, ls, ls});

      cloud.opacity_logits.push_back(op_logit);
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(f.rgb.at(y, x, c), 0.02, 0.98);
        cloud.color_logits.push_back(logit(v));
      }
    }
  }
  if (cloud.size() == 0) throw std::invalid_argument("init_from_rgbd: all depth invalid");
  return cloud;
}

SplatTrainer::SplatTrainer(GaussianCloud cloud, double scene_extent)
    : cloud_(std::move(cloud)), extent_(scene_extent) {
  cloud_.validate();
  if (!(extent_ > 0.0)) throw std::invalid_argument("SplatTrainer: bad scene extent");
  ensure_state_sizes();
}

void SplatTrainer::ensure_state_sizes() {
  const size_t n = cloud_.opacity_logits.size();
  auto fix = [](Moments& mo, size_t len) {
    mo.m.resize(len, 0.0);
    mo.v.resize(len, 0.0);
  };
  fix(pos_, 3 * n);
  fix(rot_, 4 * n);
  fix(scale_, 3 * n);
  fix(opa_, n);
  fix(col_, 3 * n);
  grad_sum_.resize(n, 0.0);
  grad_cnt_.resize(n, 0);
}

void SplatTrainer::optimize_step(const CloudGrads& grads, const LrTable& lr) {
  if (grads.opacity_logits.size() != cloud_.opacity_logits.size())
    throw std::invalid_argument("optimize_step: grads sized for a different cloud");

  auto all_finite = [](const std::vector<double>& v) {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  };
  if (!all_finite(grads.positions) || !all_finite(grads.rotations) ||
      !all_finite(grads.log_scales) || !all_finite(grads.opacity_logits) ||
      !all_finite(grads.color_logits))
    throw std::runtime_error("optimize_step: non-finite gradient, step rejected");

  ++step_;
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));

  auto apply = [&](std::vector<double>& p, Moments& mo, const std::vector<double>& g,
                   double rate) {
    for (size_t k = 0; k < p.size(); ++k) {
      mo.m[k] = b1 * mo.m[k] + (1.0 - b1) * g[k];
      mo.v[k] = b2 * mo.v[k] + (1.0 - b2) * g[k] * g[k];
      p[k] -= rate * (mo.m[k] / bc1) / (std::sqrt(mo.v[k] / bc2) + eps);
    }
  };
  apply(cloud_.positions, pos_, grads.positions, lr.position * extent_);
  apply(cloud_.rotations, rot_, grads.rotations, lr.rotation);
  apply(cloud_.log_scales, scale_, grads.log_scales, lr.scale);
  apply(cloud_.opacity_logits, opa_, grads.opacity_logits, lr.opacity);
  apply(cloud_.color_logits, col_, grads.color_logits, lr.color);
  cloud_.renormalize_rotations();

  for (int i = 0; i < cloud_.size(); ++i)
    if (grads.visible[i]) {
      grad_sum_[i] += grads.screen_grad_norm[i];
      grad_cnt_[i] += 1;
    }
}

void SplatTrainer::zero_stats() {
  std::fill(grad_sum_.begin(), grad_sum_.end(), 0.0);
  std::fill(grad_cnt_.begin(), grad_cnt_.end(), 0);
}

DensityResult SplatTrainer::density_control(const DensityConfig& cfg) {
  const int n = cloud_.size();
  DensityResult res;

  enum class Op : uint8_t { keep, prune, clone, split };
  std::vector<Op> ops(n, Op::keep);
  int projected = 0;
  for (int i = 0; i < n; ++i) {
    const double o = sigmoid(cloud_.opacity_logits[i]);
    double smax = 0.0;
    for (int a = 0; a < 3; ++a) smax = std::max(smax, std::exp(cloud_.log_scales[3 * i + a]));

    if (o < cfg.opacity_prune || smax > cfg.max_scale_frac * extent_) {
      ops[i] = Op::prune;
      ++res.pruned;
      continue;
    }
    ++projected;
    if (grad_cnt_[i] == 0) continue;
    const double avg = grad_sum_[i] / grad_cnt_[i];
    if (avg < cfg.grad_threshold) continue;
    if (n + projected >= cfg.max_splats) continue;  // budget guard, pruning still applies

    if (smax > cfg.split_scale_frac * extent_) {
      ops[i] = Op::split;
      ++res.split;
      ++projected;  // two children replace one parent
    } else {
      ops[i] = Op::clone;
      ++res.cloned;
      ++projected;
    }
  }

  GaussianCloud next;
  Moments npos, nrot, nscale, nopa, ncol;
  auto reserve_all = [&](int count) {
    next.positions.reserve(3 * count);
    next.rotations.reserve(4 * count);
    next.log_scales.reserve(3 * count);
    next.opacity_logits.reserve(count);
    next.color_logits.reserve(3 * count);
  };
  reserve_all(projected + 4);

  auto copy_entry = [&](int i, bool with_moments) {
    for (int a = 0; a < 3; ++a) next.positions.push_back(cloud_.positions[3 * i + a]);
    for (int a = 0; a < 4; ++a) next.rotations.push_back(cloud_.rotations[4 * i + a]);
    for (int a = 0; a < 3; ++a) next.log_scales.push_back(cloud_.log_scales[3 * i + a]);
    next.opacity_logits.push_back(cloud_.opacity_logits[i]);
    for (int a = 0; a < 3; ++a) next.color_logits.push_back(cloud_.color_logits[3 * i + a]);

    auto push_mo = [&](Moments& dst, const Moments& src, int base, int len) {
      for (int a = 0; a < len; ++a) {
        dst.m.push_back(with_moments ? src.m[base + a] : 0.0);
        dst.v.push_back(with_moments ? src.v[base + a] : 0.0);
      }
    };
    push_mo(npos, pos_, 3 * i, 3);
    push_mo(nrot, rot_, 4 * i, 4);
    push_mo(nscale, scale_, 3 * i, 3);
    push_mo(nopa, opa_, i, 1);
    push_mo(ncol, col_, 3 * i, 3);
  };

  auto push_child = [&](int i, const Eigen::Vector3d& pos, double shrink) {
    for (int a = 0; a < 3; ++a) next.positions.push_back(pos[a]);
    for (int a = 0; a < 4; ++a) next.rotations.push_back(cloud_.rotations[4 * i + a]);
    for (int a = 0; a < 3; ++a)
      next.log_scales.push_back(cloud_.log_scales[3 * i + a] - std::log(shrink));
    next.opacity_logits.push_back(cloud_.opacity_logits[i]);
    for (int a = 0; a < 3; ++a) next.color_logits.push_back(cloud_.color_logits[3 * i + a]);

    auto push_zero = [](Moments& dst, int len) {
      for (int a = 0; a < len; ++a) {
        dst.m.push_back(0.0);
        dst.v.push_back(0.0);
      }
    };
    push_zero(npos, 3);
    push_zero(nrot, 4);
    push_zero(nscale, 3);
    push_zero(nopa, 1);
    push_zero(ncol, 3);
  };

  for (int i = 0; i < n; ++i) {
    switch (ops[i]) {
      case Op::prune:
        break;
      case Op::keep:
        copy_entry(i, true);
        break;
      case Op::clone:
        copy_entry(i, true);
        push_child(i, Eigen::Vector3d(cloud_.positions[3 * i], cloud_.positions[3 * i + 1],
                                      cloud_.positions[3 * i + 2]),
                   1.0);
        break;
      case Op::split: {
        Eigen::Vector4d q(cloud_.rotations[4 * i], cloud_.rotations[4 * i + 1],
                          cloud_.rotations[4 * i + 2], cloud_.rotations[4 * i + 3]);
        const double qs = q.norm();
        const Eigen::Matrix3d R = quat_to_rot(qs > 1e-12 ? Eigen::Vector4d(q / qs)
                                                         : Eigen::Vector4d(1, 0, 0, 0));
        int major = 0;
        double smax = -1.0;
        for (int a = 0; a < 3; ++a) {
          const double s = std::exp(cloud_.log_scales[3 * i + a]);
          if (s > smax) {
            smax = s;
            major = a;
          }
        }
        const Eigen::Vector3d center(cloud_.positions[3 * i], cloud_.positions[3 * i + 1],
                                     cloud_.positions[3 * i + 2]);
        const Eigen::Vector3d off = 0.5 * smax * R.col(major);
        push_child(i, center + off, cfg.split_shrink);
        push_child(i, center - off, cfg.split_shrink);
        break;
      }
    }
  }

  cloud_ = std::move(next);
  pos_ = std::move(npos);
  rot_ = std::move(nrot);
  scale_ = std::move(nscale);
  opa_ = std::move(nopa);
  col_ = std::move(ncol);
  grad_sum_.assign(cloud_.opacity_logits.size(), 0.0);
  grad_cnt_.assign(cloud_.opacity_logits.size(), 0);
  return res;
}

GaussianCloud fit_cloud(GaussianCloud init, const std::vector<CaptureFrame>& frames,
                        const FitConfig& cfg, FitReport* report) {
  if (frames.empty()) throw std::invalid_argument("fit_cloud: no frames");
  init.validate();
  if (init.size() == 0) throw std::invalid_argument("fit_cloud: empty initial cloud");
  const double extent = cloud_extent(init);

  SplatTrainer trainer(std::move(init), extent);
  Rng rng = Rng::stream(cfg.seed, "fit");
  CloudGrads grads;
  RenderCache cache;
  FitReport local;
  FitReport& rep = report ? *report : local;
  rep = FitReport{};

  const int densify_stop = static_cast<int>(cfg.densify_stop_frac * cfg.iterations);
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const auto& frame = frames[rng.uniform_int(static_cast<int>(frames.size()))];
    const RenderOutput out = render_forward(trainer.cloud(), frame.cam, cfg.render, cache);

    Image dl;
    const double loss = photometric_loss(out.rgb, frame.rgb, cfg.loss, &dl);
    rep.loss_history.push_back(loss);

    grads.resize_for(trainer.cloud());
    render_backward(trainer.cloud(), frame.cam, cfg.render, cache, dl, nullptr, nullptr, grads);
    try {
      trainer.optimize_step(grads, cfg.lr);
    } catch (const std::runtime_error&) {
      ++rep.rejected_steps;
    }

    if (cfg.density.interval > 0 && (iter + 1) % cfg.density.interval == 0 &&
        iter + 1 <= densify_stop) {
      const DensityResult r = trainer.density_control(cfg.density);
      rep.density_totals.cloned += r.cloned;
      rep.density_totals.split += r.split;
      rep.density_totals.pruned += r.pruned;
    }
  }

  rep.iterations = cfg.iterations;
  rep.final_count = trainer.cloud().size();
  double psnr_sum = 0.0;
  for (const auto& f : frames) {
    const RenderOutput out = render(trainer.cloud(), f.cam, cfg.render);
    psnr_sum += psnr(out.rgb, f.rgb);
  }
  rep.mean_train_psnr = psnr_sum / static_cast<double>(frames.size());
  return std::move(trainer.cloud());
}

double cloud_extent(const GaussianCloud& cloud) {
  if (cloud.size() == 0) return 1e-3;
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(std::numeric_limits<double>::max());
  Eigen::Vector3d hi = Eigen::Vector3d::Constant(std::numeric_limits<double>::lowest());
  for (int i = 0; i < cloud.size(); ++i)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], cloud.positions[3 * i + a]);
      hi[a] = std::max(hi[a], cloud.positions[3 * i + a]);
    }
  return std::max((hi - lo).norm(), 1e-3);
}

void save_gaussians(const std::string& dir, const GaussianCloud& cloud) {
  cloud.validate();
  ensure_dir(dir);
  json m;
  m["schema_version"] = 1;
  m["format"] = "gaussian_cloud";
  m["count"] = cloud.size();
  m["blobs"] = {{"positions", "positions.f32"},
                {"rotations", "rotations.f32"},
                {"log_scales", "log_scales.f32"},
                {"opacity_logits", "opacity_logits.f32"},
                {"color_logits", "color_logits.f32"}};
  write_text_file(dir + "/manifest.json", m.dump(2) + "\n");
  write_blob_f32(dir + "/positions.f32", cloud.positions);
  write_blob_f32(dir + "/rotations.f32", cloud.rotations);
  write_blob_f32(dir + "/log_scales.f32", cloud.log_scales);
  write_blob_f32(dir + "/opacity_logits.f32", cloud.opacity_logits);
  write_blob_f32(dir + "/color_logits.f32", cloud.color_logits);
}

GaussianCloud load_gaussians(const std::string& dir) {
  const json m = json::parse(read_text_file(dir + "/manifest.json"));
  if (m.at("format").get<std::string>() != "gaussian_cloud")
    throw std::runtime_error("load_gaussians: not a gaussian cloud checkpoint: " + dir);
  GaussianCloud cloud;
  read_blob_f32(dir + "/positions.f32", cloud.positions);
  read_blob_f32(dir + "/rotations.f32", cloud.rotations);
  read_blob_f32(dir + "/log_scales.f32", cloud.log_scales);
  read_blob_f32(dir + "/opacity_logits.f32", cloud.opacity_logits);
  read_blob_f32(dir + "/color_logits.f32", cloud.color_logits);
  const int count = m.at("count").get<int>();
  if (cloud.size() != count)
    throw std::runtime_error("load_gaussians: count disagrees with blobs in " + dir);
  cloud.validate();
  return cloud;
}

}  // namespace splatfix

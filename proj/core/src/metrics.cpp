#include "splatfix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"
#include "splatfix/serial.hpp"

namespace splatfix {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* who) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(who) + ": shape mismatch");
  if (a.empty()) throw std::invalid_argument(std::string(who) + ": empty image");
}

constexpr double kPsnrCap = 99.0;

std::vector<double> gaussian_kernel(int window, double sigma) {
  std::vector<double> k(window);
  const double c = (window - 1) / 2.0;
  double sum = 0.0;
  for (int i = 0; i < window; ++i) {
    k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
    sum += k[i];
  }
  for (auto& v : k) v /= sum;
  return k;
}

}  // namespace

double mse(const Image& a, const Image& b) {
  require_same_shape(a, b, "mse");
  double acc = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m <= 0.0) return kPsnrCap;
  return std::min(10.0 * std::log10(1.0 / m), kPsnrCap);
}

double psnr_masked(const Image& a, const Image& b, const Image& mask) {
  require_same_shape(a, b, "psnr_masked");
  if (mask.channels != 1 || mask.width != a.width || mask.height != a.height)
    throw std::invalid_argument("psnr_masked: mask must be 1-channel, same size");

  double acc = 0.0;
  size_t n = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (mask.at(y, x, 0) <= 0.5) continue;
      for (int c = 0; c < a.channels; ++c) {
        const double d = a.at(y, x, c) - b.at(y, x, c);
        acc += d * d;
        ++n;
      }
    }
  if (n == 0) throw std::invalid_argument("psnr_masked: empty mask");
  const double m = acc / static_cast<double>(n);
  if (m <= 0.0) return kPsnrCap;
  return std::min(10.0 * std::log10(1.0 / m), kPsnrCap);
}

namespace {

// Raw windowed moments per channel, valid mode, windows anchored at their
// top-left corner: m(p) = sum_o w(o) f(p + o).
struct MomentMaps {
  int mh = 0, mw = 0;  // moment grid size
  std::vector<double> mx, my, mxx, myy, mxy;
};

MomentMaps window_moments(const Image& a, const Image& b, int ch, const std::vector<double>& k) {
  const int K = static_cast<int>(k.size());
  MomentMaps m;
  m.mh = a.height - K + 1;
  m.mw = a.width - K + 1;
  const size_t n = static_cast<size_t>(m.mh) * m.mw;
  m.mx.assign(n, 0.0);
  m.my.assign(n, 0.0);
  m.mxx.assign(n, 0.0);
  m.myy.assign(n, 0.0);
  m.mxy.assign(n, 0.0);

  // Horizontal pass over rows, then vertical pass over the partial sums.
  const int pw = m.mw;
  std::vector<double> hx(static_cast<size_t>(a.height) * pw), hy(hx.size()), hxx(hx.size()),
      hyy(hx.size()), hxy(hx.size());
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < pw; ++x) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < K; ++i) {
        const double va = a.at(y, x + i, ch);
        const double vb = b.at(y, x + i, ch);
        sx += k[i] * va;
        sy += k[i] * vb;
        sxx += k[i] * va * va;
        syy += k[i] * vb * vb;
        sxy += k[i] * va * vb;
      }
      const size_t at = static_cast<size_t>(y) * pw + x;
      hx[at] = sx;
      hy[at] = sy;
      hxx[at] = sxx;
      hyy[at] = syy;
      hxy[at] = sxy;
    }
  for (int y = 0; y < m.mh; ++y)
    for (int x = 0; x < pw; ++x) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < K; ++i) {
        const size_t at = static_cast<size_t>(y + i) * pw + x;
        sx += k[i] * hx[at];
        sy += k[i] * hy[at];
        sxx += k[i] * hxx[at];
        syy += k[i] * hyy[at];
        sxy += k[i] * hxy[at];
      }
      const size_t at = static_cast<size_t>(y) * pw + x;
      m.mx[at] = sx;
      m.my[at] = sy;
      m.mxx[at] = sxx;
      m.myy[at] = syy;
      m.mxy[at] = sxy;
    }
  return m;
}

double ssim_impl(const Image& a, const Image& b, Image* grad_a, int window, double sigma) {
  require_same_shape(a, b, "ssim");
  if (a.height < window || a.width < window)
    throw std::invalid_argument("ssim: image smaller than window");
  if (sigma <= 0.0 || window < 2) throw std::invalid_argument("ssim: bad window parameters");

  const double C1 = 0.01 * 0.01;
  const double C2 = 0.03 * 0.03;
  const auto k = gaussian_kernel(window, sigma);
  const int K = window;

  if (grad_a) {
    *grad_a = Image(a.width, a.height, a.channels);
  }

  double total = 0.0;
  size_t count = 0;
  for (int ch = 0; ch < a.channels; ++ch) {
    const MomentMaps m = window_moments(a, b, ch, k);
    const size_t n = m.mx.size();
    count += n;

    // Per-position gradient w.r.t. the raw moments of a.
    std::vector<double> g_mx, g_mxx, g_mxy;
    if (grad_a) {
      g_mx.assign(n, 0.0);
      g_mxx.assign(n, 0.0);
      g_mxy.assign(n, 0.0);
    }

    for (size_t i = 0; i < n; ++i) {
      const double mx = m.mx[i], my = m.my[i];
      const double vx = m.mxx[i] - mx * mx;
      const double vy = m.myy[i] - my * my;
      const double cxy = m.mxy[i] - mx * my;
      const double N1 = 2.0 * mx * my + C1;
      const double D1 = mx * mx + my * my + C1;
      const double N2 = 2.0 * cxy + C2;
      const double D2 = vx + vy + C2;
      const double s = (N1 * N2) / (D1 * D2);
      total += s;

      if (grad_a) {
        const double inv = 1.0 / (D1 * D2);
        // d s / d mx with mxx, mxy held fixed.
        const double dN1 = 2.0 * my;
        const double dN2 = -2.0 * my;
        const double dD1 = 2.0 * mx;
        const double dD2 = -2.0 * mx;
        g_mx[i] = (dN1 * N2 + N1 * dN2) * inv - s * (dD1 / D1 + dD2 / D2);
        g_mxx[i] = -s / D2;
        g_mxy[i] = 2.0 * N1 * inv;
      }
    }

    if (grad_a) {
      const int mh = a.height - K + 1;
      const int mw = a.width - K + 1;
      for (int py = 0; py < mh; ++py)
        for (int px = 0; px < mw; ++px) {
          const size_t at = static_cast<size_t>(py) * mw + px;
          const double gx = g_mx[at];
          const double gxx = g_mxx[at];
          const double gxy = g_mxy[at];
          for (int oy = 0; oy < K; ++oy)
            for (int ox = 0; ox < K; ++ox) {
              const double w = k[oy] * k[ox];
              const int qy = py + oy, qx = px + ox;
              const double va = a.at(qy, qx, ch);
              const double vb = b.at(qy, qx, ch);
              grad_a->at(qy, qx, ch) += w * (gx + 2.0 * va * gxx + vb * gxy);
            }
        }
    }
  }

  if (grad_a) {
    const double scale = 1.0 / static_cast<double>(count);
    for (auto& v : grad_a->data) v *= scale;
  }
  return total / static_cast<double>(count);
}

}  // namespace

double ssim(const Image& a, const Image& b, int window, double sigma) {
  return ssim_impl(a, b, nullptr, window, sigma);
}

double ssim_with_grad(const Image& a, const Image& b, Image& grad_a, int window, double sigma) {
  return ssim_impl(a, b, &grad_a, window, sigma);
}

void write_metrics_json(const std::string& path, const std::vector<MetricsRecord>& records) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : records)
    j.push_back({{"view_id", r.view_id}, {"stage", r.stage}, {"psnr", r.psnr}, {"ssim", r.ssim}});
  write_text_file(path, j.dump(2) + "\n");
}

std::vector<MetricsRecord> read_metrics_json(const std::string& path) {
  const auto j = nlohmann::json::parse(read_text_file(path));
  std::vector<MetricsRecord> out;
  for (const auto& e : j)
    out.push_back({e.at("view_id").get<std::string>(), e.at("stage").get<std::string>(),
                   e.at("psnr").get<double>(), e.at("ssim").get<double>()});
  return out;
}

}  // namespace splatfix

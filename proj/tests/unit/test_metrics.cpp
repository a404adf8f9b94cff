#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "splatfix/metrics.hpp"
#include "splatfix/rng.hpp"

using namespace splatfix;

namespace {

Image random_image(int w, int h, int c, uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Image img(w, h, c);
  Rng r(seed);
  for (auto& v : img.data) v = r.uniform(lo, hi);
  return img;
}

// Straight-from-the-definition SSIM: explicit per-window sums, no separable
// passes, no shared code with the library implementation.
double ssim_reference(const Image& a, const Image& b, int K, double sigma) {
  std::vector<double> k1(K);
  double ks = 0;
  for (int i = 0; i < K; ++i) {
    const double d = i - (K - 1) / 2.0;
    k1[i] = std::exp(-0.5 * d * d / (sigma * sigma));
    ks += k1[i];
  }
  for (auto& v : k1) v /= ks;

  const double C1 = 1e-4, C2 = 9e-4;
  double total = 0;
  int count = 0;
  for (int ch = 0; ch < a.channels; ++ch)
    for (int py = 0; py + K <= a.height; ++py)
      for (int px = 0; px + K <= a.width; ++px) {
        double mx = 0, my = 0;
        for (int i = 0; i < K; ++i)
          for (int j = 0; j < K; ++j) {
            const double w = k1[i] * k1[j];
            mx += w * a.at(py + i, px + j, ch);
            my += w * b.at(py + i, px + j, ch);
          }
        double vx = 0, vy = 0, cxy = 0;
        for (int i = 0; i < K; ++i)
          for (int j = 0; j < K; ++j) {
            const double w = k1[i] * k1[j];
            const double da = a.at(py + i, px + j, ch) - mx;
            const double db = b.at(py + i, px + j, ch) - my;
            vx += w * da * da;
            vy += w * db * db;
            cxy += w * da * db;
          }
        total += ((2 * mx * my + C1) * (2 * cxy + C2)) /
                 ((mx * mx + my * my + C1) * (vx + vy + C2));
        ++count;
      }
  return total / count;
}

}  // namespace

TEST_CASE("psnr basics") {
  const Image a = random_image(32, 24, 3, 11);
  CHECK(psnr(a, a) == doctest::Approx(99.0));

  Image b = a;
  for (auto& v : b.data) v += 0.1;
  CHECK(mse(a, b) == doctest::Approx(0.01));
  CHECK(psnr(a, b) == doctest::Approx(20.0));

  Image wrong(16, 16, 3);
  CHECK_THROWS_AS(psnr(a, wrong), std::invalid_argument);
}

TEST_CASE("masked psnr restricts to the mask") {
  const Image a = random_image(20, 20, 3, 3);
  Image b = a;
  Image mask(20, 20, 1);
  // Perturb the left half, mask selects only the right half.
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 10; ++x)
      for (int c = 0; c < 3; ++c) b.at(y, x, c) = 1.0 - b.at(y, x, c);
  for (int y = 0; y < 20; ++y)
    for (int x = 10; x < 20; ++x) mask.at(y, x, 0) = 1.0;

  CHECK(psnr_masked(a, b, mask) == doctest::Approx(99.0));
  CHECK(psnr(a, b) < 30.0);

  Image empty_mask(20, 20, 1);
  CHECK_THROWS_AS(psnr_masked(a, b, empty_mask), std::invalid_argument);
}

TEST_CASE("ssim matches a from-the-definition reference") {
  const Image a = random_image(24, 18, 3, 21);
  Image b = a;
  Rng noise(22);
  for (auto& v : b.data) v = std::clamp(v + 0.08 * noise.normal(), 0.0, 1.0);

  const double lib = ssim(a, b);
  const double ref = ssim_reference(a, b, 11, 1.5);
  CHECK(lib == doctest::Approx(ref).epsilon(1e-10));

  CHECK(ssim(a, a) == doctest::Approx(1.0));
  CHECK(lib < 1.0);
  CHECK(lib > -1.0);

  Image tiny(8, 8, 3);
  CHECK_THROWS_AS(ssim(tiny, tiny), std::invalid_argument);
}

TEST_CASE("ssim gradient matches central differences") {
  Image a = random_image(16, 16, 2, 31);
  const Image b = random_image(16, 16, 2, 32);

  Image grad;
  ssim_with_grad(a, b, grad);

  Rng pick(33);
  const double h = 1e-5;
  for (int trial = 0; trial < 24; ++trial) {
    const int y = pick.uniform_int(16), x = pick.uniform_int(16), c = pick.uniform_int(2);
    const double orig = a.at(y, x, c);
    a.at(y, x, c) = orig + h;
    const double up = ssim(a, b);
    a.at(y, x, c) = orig - h;
    const double dn = ssim(a, b);
    a.at(y, x, c) = orig;
    const double fd = (up - dn) / (2 * h);
    const double an = grad.at(y, x, c);
    CHECK(std::abs(fd - an) < 1e-3 * std::max(1.0, std::abs(fd)));
  }
}

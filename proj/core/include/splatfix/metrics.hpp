#pragma once

#include <string>
#include <vector>

#include "splatfix/image.hpp"

namespace splatfix {

double mse(const Image& a, const Image& b);

// 10*log10(1/mse) for unit-range images, capped at 99 dB (exact for
// identical inputs). Throws std::invalid_argument on shape mismatch.
double psnr(const Image& a, const Image& b);

// PSNR restricted to pixels where mask > 0.5 (mask is 1-channel, same
// spatial size). Throws if the mask selects no pixels.
double psnr_masked(const Image& a, const Image& b, const Image& mask);

// Mean SSIM over valid window positions and channels; Gaussian window.
// Throws if either spatial dimension is smaller than the window.
double ssim(const Image& a, const Image& b, int window = 11, double sigma = 1.5);

// Same value; additionally writes d(ssim)/da into grad_a (same shape as a).
double ssim_with_grad(const Image& a, const Image& b, Image& grad_a, int window = 11,
                      double sigma = 1.5);

struct MetricsRecord {
  std::string view_id;
  std::string stage;
  double psnr = 0.0;
  double ssim = 0.0;
};

void write_metrics_json(const std::string& path, const std::vector<MetricsRecord>& records);
std::vector<MetricsRecord> read_metrics_json(const std::string& path);

}  // namespace splatfix

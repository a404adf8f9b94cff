#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "splatfix/nn.hpp"
#include "splatfix/rng.hpp"
#include "splatfix/unet.hpp"

namespace splatfix {

// Linear-beta DDPM schedule. alpha_bars has T+1 entries with alpha_bars[0] = 1
// so that a final DDIM step to t_prev = 0 lands exactly on the clean latent.
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0, beta_end = 0.0;
  std::vector<double> betas;       // beta(t) = betas[t-1], t in [1, T]
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // cumulative products, index 0..T

  double alpha_bar(int t) const { return alpha_bars[t]; }
};

NoiseSchedule make_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

// Timestep ladder for n_steps DDIM: round(T*k/n) for k = n..1; consumed as
// (t, t_prev) pairs with a final t_prev of 0.
std::vector<int> ddim_ladder(int T, int n_steps);

template <typename T>
nn::Tensor<T> q_sample(const nn::Tensor<T>& z0, int t, const nn::Tensor<T>& eps,
                       const NoiseSchedule& s) {
  if (t < 1 || t > s.T) throw std::invalid_argument("q_sample: t out of range");
  if (!z0.same_shape(eps)) throw std::invalid_argument("q_sample: shape mismatch");
  const T a = static_cast<T>(std::sqrt(s.alpha_bar(t)));
  const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(t)));
  nn::Tensor<T> zt(z0.c, z0.h, z0.w);
  for (size_t i = 0; i < z0.size(); ++i) zt.v[i] = a * z0.v[i] + b * eps.v[i];
  return zt;
}

template <typename T>
nn::Tensor<T> estimate_z0(const nn::Tensor<T>& zt, const nn::Tensor<T>& eps_pred, int t,
                          const NoiseSchedule& s) {
  if (t < 1 || t > s.T) throw std::invalid_argument("estimate_z0: t out of range");
  const T a = static_cast<T>(std::sqrt(s.alpha_bar(t)));
  const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(t)));
  nn::Tensor<T> z0(zt.c, zt.h, zt.w);
  for (size_t i = 0; i < zt.size(); ++i) z0.v[i] = (zt.v[i] - b * eps_pred.v[i]) / a;
  return z0;
}

// Deterministic (eta = 0) DDIM update.
template <typename T>
nn::Tensor<T> ddim_step(const nn::Tensor<T>& zt, const nn::Tensor<T>& eps_pred, int t,
                        int t_prev, const NoiseSchedule& s) {
  if (!(0 <= t_prev && t_prev < t && t <= s.T))
    throw std::invalid_argument("ddim_step: timestep ordering violated");
  nn::Tensor<T> z0 = estimate_z0(zt, eps_pred, t, s);
  const T a = static_cast<T>(std::sqrt(s.alpha_bar(t_prev)));
  const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar(t_prev)));
  nn::Tensor<T> out(zt.c, zt.h, zt.w);
  for (size_t i = 0; i < zt.size(); ++i) out.v[i] = a * z0.v[i] + b * eps_pred.v[i];
  return out;
}

struct LatentTriplet {
  nn::Tensor<float> z_mesh, z_gs, z_gt;
};

// Channel-axis concatenation of the conditions (in checkpoint order) with the
// noisy latent last; the single assembly point shared by training and
// sampling.
nn::Tensor<float> concat_conditions(const std::vector<const nn::Tensor<float>*>& conditions,
                                    const nn::Tensor<float>& z_noisy);

struct DiffusionTrainConfig {
  int batch_size = 2;
  int grad_accum = 16;
  double lr = 3e-5;
};

// One optimizer update: batch_size * grad_accum draws of (triplet, t, eps),
// epsilon-prediction MSE, averaged gradients, one Adam step. Returns the mean
// loss; a non-finite gradient rejects the step and bumps *rejected.
double diffusion_train_update(nn::UNet<float>& net, nn::Adam<float>& opt,
                              const NoiseSchedule& sched,
                              const std::function<const LatentTriplet&(Rng&)>& draw,
                              const std::vector<std::string>& condition_order,
                              const DiffusionTrainConfig& cfg, Rng& rng, int* rejected);

// Full DDIM sampling loop; z_T drawn from rng. Conditions must already be in
// checkpoint order. Pure in the net parameters.
nn::Tensor<float> ddim_sample(nn::UNet<float>& net, const NoiseSchedule& sched,
                              const std::vector<const nn::Tensor<float>*>& conditions,
                              int latent_c, int latent_h, int latent_w, int n_steps, Rng& rng);

struct DenoiserCheckpoint {
  nn::UNetConfig net_cfg;
  NoiseSchedule schedule;
  std::vector<std::string> condition_order;
  int64_t trained_iterations = 0;
};

void save_denoiser(const std::string& dir, nn::UNet<float>& net, const NoiseSchedule& sched,
                   const std::vector<std::string>& condition_order, int64_t trained_iterations);

// Configures net from the manifest and loads weights. Throws if
// expected_order is nonempty and disagrees with the stored order.
DenoiserCheckpoint load_denoiser(const std::string& dir, nn::UNet<float>& net,
                                 const std::vector<std::string>& expected_order = {});

}  // namespace splatfix

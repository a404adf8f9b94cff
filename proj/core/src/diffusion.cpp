#include "splatfix/diffusion.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "splatfix/hash.hpp"
#include "splatfix/serial.hpp"

namespace splatfix {

using nlohmann::json;

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(T);
  s.alphas.resize(T);
  s.alpha_bars.resize(T + 1);
  s.alpha_bars[0] = 1.0;
  for (int i = 0; i < T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i) / (T - 1);
    s.betas[i] = beta_start + (beta_end - beta_start) * frac;
    s.alphas[i] = 1.0 - s.betas[i];
    s.alpha_bars[i + 1] = s.alpha_bars[i] * s.alphas[i];
  }
  return s;
}

std::vector<int> ddim_ladder(int T, int n_steps) {
  if (n_steps < 1 || n_steps > T) throw std::invalid_argument("ddim_ladder: bad step count");
  std::vector<int> ts(n_steps);
  for (int k = 0; k < n_steps; ++k) {
    ts[k] = static_cast<int>(std::lround(static_cast<double>(T) * (n_steps - k) / n_steps));
  }
  for (int k = 0; k + 1 < n_steps; ++k) {
    if (ts[k] <= ts[k + 1]) throw std::runtime_error("ddim_ladder: degenerate ladder");
  }
  return ts;
}

nn::Tensor<float> concat_conditions(const std::vector<const nn::Tensor<float>*>& conditions,
                                    const nn::Tensor<float>& z_noisy) {
  int c = z_noisy.c;
  for (const auto* t : conditions) {
    if (t->h != z_noisy.h || t->w != z_noisy.w)
      throw std::invalid_argument("concat_conditions: spatial shape mismatch");
    c += t->c;
  }
  nn::Tensor<float> out(c, z_noisy.h, z_noisy.w);
  size_t off = 0;
  for (const auto* t : conditions) {
    std::copy(t->v.begin(), t->v.end(), out.v.begin() + off);
    off += t->size();
  }
  std::copy(z_noisy.v.begin(), z_noisy.v.end(), out.v.begin() + off);
  return out;
}

static nn::Tensor<float> input_for(const LatentTriplet& trip, const nn::Tensor<float>& zt,
                                   const std::vector<std::string>& order) {
  std::vector<const nn::Tensor<float>*> conds;
  for (const auto& name : order) {
    if (name == "mesh")
      conds.push_back(&trip.z_mesh);
    else if (name == "gs")
      conds.push_back(&trip.z_gs);
    else
      throw std::invalid_argument("unknown condition '" + name + "'");
  }
  return concat_conditions(conds, zt);
}

double diffusion_train_update(nn::UNet<float>& net, nn::Adam<float>& opt,
                              const NoiseSchedule& sched,
                              const std::function<const LatentTriplet&(Rng&)>& draw,
                              const std::vector<std::string>& condition_order,
                              const DiffusionTrainConfig& cfg, Rng& rng, int* rejected) {
  auto params = net.params();
  nn::zero_grads(params);
  nn::Tape<float> tape;

  const int n_samples = cfg.batch_size * cfg.grad_accum;
  double total_loss = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const LatentTriplet& trip = draw(rng);
    const int t = 1 + rng.uniform_int(sched.T);
    nn::Tensor<float> eps(trip.z_gt.c, trip.z_gt.h, trip.z_gt.w);
    for (auto& e : eps.v) e = static_cast<float>(rng.normal());
    nn::Tensor<float> zt = q_sample(trip.z_gt, t, eps, sched);
    nn::Tensor<float> x = input_for(trip, zt, condition_order);

    tape.clear();
    nn::Tensor<float> pred = net.forward(x, t, &tape);
    const double inv = 1.0 / static_cast<double>(pred.size());
    nn::Tensor<float> dpred(pred.c, pred.h, pred.w);
    double loss = 0.0;
    for (size_t k = 0; k < pred.size(); ++k) {
      const double d = static_cast<double>(pred.v[k]) - static_cast<double>(eps.v[k]);
      loss += d * d * inv;
      dpred.v[k] = static_cast<float>(2.0 * d * inv / n_samples);
    }
    total_loss += loss / n_samples;
    net.backward(dpred, tape);
  }

  if (!nn::grads_finite(params) || !std::isfinite(total_loss)) {
    nn::zero_grads(params);
    if (rejected) ++*rejected;
    return total_loss;
  }
  opt.step(params);
  return total_loss;
}

nn::Tensor<float> ddim_sample(nn::UNet<float>& net, const NoiseSchedule& sched,
                              const std::vector<const nn::Tensor<float>*>& conditions,
                              int latent_c, int latent_h, int latent_w, int n_steps, Rng& rng) {
  nn::Tensor<float> z(latent_c, latent_h, latent_w);
  for (auto& e : z.v) e = static_cast<float>(rng.normal());
  const std::vector<int> ladder = ddim_ladder(sched.T, n_steps);
  for (int k = 0; k < n_steps; ++k) {
    const int t = ladder[k];
    const int t_prev = k + 1 < n_steps ? ladder[k + 1] : 0;
    nn::Tensor<float> x = concat_conditions(conditions, z);
    nn::Tensor<float> eps_pred = net.forward(x, t, nullptr);
    z = ddim_step(z, eps_pred, t, t_prev, sched);
  }
  return z;
}

void save_denoiser(const std::string& dir, nn::UNet<float>& net, const NoiseSchedule& sched,
                   const std::vector<std::string>& condition_order, int64_t trained_iterations) {
  ensure_dir(dir);
  const nn::UNetConfig& c = net.config();
  json m;
  m["schema_version"] = 1;
  m["format"] = "denoiser";
  m["architecture"] = net.descriptor();
  m["architecture_hash"] = hex64(fnv1a64(net.descriptor()));
  m["net"] = {{"in_channels", c.in_channels}, {"out_channels", c.out_channels},
              {"base", c.base},               {"mult1", c.mult1},
              {"mult2", c.mult2},             {"temb_dim", c.temb_dim}};
  m["schedule"] = {{"T", sched.T}, {"beta_start", sched.beta_start}, {"beta_end", sched.beta_end}};
  m["condition_order"] = condition_order;
  m["trained_iterations"] = trained_iterations;
  write_text_file(dir + "/manifest.json", m.dump(2) + "\n");
  const std::vector<float> flat = nn::flatten_params(net.params());
  write_blob_f32(dir + "/weights.f32", flat.data(), flat.size());
}

DenoiserCheckpoint load_denoiser(const std::string& dir, nn::UNet<float>& net,
                                 const std::vector<std::string>& expected_order) {
  const json m = json::parse(read_text_file(dir + "/manifest.json"));
  if (m.at("format").get<std::string>() != "denoiser")
    throw std::runtime_error("load_denoiser: not a denoiser checkpoint: " + dir);
  DenoiserCheckpoint ck;
  const json& n = m.at("net");
  ck.net_cfg.in_channels = n.at("in_channels").get<int>();
  ck.net_cfg.out_channels = n.at("out_channels").get<int>();
  ck.net_cfg.base = n.at("base").get<int>();
  ck.net_cfg.mult1 = n.at("mult1").get<int>();
  ck.net_cfg.mult2 = n.at("mult2").get<int>();
  ck.net_cfg.temb_dim = n.at("temb_dim").get<int>();
  const json& s = m.at("schedule");
  ck.schedule = make_schedule(s.at("T").get<int>(), s.at("beta_start").get<double>(),
                              s.at("beta_end").get<double>());
  ck.condition_order = m.at("condition_order").get<std::vector<std::string>>();
  ck.trained_iterations = m.at("trained_iterations").get<int64_t>();

  if (!expected_order.empty() && expected_order != ck.condition_order)
    throw std::runtime_error("load_denoiser: condition order mismatch in " + dir);

  net.configure(ck.net_cfg, 0);
  if (m.at("architecture_hash").get<std::string>() != hex64(fnv1a64(net.descriptor())))
    throw std::runtime_error("load_denoiser: architecture hash mismatch in " + dir);
  nn::unflatten_params(net.params(), read_blob_f32(dir + "/weights.f32"));
  return ck;
}

}  // namespace splatfix

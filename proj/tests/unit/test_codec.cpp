#include <cmath>

#include "doctest.h"
#include "splatfix/codec.hpp"
#include "splatfix/diffusion.hpp"
#include "splatfix/hash.hpp"

using namespace splatfix;

namespace {

CodecConfig tiny_cfg() {
  CodecConfig cfg;
  cfg.downsample = 2;
  cfg.latent_channels = 4;
  cfg.hidden = {16, 32};
  return cfg;
}

Image ramp_image(int w, int h, double phase) {
  Image img(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = 0.5 + 0.5 * std::sin(phase + 0.3 * x);
      img.at(y, x, 1) = static_cast<double>(y) / h;
      img.at(y, x, 2) = 0.5 + 0.4 * std::cos(phase + 0.2 * (x + y));
    }
  return img;
}

}  // namespace

TEST_CASE("codec configuration guards its invariants") {
  Codec c;
  CodecConfig cfg = tiny_cfg();
  cfg.downsample = 4;  // hidden has 2 levels -> factor must be 2
  CHECK_THROWS_AS(c.configure(cfg, 1), std::invalid_argument);
  cfg = tiny_cfg();
  cfg.hidden.clear();
  CHECK_THROWS_AS(c.configure(cfg, 1), std::invalid_argument);
  cfg = tiny_cfg();
  cfg.latent_channels = 0;
  CHECK_THROWS_AS(c.configure(cfg, 1), std::invalid_argument);

  c.configure(tiny_cfg(), 1);
  Image odd(6, 6, 3);  // 6 % 2 == 0 is fine; 7 is not
  CHECK_NOTHROW(c.encode(odd));
  Image bad(7, 7, 3);
  CHECK_THROWS_AS(c.encode(bad), std::invalid_argument);
  nn::Tensor<float> wrong_c(3, 4, 4);
  CHECK_THROWS_AS(c.decode(wrong_c), std::invalid_argument);
}

TEST_CASE("codec shape contract at the pipeline resolution") {
  Codec c;
  c.configure(CodecConfig{}, 3);
  Image img = ramp_image(96, 96, 0.4);
  nn::Tensor<float> z = c.encode(img);
  CHECK(z.c == 4);
  CHECK(z.h == 24);
  CHECK(z.w == 24);
  Image out = c.decode(z);
  CHECK(out.width == 96);
  CHECK(out.height == 96);
  CHECK(out.channels == 3);
  for (double v : out.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("codec gradients match directional finite differences") {
  Codec c;
  c.configure(tiny_cfg(), 5);
  Rng rng = Rng::stream(6, "codec_fd");

  Image img = ramp_image(8, 8, 1.1);
  const nn::Tensor<float> x0 = tensor_from_image(img);
  nn::Tensor<float> eps_fixed(4, 4, 4), wr(3, 8, 8), wm(4, 4, 4), wl(4, 4, 4);
  for (auto& v : eps_fixed.v) v = static_cast<float>(rng.normal());
  for (auto& v : wr.v) v = static_cast<float>(rng.normal() * 0.1);
  for (auto& v : wm.v) v = static_cast<float>(rng.normal() * 0.1);
  for (auto& v : wl.v) v = static_cast<float>(rng.normal() * 0.1);

  // loss touches every path the trainer uses: recon, mu, and the
  // reparameterized sigma
  auto loss_at = [&](const nn::Tensor<float>& x) {
    nn::Tensor<float> mu, logvar;
    c.encode_dist(x, mu, logvar, nullptr);
    nn::Tensor<float> z(mu.c, mu.h, mu.w);
    for (size_t i = 0; i < mu.size(); ++i)
      z.v[i] = mu.v[i] + std::exp(0.5f * logvar.v[i]) * eps_fixed.v[i];
    nn::Tensor<float> recon = c.decode_raw(z, nullptr);
    double l = 0.0;
    for (size_t i = 0; i < recon.size(); ++i) l += recon.v[i] * wr.v[i];
    for (size_t i = 0; i < mu.size(); ++i) l += mu.v[i] * wm.v[i] + logvar.v[i] * wl.v[i];
    return l;
  };

  auto backward_pass = [&](nn::Tensor<float>& dx_out) {
    nn::Tape<float> tape;
    nn::Tensor<float> mu, logvar;
    c.encode_dist(x0, mu, logvar, &tape);
    nn::Tensor<float> z(mu.c, mu.h, mu.w);
    for (size_t i = 0; i < mu.size(); ++i)
      z.v[i] = mu.v[i] + std::exp(0.5f * logvar.v[i]) * eps_fixed.v[i];
    c.decode_raw(z, &tape);
    nn::Tensor<float> dz = c.decode_backward(wr, tape);
    nn::Tensor<float> dmu(mu.c, mu.h, mu.w), dlogvar(mu.c, mu.h, mu.w);
    for (size_t i = 0; i < mu.size(); ++i) {
      dmu.v[i] = dz.v[i] + wm.v[i];
      dlogvar.v[i] =
          dz.v[i] * eps_fixed.v[i] * 0.5f * std::exp(0.5f * logvar.v[i]) + wl.v[i];
    }
    dx_out = c.encode_backward(dmu, dlogvar, tape);
  };

  auto params = c.params();
  nn::zero_grads(params);
  nn::Tensor<float> dx;
  backward_pass(dx);

  const float h = 1e-3f;
  for (int trial = 0; trial < 3; ++trial) {
    // input direction
    nn::Tensor<float> dir(x0.c, x0.h, x0.w);
    for (auto& v : dir.v) v = static_cast<float>(rng.normal());
    nn::Tensor<float> xp = x0, xm = x0;
    for (size_t i = 0; i < x0.size(); ++i) {
      xp.v[i] += h * dir.v[i];
      xm.v[i] -= h * dir.v[i];
    }
    const double fd = (loss_at(xp) - loss_at(xm)) / (2.0 * h);
    double analytic = 0.0;
    for (size_t i = 0; i < x0.size(); ++i) analytic += static_cast<double>(dx.v[i]) * dir.v[i];
    INFO("input trial ", trial, " fd=", fd, " got=", analytic);
    CHECK(std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-3}) < 1e-2);
  }

  for (int trial = 0; trial < 3; ++trial) {
    std::vector<std::vector<float>> dirs(params.size());
    for (size_t p = 0; p < params.size(); ++p) {
      dirs[p].resize(params[p]->w.size());
      for (auto& v : dirs[p]) v = static_cast<float>(rng.normal());
    }
    double analytic = 0.0;
    for (size_t p = 0; p < params.size(); ++p)
      for (size_t i = 0; i < dirs[p].size(); ++i)
        analytic += static_cast<double>(params[p]->g[i]) * dirs[p][i];
    auto nudge = [&](float sign) {
      for (size_t p = 0; p < params.size(); ++p)
        for (size_t i = 0; i < dirs[p].size(); ++i) params[p]->w[i] += sign * h * dirs[p][i];
    };
    nudge(1.0f);
    const double lp = loss_at(x0);
    nudge(-2.0f);
    const double lm = loss_at(x0);
    nudge(1.0f);
    const double fd = (lp - lm) / (2.0 * h);
    INFO("param trial ", trial, " fd=", fd, " got=", analytic);
    CHECK(std::abs(fd - analytic) / std::max({std::abs(fd), std::abs(analytic), 1e-3}) < 1e-2);
  }
}

TEST_CASE("zero-iteration pretraining still yields a frozen shape-valid codec") {
  std::vector<Image> corpus = {ramp_image(16, 16, 0.0), ramp_image(16, 16, 2.0)};
  Codec c = pretrain_codec(corpus, tiny_cfg(), 0, 9);
  CHECK(c.frozen());
  nn::Tensor<float> z0 = c.encode(corpus[0]);
  CHECK(z0.c == 4);
  CHECK(z0.h == 8);
  CHECK(z0.w == 8);
  nn::Tensor<float> z0_again = c.encode(corpus[0]);
  CHECK(z0.v == z0_again.v);  // posterior mean, no sampling
  nn::Tensor<float> z1 = c.encode(corpus[1]);
  double l2 = 0.0;
  for (size_t i = 0; i < z0.size(); ++i) {
    const double d = static_cast<double>(z0.v[i]) - z1.v[i];
    l2 += d * d;
  }
  CHECK(l2 > 0.0);
}

TEST_CASE("codec pretraining is deterministic and reduces the loss") {
  std::vector<Image> corpus;
  for (int i = 0; i < 3; ++i) corpus.push_back(ramp_image(16, 16, 0.9 * i));

  CodecTrainReport rep1, rep2;
  Codec a = pretrain_codec(corpus, tiny_cfg(), 300, 9, &rep1);
  CHECK(rep1.rejected_steps == 0);
  CHECK(rep1.final_loss < 0.5 * rep1.loss_history.front());

  Codec b = pretrain_codec(corpus, tiny_cfg(), 300, 9, &rep2);
  CHECK(rep1.final_loss == rep2.final_loss);
  CHECK(nn::flatten_params(a.params()) == nn::flatten_params(b.params()));

  Image bad(10, 16, 3);
  std::vector<Image> mixed = {corpus[0], bad};
  CHECK_THROWS_AS(pretrain_codec(mixed, tiny_cfg(), 1, 9), std::invalid_argument);
  CHECK_THROWS_AS(pretrain_codec({}, tiny_cfg(), 1, 9), std::invalid_argument);
}

TEST_CASE("codec checkpoints round-trip with frozen state") {
  std::vector<Image> corpus = {ramp_image(8, 8, 0.3)};
  Codec c = pretrain_codec(corpus, tiny_cfg(), 5, 13);
  const std::string dir = "ckpt_codec_test";
  save_codec(dir, c, 5);

  Codec loaded;
  load_codec(dir, loaded);
  CHECK(loaded.frozen());
  CHECK(loaded.config().downsample == 2);
  CHECK(nn::flatten_params(loaded.params()) == nn::flatten_params(c.params()));

  const uint64_t h1 = hash_dir(dir);
  save_codec(dir, loaded, 5);
  CHECK(hash_dir(dir) == h1);

  nn::UNetConfig ncfg;
  ncfg.in_channels = 4;
  ncfg.base = 16;
  ncfg.temb_dim = 16;
  nn::UNet<float> net;
  net.configure(ncfg, 1);
  save_denoiser("ckpt_codec_wrongfmt", net, make_schedule(10), {"mesh", "gs"}, 0);
  Codec wrong;
  CHECK_THROWS_AS(load_codec("ckpt_codec_wrongfmt", wrong), std::runtime_error);
}

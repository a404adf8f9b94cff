#pragma once

#include <string>
#include <utility>
#include <vector>

#include "splatfix/nn.hpp"

namespace splatfix::nn {

// GN -> SiLU -> conv, timestep injection after the first conv, residual skip
// (1x1 projected when channel counts differ).
template <typename T>
class ResBlock {
 public:
  void configure(int in_c, int out_c, int temb_dim, Rng& rng) {
    in_c_ = in_c;
    out_c_ = out_c;
    gn1_.configure(in_c);
    conv1_.configure(in_c, out_c, 3, 1, rng);
    temb_lin_.configure(temb_dim, out_c, rng);
    gn2_.configure(out_c);
    conv2_.configure(out_c, out_c, 3, 1, rng);
    if (in_c != out_c) skip_.configure(in_c, out_c, 1, 1, rng);
  }

  void params(ParamRefs<T>& out) {
    gn1_.params(out);
    conv1_.params(out);
    temb_lin_.params(out);
    gn2_.params(out);
    conv2_.params(out);
    if (in_c_ != out_c_) skip_.params(out);
  }

  Tensor<T> forward(const Tensor<T>& x, const std::vector<T>& temb_act, Tape<T>* tape) {
    Tensor<T> h = conv1_.forward(silu1_.forward(gn1_.forward(x, tape), tape), tape);
    const std::vector<T> ev = temb_lin_.forward(temb_act, tape);
    const size_t plane = static_cast<size_t>(h.h) * h.w;
    for (int ch = 0; ch < out_c_; ++ch) {
      T* p = h.v.data() + ch * plane;
      for (size_t i = 0; i < plane; ++i) p[i] += ev[ch];
    }
    Tensor<T> h2 = conv2_.forward(silu2_.forward(gn2_.forward(h, tape), tape), tape);
    if (in_c_ != out_c_) {
      Tensor<T> sx = skip_.forward(x, tape);
      for (size_t i = 0; i < h2.size(); ++i) h2.v[i] += sx.v[i];
    } else {
      for (size_t i = 0; i < h2.size(); ++i) h2.v[i] += x.v[i];
    }
    return h2;
  }

  // Returns (dx, d temb_act).
  std::pair<Tensor<T>, std::vector<T>> backward(const Tensor<T>& dy, Tape<T>& tape) {
    Tensor<T> dx_skip;
    if (in_c_ != out_c_) dx_skip = skip_.backward(dy, tape);

    Tensor<T> dh = gn2_.backward(silu2_.backward(conv2_.backward(dy, tape), tape), tape);

    std::vector<T> dev(out_c_, T(0));
    const size_t plane = static_cast<size_t>(dh.h) * dh.w;
    for (int ch = 0; ch < out_c_; ++ch) {
      const T* p = dh.v.data() + ch * plane;
      T acc = T(0);
      for (size_t i = 0; i < plane; ++i) acc += p[i];
      dev[ch] = acc;
    }
    std::vector<T> dtemb = temb_lin_.backward(dev, tape);

    Tensor<T> dx = gn1_.backward(silu1_.backward(conv1_.backward(dh, tape), tape), tape);
    if (in_c_ != out_c_) {
      for (size_t i = 0; i < dx.size(); ++i) dx.v[i] += dx_skip.v[i];
    } else {
      for (size_t i = 0; i < dx.size(); ++i) dx.v[i] += dy.v[i];
    }
    return {std::move(dx), std::move(dtemb)};
  }

 private:
  int in_c_ = 0, out_c_ = 0;
  GroupNorm<T> gn1_, gn2_;
  SiLU<T> silu1_, silu2_;
  Conv2d<T> conv1_, conv2_, skip_;
  Linear<T> temb_lin_;
};

struct UNetConfig {
  int in_channels = 12;
  int out_channels = 4;
  int base = 64;
  int mult1 = 2, mult2 = 2;  // channel multipliers for the two lower levels
  int temb_dim = 128;
};

// Three-level encoder/decoder with one ResBlock per level, a mid block, and
// skip connections; the output head is zero-initialized so an untrained net
// predicts exactly zero.
template <typename T>
class UNet {
 public:
  void configure(const UNetConfig& cfg, uint64_t seed) {
    cfg_ = cfg;
    Rng rng = Rng::stream(seed, "unet_init");
    const int c0 = cfg.base, c1 = cfg.base * cfg.mult1, c2 = cfg.base * cfg.mult2;
    lin1_.configure(cfg.temb_dim, cfg.temb_dim, rng);
    lin2_.configure(cfg.temb_dim, cfg.temb_dim, rng);
    inconv_.configure(cfg.in_channels, c0, 3, 1, rng);
    rb_d0_.configure(c0, c0, cfg.temb_dim, rng);
    down0_.configure(c0, c1, 3, 2, rng);
    rb_d1_.configure(c1, c1, cfg.temb_dim, rng);
    down1_.configure(c1, c2, 3, 2, rng);
    rb_d2_.configure(c2, c2, cfg.temb_dim, rng);
    rb_mid_.configure(c2, c2, cfg.temb_dim, rng);
    rb_u2_.configure(c2 + c2, c2, cfg.temb_dim, rng);
    upconv1_.configure(c2, c1, 3, 1, rng);
    rb_u1_.configure(c1 + c1, c1, cfg.temb_dim, rng);
    upconv0_.configure(c1, c0, 3, 1, rng);
    rb_u0_.configure(c0 + c0, c0, cfg.temb_dim, rng);
    gn_out_.configure(c0);
    outconv_.configure(c0, cfg.out_channels, 3, 1, rng, /*zero_init=*/true);
  }

  const UNetConfig& config() const { return cfg_; }

  std::string descriptor() const {
    return "unet(in=" + std::to_string(cfg_.in_channels) +
           ",out=" + std::to_string(cfg_.out_channels) + ",base=" + std::to_string(cfg_.base) +
           ",mults=1-" + std::to_string(cfg_.mult1) + "-" + std::to_string(cfg_.mult2) +
           ",temb=" + std::to_string(cfg_.temb_dim) + ",gn=8,rb=1)";
  }

  ParamRefs<T> params() {
    ParamRefs<T> out;
    lin1_.params(out);
    lin2_.params(out);
    inconv_.params(out);
    rb_d0_.params(out);
    down0_.params(out);
    rb_d1_.params(out);
    down1_.params(out);
    rb_d2_.params(out);
    rb_mid_.params(out);
    rb_u2_.params(out);
    upconv1_.params(out);
    rb_u1_.params(out);
    upconv0_.params(out);
    rb_u0_.params(out);
    gn_out_.params(out);
    outconv_.params(out);
    return out;
  }

  // The first conv's weight, for input-layer surgery.
  Param<T>& input_layer() { return inconv_.weight; }
  int input_kernel() const { return inconv_.k; }

  Tensor<T> forward(const Tensor<T>& x, double t, Tape<T>* tape) {
    const std::vector<T> emb0 = sinusoidal_embedding<T>(t, cfg_.temb_dim);
    e1_ = lin1_.forward(emb0, tape);
    std::vector<T> es(e1_.size());
    for (size_t i = 0; i < es.size(); ++i)
      es[i] = e1_[i] / (T(1) + std::exp(-e1_[i]));
    e_ = lin2_.forward(es, tape);
    eact_.resize(e_.size());
    for (size_t i = 0; i < e_.size(); ++i)
      eact_[i] = e_[i] / (T(1) + std::exp(-e_[i]));

    Tensor<T> h0 = inconv_.forward(x, tape);
    s0_ = rb_d0_.forward(h0, eact_, tape);
    s1_ = rb_d1_.forward(down0_.forward(s0_, tape), eact_, tape);
    s2_ = rb_d2_.forward(down1_.forward(s1_, tape), eact_, tape);
    Tensor<T> m = rb_mid_.forward(s2_, eact_, tape);
    Tensor<T> u2 = rb_u2_.forward(concat_channels(m, s2_), eact_, tape);
    Tensor<T> u1 =
        rb_u1_.forward(concat_channels(upconv1_.forward(upsample2x(u2), tape), s1_), eact_, tape);
    Tensor<T> u0 =
        rb_u0_.forward(concat_channels(upconv0_.forward(upsample2x(u1), tape), s0_), eact_, tape);
    return outconv_.forward(silu_out_.forward(gn_out_.forward(u0, tape), tape), tape);
  }

  Tensor<T> backward(const Tensor<T>& dy, Tape<T>& tape) {
    std::vector<T> de(e_.size(), T(0));
    auto take = [&](std::pair<Tensor<T>, std::vector<T>> r) {
      for (size_t i = 0; i < de.size(); ++i) de[i] += r.second[i];
      return std::move(r.first);
    };

    Tensor<T> du0 =
        gn_out_.backward(silu_out_.backward(outconv_.backward(dy, tape), tape), tape);
    Tensor<T> dcat0 = take(rb_u0_.backward(du0, tape));
    Tensor<T> duu0, ds0a;
    split_channels(dcat0, duu0, ds0a, cfg_.base);
    Tensor<T> du1 = upsample2x_backward(upconv0_.backward(duu0, tape));

    Tensor<T> dcat1 = take(rb_u1_.backward(du1, tape));
    Tensor<T> duu1, ds1a;
    split_channels(dcat1, duu1, ds1a, cfg_.base * cfg_.mult1);
    Tensor<T> du2 = upsample2x_backward(upconv1_.backward(duu1, tape));

    Tensor<T> dcat2 = take(rb_u2_.backward(du2, tape));
    Tensor<T> dm, ds2a;
    split_channels(dcat2, dm, ds2a, cfg_.base * cfg_.mult2);

    Tensor<T> ds2 = take(rb_mid_.backward(dm, tape));
    for (size_t i = 0; i < ds2.size(); ++i) ds2.v[i] += ds2a.v[i];
    Tensor<T> dh2 = take(rb_d2_.backward(ds2, tape));

    Tensor<T> ds1 = down1_.backward(dh2, tape);
    for (size_t i = 0; i < ds1.size(); ++i) ds1.v[i] += ds1a.v[i];
    Tensor<T> dh1 = take(rb_d1_.backward(ds1, tape));

    Tensor<T> ds0 = down0_.backward(dh1, tape);
    for (size_t i = 0; i < ds0.size(); ++i) ds0.v[i] += ds0a.v[i];
    Tensor<T> dh0 = take(rb_d0_.backward(ds0, tape));

    Tensor<T> dx = inconv_.backward(dh0, tape);

    // Timestep trunk: de is d(eact); chain through silu(e), lin2, silu(e1), lin1.
    std::vector<T> de2(de.size());
    for (size_t i = 0; i < de.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-e_[i]));
      de2[i] = de[i] * s * (T(1) + e_[i] * (T(1) - s));
    }
    std::vector<T> des = lin2_.backward(de2, tape);
    for (size_t i = 0; i < des.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-e1_[i]));
      des[i] = des[i] * s * (T(1) + e1_[i] * (T(1) - s));
    }
    lin1_.backward(des, tape);
    return dx;
  }

 private:
  UNetConfig cfg_;
  Linear<T> lin1_, lin2_;
  Conv2d<T> inconv_, down0_, down1_, upconv1_, upconv0_, outconv_;
  ResBlock<T> rb_d0_, rb_d1_, rb_d2_, rb_mid_, rb_u2_, rb_u1_, rb_u0_;
  GroupNorm<T> gn_out_;
  SiLU<T> silu_out_;
  std::vector<T> e1_, e_, eact_;
  Tensor<T> s0_, s1_, s2_;
};

// Replicates a conv weight n times along the input-channel axis, dividing by
// n, so the widened layer reproduces the base layer on replicated input.
template <typename T>
inline std::vector<T> expand_input_layer(const std::vector<T>& base_weight, int out_c, int in_c,
                                         int k, int n) {
  if (base_weight.size() != static_cast<size_t>(out_c) * in_c * k * k)
    throw std::invalid_argument("expand_input_layer: weight size mismatch");
  std::vector<T> out(static_cast<size_t>(out_c) * in_c * n * k * k);
  const size_t per_in = static_cast<size_t>(k) * k;
  const T inv = T(1) / static_cast<T>(n);
  for (int oc = 0; oc < out_c; ++oc)
    for (int rep = 0; rep < n; ++rep)
      for (int ic = 0; ic < in_c; ++ic)
        for (size_t q = 0; q < per_in; ++q)
          out[((static_cast<size_t>(oc) * n + rep) * in_c + ic) * per_in + q] =
              base_weight[(static_cast<size_t>(oc) * in_c + ic) * per_in + q] * inv;
  return out;
}

}  // namespace splatfix::nn

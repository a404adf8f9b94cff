#include <cmath>
#include <functional>

#include "doctest.h"
#include "splatfix/nn.hpp"
#include "splatfix/unet.hpp"

using namespace splatfix;
using namespace splatfix::nn;

namespace {

Tensor<double> random_tensor(int c, int h, int w, Rng& rng, double scale = 1.0) {
  Tensor<double> t(c, h, w);
  for (auto& v : t.v) v = rng.normal() * scale;
  return t;
}

double dot_loss(const Tensor<double>& y, const Tensor<double>& w) {
  double l = 0.0;
  for (size_t i = 0; i < y.size(); ++i) l += y.v[i] * w.v[i];
  return l;
}

void check_fd(std::vector<double>& param, const std::vector<double>& analytic,
              const std::function<double()>& loss, size_t max_coords, Rng& pick,
              const char* label, double tol = 1e-5) {
  INFO(label);
  const double h = 1e-6;
  std::vector<size_t> coords;
  if (param.size() <= max_coords) {
    for (size_t i = 0; i < param.size(); ++i) coords.push_back(i);
  } else {
    for (size_t i = 0; i < max_coords; ++i)
      coords.push_back(pick.uniform_int(static_cast<int>(param.size())));
  }
  for (size_t k : coords) {
    const double keep = param[k];
    param[k] = keep + h;
    const double lp = loss();
    param[k] = keep - h;
    const double lm = loss();
    param[k] = keep;
    const double fd = (lp - lm) / (2.0 * h);
    if (std::abs(fd) < 1e-7 && std::abs(analytic[k]) < 1e-7) continue;  // below FD noise
    const double denom = std::max({std::abs(fd), std::abs(analytic[k]), 1e-6});
    INFO("coord ", k, " fd=", fd, " got=", analytic[k]);
    CHECK(std::abs(fd - analytic[k]) / denom < tol);
  }
}

// Direct convolution, no im2col: the independent oracle for conv layers.
Tensor<double> conv_direct(const Tensor<double>& x, const std::vector<double>& w,
                           const std::vector<double>& b, int out_c, int k, int stride,
                           bool use_bias) {
  const int pad = (k - 1) / 2;
  const int oh = (x.h + 2 * pad - k) / stride + 1;
  const int ow = (x.w + 2 * pad - k) / stride + 1;
  Tensor<double> y(out_c, oh, ow);
  for (int oc = 0; oc < out_c; ++oc)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = use_bias ? b[oc] : 0.0;
        for (int ic = 0; ic < x.c; ++ic)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride - pad + ky;
              const int ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= x.h || ix < 0 || ix >= x.w) continue;
              acc += w[((static_cast<size_t>(oc) * x.c + ic) * k + ky) * k + kx] *
                     x.at(ic, iy, ix);
            }
        y.at(oc, oy, ox) = acc;
      }
  return y;
}

}  // namespace

TEST_CASE("conv2d matches direct convolution and finite differences") {
  Rng rng(11);
  for (const int stride : {1, 2}) {
    Conv2d<double> conv;
    conv.configure(2, 3, 3, stride, rng);
    Tensor<double> x = random_tensor(2, 6, 5, rng);

    Tape<double> tape;
    Tensor<double> y = conv.forward(x, &tape);
    Tensor<double> ref = conv_direct(x, conv.weight.w, conv.bias.w, 3, 3, stride, true);
    REQUIRE(y.same_shape(ref));
    for (size_t i = 0; i < y.size(); ++i) CHECK(y.v[i] == doctest::Approx(ref.v[i]).epsilon(1e-12));

    Tensor<double> lw = random_tensor(y.c, y.h, y.w, rng);
    Tensor<double> dx = conv.backward(lw, tape);

    auto loss = [&] { return dot_loss(conv.forward(x, nullptr), lw); };
    Rng pick(3);
    check_fd(conv.weight.w, conv.weight.g, loss, 60, pick, "conv weight");
    check_fd(conv.bias.w, conv.bias.g, loss, 10, pick, "conv bias");
    check_fd(x.v, dx.v, loss, 40, pick, "conv input");
  }
}

TEST_CASE("groupnorm gradients") {
  Rng rng(21);
  GroupNorm<double> gn;
  gn.configure(8, 2);
  Tensor<double> x = random_tensor(8, 4, 3, rng, 1.5);
  Tensor<double> lw = random_tensor(8, 4, 3, rng);

  Tape<double> tape;
  gn.forward(x, &tape);
  Tensor<double> dx = gn.backward(lw, tape);

  auto loss = [&] { return dot_loss(gn.forward(x, nullptr), lw); };
  Rng pick(4);
  check_fd(gn.gamma.w, gn.gamma.g, loss, 8, pick, "gn gamma");
  check_fd(gn.beta.w, gn.beta.g, loss, 8, pick, "gn beta");
  check_fd(x.v, dx.v, loss, 48, pick, "gn input", 1e-4);
}

TEST_CASE("silu, linear, upsample gradients") {
  Rng rng(31);
  SiLU<double> act;
  Tensor<double> x = random_tensor(3, 4, 4, rng);
  Tensor<double> lw = random_tensor(3, 4, 4, rng);
  Tape<double> tape;
  act.forward(x, &tape);
  Tensor<double> dx = act.backward(lw, tape);
  auto loss1 = [&] { return dot_loss(act.forward(x, nullptr), lw); };
  Rng pick(5);
  check_fd(x.v, dx.v, loss1, 48, pick, "silu input");

  Linear<double> lin;
  lin.configure(6, 4, rng);
  std::vector<double> vx(6);
  for (auto& v : vx) v = rng.normal();
  std::vector<double> vw(4);
  for (auto& v : vw) v = rng.normal();
  Tape<double> t2;
  lin.forward(vx, &t2);
  std::vector<double> dvx = lin.backward(vw, t2);
  auto loss2 = [&] {
    const auto y = lin.forward(vx, nullptr);
    double l = 0.0;
    for (int i = 0; i < 4; ++i) l += y[i] * vw[i];
    return l;
  };
  check_fd(lin.weight.w, lin.weight.g, loss2, 24, pick, "linear weight");
  check_fd(lin.bias.w, lin.bias.g, loss2, 4, pick, "linear bias");
  check_fd(vx, dvx, loss2, 6, pick, "linear input");

  Tensor<double> u = random_tensor(2, 3, 3, rng);
  Tensor<double> up = upsample2x(u);
  CHECK(up.h == 6);
  CHECK(up.at(1, 5, 4) == u.at(1, 2, 2));
  Tensor<double> ulw = random_tensor(2, 6, 6, rng);
  Tensor<double> du = upsample2x_backward(ulw);
  auto loss3 = [&] { return dot_loss(upsample2x(u), ulw); };
  check_fd(u.v, du.v, loss3, 18, pick, "upsample input");
}

TEST_CASE("resblock gradients including timestep path") {
  Rng rng(41);
  for (const int out_c : {16, 24}) {  // identity skip and projected skip
    ResBlock<double> rb;
    rb.configure(16, out_c, 8, rng);
    Tensor<double> x = random_tensor(16, 5, 4, rng);
    std::vector<double> emb(8);
    for (auto& v : emb) v = rng.normal();
    Tensor<double> lw = random_tensor(out_c, 5, 4, rng);

    Tape<double> tape;
    rb.forward(x, emb, &tape);
    auto [dx, demb] = rb.backward(lw, tape);

    ParamRefs<double> ps;
    rb.params(ps);
    auto loss = [&] { return dot_loss(rb.forward(x, emb, nullptr), lw); };
    Rng pick(6);
    check_fd(x.v, dx.v, loss, 40, pick, "rb input", 1e-4);
    check_fd(emb, demb, loss, 8, pick, "rb temb", 1e-4);
    for (auto* p : ps) {
      zero_grads(ps);
      Tape<double> t2;
      rb.forward(x, emb, &t2);
      rb.backward(lw, t2);
      check_fd(p->w, p->g, loss, 20, pick, "rb param", 1e-4);
    }
  }
}

TEST_CASE("unet: zero head, shapes, and end-to-end gradients") {
  UNetConfig cfg;
  cfg.in_channels = 4;
  cfg.out_channels = 4;
  cfg.base = 16;
  cfg.mult1 = 2;
  cfg.mult2 = 2;
  cfg.temb_dim = 16;
  UNet<double> net;
  net.configure(cfg, 99);

  Rng rng(51);
  Tensor<double> x = random_tensor(4, 8, 8, rng);
  Tensor<double> y = net.forward(x, 17.0, nullptr);
  CHECK(y.c == 4);
  CHECK(y.h == 8);
  CHECK(y.w == 8);
  for (double v : y.v) CHECK(v == 0.0);  // zero-initialized output head

  // Give the output conv small random weights so gradients flow everywhere.
  ParamRefs<double> ps = net.params();
  Rng jig(7);
  auto& head_w = *ps[ps.size() - 2];
  for (auto& v : head_w.w) v = jig.normal() * 0.05;

  Tensor<double> lw = random_tensor(4, 8, 8, rng);
  Tape<double> tape;
  net.forward(x, 17.0, &tape);
  Tensor<double> dx = net.backward(lw, tape);
  auto loss = [&] { return dot_loss(net.forward(x, 17.0, nullptr), lw); };
  Rng pick(8);
  check_fd(x.v, dx.v, loss, 40, pick, "unet input", 1e-3);

  zero_grads(ps);
  Tape<double> t2;
  net.forward(x, 17.0, &t2);
  net.backward(lw, t2);
  // Spot-check a slice of every parameter tensor.
  for (size_t pi = 0; pi < ps.size(); ++pi) {
    INFO("param tensor ", pi);
    check_fd(ps[pi]->w, ps[pi]->g, loss, 4, pick, "unet param", 1e-3);
  }

  // Different timesteps must produce different outputs once the head is live.
  Tensor<double> ya = net.forward(x, 17.0, nullptr);
  Tensor<double> yb = net.forward(x, 900.0, nullptr);
  double diff = 0.0;
  for (size_t i = 0; i < ya.size(); ++i) diff += std::abs(ya.v[i] - yb.v[i]);
  CHECK(diff > 1e-6);
}

TEST_CASE("adam matches hand-computed first step") {
  Param<double> p;
  p.init(2);
  p.w = {1.0, -2.0};
  p.g = {0.5, -1.0};
  Adam<double> opt;
  opt.lr = 0.1;
  opt.step({&p});
  // First step with bias correction: update = lr * g / (|g| + eps)
  CHECK(p.w[0] == doctest::Approx(1.0 - 0.1 * (0.5 / (0.5 + 1e-8))).epsilon(1e-9));
  CHECK(p.w[1] == doctest::Approx(-2.0 + 0.1 * (1.0 / (1.0 + 1e-8))).epsilon(1e-9));
}

TEST_CASE("input layer expansion reproduces the base layer") {
  Rng rng(61);
  const int out_c = 5, in_c = 4, k = 3;
  Conv2d<double> base;
  base.configure(in_c, out_c, k, 1, rng);

  const auto wide_w = expand_input_layer(base.weight.w, out_c, in_c, k, 3);
  Conv2d<double> wide;
  wide.configure(3 * in_c, out_c, k, 1, rng);
  wide.weight.w = wide_w;
  wide.bias.w = base.bias.w;

  Tensor<double> a = random_tensor(in_c, 7, 7, rng);
  Tensor<double> b = random_tensor(in_c, 7, 7, rng);
  Tensor<double> c = random_tensor(in_c, 7, 7, rng);

  // Triplicated input reproduces the base layer.
  Tensor<double> aaa = concat_channels(concat_channels(a, a), a);
  Tensor<double> y_base = base.forward(a, nullptr);
  Tensor<double> y_wide = wide.forward(aaa, nullptr);
  for (size_t i = 0; i < y_base.size(); ++i)
    CHECK(std::abs(y_wide.v[i] - y_base.v[i]) < 1e-12);

  // Linearity against the direct-convolution oracle:
  // wide(a,b,c) = (nobias(a) + nobias(b) + nobias(c)) / 3 + bias.
  Tensor<double> abc = concat_channels(concat_channels(a, b), c);
  Tensor<double> y_abc = wide.forward(abc, nullptr);
  Tensor<double> oa = conv_direct(a, base.weight.w, base.bias.w, out_c, k, 1, false);
  Tensor<double> ob = conv_direct(b, base.weight.w, base.bias.w, out_c, k, 1, false);
  Tensor<double> oc = conv_direct(c, base.weight.w, base.bias.w, out_c, k, 1, false);
  for (int ch = 0; ch < out_c; ++ch)
    for (int y = 0; y < 7; ++y)
      for (int x = 0; x < 7; ++x) {
        const double expect =
            (oa.at(ch, y, x) + ob.at(ch, y, x) + oc.at(ch, y, x)) / 3.0 + base.bias.w[ch];
        CHECK(y_abc.at(ch, y, x) == doctest::Approx(expect).epsilon(1e-10));
      }
}

TEST_CASE("sinusoidal embedding and param serialization") {
  const auto e1 = sinusoidal_embedding<double>(5.0, 16);
  const auto e2 = sinusoidal_embedding<double>(5.0, 16);
  CHECK(e1 == e2);
  for (double v : e1) CHECK(std::abs(v) <= 1.0 + 1e-12);
  const auto e3 = sinusoidal_embedding<double>(6.0, 16);
  CHECK(e1 != e3);

  Rng rng(71);
  Linear<double> lin;
  lin.configure(5, 3, rng);
  ParamRefs<double> ps;
  lin.params(ps);
  const auto flat = flatten_params(ps);
  CHECK(flat.size() == param_count(ps));
  Linear<double> lin2;
  lin2.configure(5, 3, rng);
  ParamRefs<double> ps2;
  lin2.params(ps2);
  unflatten_params(ps2, flat);
  for (size_t i = 0; i < lin.weight.w.size(); ++i)
    CHECK(lin2.weight.w[i] == doctest::Approx(lin.weight.w[i]).epsilon(1e-7));
}

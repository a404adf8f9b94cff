#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "splatfix/rng.hpp"

// Minimal CPU autodiff for small convolutional nets. Single-sample CHW
// tensors; each layer's forward pushes onto a tape exactly what its backward
// pops, so a net runs forward then backward in strict reverse order.

namespace splatfix::nn {

template <typename T>
struct Tensor {
  int c = 0, h = 0, w = 0;
  std::vector<T> v;

  Tensor() = default;
  Tensor(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<size_t>(c_) * h_ * w_, T(0)) {}

  size_t size() const { return v.size(); }
  T& at(int ch, int y, int x) { return v[(static_cast<size_t>(ch) * h + y) * w + x]; }
  T at(int ch, int y, int x) const { return v[(static_cast<size_t>(ch) * h + y) * w + x]; }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }
};

template <typename T>
struct Tape {
  std::vector<Tensor<T>> stack;
  void push(Tensor<T> t) { stack.push_back(std::move(t)); }
  Tensor<T> pop() {
    if (stack.empty()) throw std::logic_error("tape underflow");
    Tensor<T> t = std::move(stack.back());
    stack.pop_back();
    return t;
  }
  void clear() { stack.clear(); }
};

template <typename T>
struct Param {
  std::vector<T> w, g;
  void init(size_t n) {
    w.assign(n, T(0));
    g.assign(n, T(0));
  }
};

template <typename T>
using ParamRefs = std::vector<Param<T>*>;

template <typename T>
using MatCM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
class Conv2d {
 public:
  Param<T> weight, bias;  // weight flattened [out][in][k][k]
  int in_c = 0, out_c = 0, k = 3, stride = 1, pad = 1;

  void configure(int in_channels, int out_channels, int kernel, int stride_, Rng& rng,
                 bool zero_init = false) {
    in_c = in_channels;
    out_c = out_channels;
    k = kernel;
    stride = stride_;
    pad = (kernel - 1) / 2;
    weight.init(static_cast<size_t>(out_c) * in_c * k * k);
    bias.init(out_c);
    if (!zero_init) {
      const double std_dev = std::sqrt(2.0 / (static_cast<double>(in_c) * k * k));
      for (auto& x : weight.w) x = static_cast<T>(rng.normal() * std_dev);
    }
  }

  void params(ParamRefs<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) {
    if (x.c != in_c) throw std::invalid_argument("Conv2d: channel mismatch");
    ih_ = x.h;
    iw_ = x.w;
    oh_ = (x.h + 2 * pad - k) / stride + 1;
    ow_ = (x.w + 2 * pad - k) / stride + 1;
    const int n = oh_ * ow_;
    const int rows = in_c * k * k;

    Tensor<T> col(1, 1, 1);
    col.v.assign(static_cast<size_t>(rows) * n, T(0));
    im2col(x, col.v.data());

    Tensor<T> y(out_c, oh_, ow_);
    Eigen::Map<const MatCM<T>> colm(col.v.data(), rows, n);
    Eigen::Map<const MatCM<T>> wt(weight.w.data(), rows, out_c);  // transposed view
    Eigen::Map<MatCM<T>> yv(y.v.data(), n, out_c);
    yv.noalias() = colm.transpose() * wt;
    for (int ch = 0; ch < out_c; ++ch) yv.col(ch).array() += bias.w[ch];

    if (tape) tape->push(std::move(col));
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, Tape<T>& tape) {
    const int n = oh_ * ow_;
    const int rows = in_c * k * k;
    Tensor<T> col = tape.pop();
    Eigen::Map<const MatCM<T>> colm(col.v.data(), rows, n);
    Eigen::Map<const MatCM<T>> dyv(dy.v.data(), n, out_c);

    Eigen::Map<MatCM<T>> wg(weight.g.data(), rows, out_c);
    wg.noalias() += colm * dyv;
    // scalar reduction: Eigen's vectorized sum() orders terms by buffer
    // alignment, which breaks run-to-run bit determinism
    for (int ch = 0; ch < out_c; ++ch) {
      T acc = T(0);
      const T* p = dy.v.data() + static_cast<size_t>(ch) * n;
      for (int i = 0; i < n; ++i) acc += p[i];
      bias.g[ch] += acc;
    }

    MatCM<T> dcol(rows, n);
    Eigen::Map<const MatCM<T>> wt(weight.w.data(), rows, out_c);
    dcol.noalias() = wt * dyv.transpose();

    Tensor<T> dx(in_c, ih_, iw_);
    col2im(dcol.data(), dx);
    return dx;
  }

 private:
  int ih_ = 0, iw_ = 0, oh_ = 0, ow_ = 0;

  void im2col(const Tensor<T>& x, T* col) const {
    // One column per output pixel; rows ordered (ic, ky, kx) to match the
    // flattened weight layout.
    size_t idx = 0;
    for (int oy = 0; oy < oh_; ++oy)
      for (int ox = 0; ox < ow_; ++ox)
        for (int ic = 0; ic < in_c; ++ic)
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            for (int kx = 0; kx < k; ++kx, ++idx) {
              const int ix = ox * stride - pad + kx;
              if (iy >= 0 && iy < ih_ && ix >= 0 && ix < iw_) col[idx] = x.at(ic, iy, ix);
            }
          }
  }

  void col2im(const T* col, Tensor<T>& dx) const {
    size_t idx = 0;
    for (int oy = 0; oy < oh_; ++oy)
      for (int ox = 0; ox < ow_; ++ox)
        for (int ic = 0; ic < in_c; ++ic)
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            for (int kx = 0; kx < k; ++kx, ++idx) {
              const int ix = ox * stride - pad + kx;
              if (iy >= 0 && iy < ih_ && ix >= 0 && ix < iw_) dx.at(ic, iy, ix) += col[idx];
            }
          }
  }
};

template <typename T>
class GroupNorm {
 public:
  Param<T> gamma, beta;
  int channels = 0, groups = 8;
  T eps = T(1e-5);

  void configure(int c, int g = 8) {
    if (c % g != 0) throw std::invalid_argument("GroupNorm: channels not divisible by groups");
    channels = c;
    groups = g;
    gamma.init(c);
    beta.init(c);
    std::fill(gamma.w.begin(), gamma.w.end(), T(1));
  }

  void params(ParamRefs<T>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }

  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) {
    if (x.c != channels) throw std::invalid_argument("GroupNorm: channel mismatch");
    const int gc = channels / groups;
    const size_t gsize = static_cast<size_t>(gc) * x.h * x.w;
    Tensor<T> xhat(x.c, x.h, x.w);
    Tensor<T> rstd(groups, 1, 1);
    Tensor<T> y(x.c, x.h, x.w);

    for (int g = 0; g < groups; ++g) {
      const T* src = x.v.data() + g * gsize;
      double mean = 0.0;
      for (size_t i = 0; i < gsize; ++i) mean += src[i];
      mean /= static_cast<double>(gsize);
      double var = 0.0;
      for (size_t i = 0; i < gsize; ++i) {
        const double d = src[i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(gsize);
      const T rs = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      rstd.v[g] = rs;
      T* xh = xhat.v.data() + g * gsize;
      for (size_t i = 0; i < gsize; ++i) xh[i] = static_cast<T>((src[i] - mean) * rs);
    }
    const size_t plane = static_cast<size_t>(x.h) * x.w;
    for (int ch = 0; ch < channels; ++ch) {
      const T* xh = xhat.v.data() + ch * plane;
      T* yp = y.v.data() + ch * plane;
      for (size_t i = 0; i < plane; ++i) yp[i] = gamma.w[ch] * xh[i] + beta.w[ch];
    }
    if (tape) {
      tape->push(std::move(xhat));
      tape->push(std::move(rstd));
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, Tape<T>& tape) {
    Tensor<T> rstd = tape.pop();
    Tensor<T> xhat = tape.pop();
    const int gc = channels / groups;
    const size_t plane = static_cast<size_t>(dy.h) * dy.w;
    const size_t gsize = gc * plane;

    Tensor<T> dxhat(dy.c, dy.h, dy.w);
    for (int ch = 0; ch < channels; ++ch) {
      const T* dyp = dy.v.data() + ch * plane;
      const T* xh = xhat.v.data() + ch * plane;
      T* dxh = dxhat.v.data() + ch * plane;
      double dg = 0.0, db = 0.0;
      for (size_t i = 0; i < plane; ++i) {
        dg += static_cast<double>(dyp[i]) * xh[i];
        db += dyp[i];
        dxh[i] = gamma.w[ch] * dyp[i];
      }
      gamma.g[ch] += static_cast<T>(dg);
      beta.g[ch] += static_cast<T>(db);
    }

    Tensor<T> dx(dy.c, dy.h, dy.w);
    for (int g = 0; g < groups; ++g) {
      const T* dxh = dxhat.v.data() + g * gsize;
      const T* xh = xhat.v.data() + g * gsize;
      double m1 = 0.0, m2 = 0.0;
      for (size_t i = 0; i < gsize; ++i) {
        m1 += dxh[i];
        m2 += static_cast<double>(dxh[i]) * xh[i];
      }
      m1 /= static_cast<double>(gsize);
      m2 /= static_cast<double>(gsize);
      T* dxp = dx.v.data() + g * gsize;
      const T rs = rstd.v[g];
      for (size_t i = 0; i < gsize; ++i)
        dxp[i] = static_cast<T>(rs * (dxh[i] - m1 - xh[i] * m2));
    }
    return dx;
  }
};

template <typename T>
class SiLU {
 public:
  Tensor<T> forward(const Tensor<T>& x, Tape<T>* tape) {
    Tensor<T> y(x.c, x.h, x.w);
    for (size_t i = 0; i < x.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x.v[i]));
      y.v[i] = x.v[i] * s;
    }
    if (tape) tape->push(x);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, Tape<T>& tape) {
    Tensor<T> x = tape.pop();
    Tensor<T> dx(x.c, x.h, x.w);
    for (size_t i = 0; i < x.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x.v[i]));
      dx.v[i] = dy.v[i] * s * (T(1) + x.v[i] * (T(1) - s));
    }
    return dx;
  }
};

template <typename T>
class Linear {
 public:
  Param<T> weight, bias;  // weight row-major [out][in]
  int in_n = 0, out_n = 0;

  void configure(int in_features, int out_features, Rng& rng) {
    in_n = in_features;
    out_n = out_features;
    weight.init(static_cast<size_t>(out_n) * in_n);
    bias.init(out_n);
    const double std_dev = std::sqrt(1.0 / in_n);
    for (auto& x : weight.w) x = static_cast<T>(rng.normal() * std_dev);
  }

  void params(ParamRefs<T>& out) {
    out.push_back(&weight);
    out.push_back(&bias);
  }

  std::vector<T> forward(const std::vector<T>& x, Tape<T>* tape) {
    if (static_cast<int>(x.size()) != in_n) throw std::invalid_argument("Linear: size mismatch");
    std::vector<T> y(out_n);
    for (int o = 0; o < out_n; ++o) {
      T acc = bias.w[o];
      const T* row = weight.w.data() + static_cast<size_t>(o) * in_n;
      for (int i = 0; i < in_n; ++i) acc += row[i] * x[i];
      y[o] = acc;
    }
    if (tape) {
      Tensor<T> keep(in_n, 1, 1);
      keep.v = x;
      tape->push(std::move(keep));
    }
    return y;
  }

  std::vector<T> backward(const std::vector<T>& dy, Tape<T>& tape) {
    Tensor<T> x = tape.pop();
    std::vector<T> dx(in_n, T(0));
    for (int o = 0; o < out_n; ++o) {
      const T d = dy[o];
      T* grow = weight.g.data() + static_cast<size_t>(o) * in_n;
      const T* row = weight.w.data() + static_cast<size_t>(o) * in_n;
      for (int i = 0; i < in_n; ++i) {
        grow[i] += d * x.v[i];
        dx[i] += d * row[i];
      }
      bias.g[o] += d;
    }
    return dx;
  }
};

// Nearest-neighbour 2x upsample.
template <typename T>
inline Tensor<T> upsample2x(const Tensor<T>& x) {
  Tensor<T> y(x.c, x.h * 2, x.w * 2);
  for (int ch = 0; ch < x.c; ++ch)
    for (int yy = 0; yy < y.h; ++yy)
      for (int xx = 0; xx < y.w; ++xx) y.at(ch, yy, xx) = x.at(ch, yy / 2, xx / 2);
  return y;
}

template <typename T>
inline Tensor<T> upsample2x_backward(const Tensor<T>& dy) {
  Tensor<T> dx(dy.c, dy.h / 2, dy.w / 2);
  for (int ch = 0; ch < dy.c; ++ch)
    for (int yy = 0; yy < dy.h; ++yy)
      for (int xx = 0; xx < dy.w; ++xx) dx.at(ch, yy / 2, xx / 2) += dy.at(ch, yy, xx);
  return dx;
}

template <typename T>
inline Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("concat: spatial mismatch");
  Tensor<T> y(a.c + b.c, a.h, a.w);
  std::copy(a.v.begin(), a.v.end(), y.v.begin());
  std::copy(b.v.begin(), b.v.end(), y.v.begin() + a.v.size());
  return y;
}

template <typename T>
inline void split_channels(const Tensor<T>& dy, Tensor<T>& da, Tensor<T>& db, int ca) {
  da = Tensor<T>(ca, dy.h, dy.w);
  db = Tensor<T>(dy.c - ca, dy.h, dy.w);
  std::copy(dy.v.begin(), dy.v.begin() + da.v.size(), da.v.begin());
  std::copy(dy.v.begin() + da.v.size(), dy.v.end(), db.v.begin());
}

// Standard sinusoidal embedding: [sin(t*f_i), cos(t*f_i)] with
// log-spaced frequencies.
template <typename T>
inline std::vector<T> sinusoidal_embedding(double t, int dim) {
  const int half = dim / 2;
  std::vector<T> e(dim);
  for (int i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * i / std::max(1, half - 1));
    e[i] = static_cast<T>(std::sin(t * f));
    e[half + i] = static_cast<T>(std::cos(t * f));
  }
  return e;
}

template <typename T>
class Adam {
 public:
  double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int64_t t = 0;

  void step(const ParamRefs<T>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t p = 0; p < params.size(); ++p) {
        m_[p].assign(params[p]->w.size(), T(0));
        v_[p].assign(params[p]->w.size(), T(0));
      }
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t p = 0; p < params.size(); ++p) {
      auto& P = *params[p];
      for (size_t i = 0; i < P.w.size(); ++i) {
        const double g = P.g[i];
        m_[p][i] = static_cast<T>(beta1 * m_[p][i] + (1.0 - beta1) * g);
        v_[p][i] = static_cast<T>(beta2 * v_[p][i] + (1.0 - beta2) * g * g);
        P.w[i] -= static_cast<T>(lr * (m_[p][i] / bc1) / (std::sqrt(v_[p][i] / bc2) + eps));
      }
    }
  }

 private:
  std::vector<std::vector<T>> m_, v_;
};

template <typename T>
inline void zero_grads(const ParamRefs<T>& params) {
  for (auto* p : params) std::fill(p->g.begin(), p->g.end(), T(0));
}

template <typename T>
inline void scale_grads(const ParamRefs<T>& params, T s) {
  for (auto* p : params)
    for (auto& g : p->g) g *= s;
}

template <typename T>
inline bool grads_finite(const ParamRefs<T>& params) {
  for (auto* p : params)
    for (T g : p->g)
      if (!std::isfinite(static_cast<double>(g))) return false;
  return true;
}

template <typename T>
inline size_t param_count(const ParamRefs<T>& params) {
  size_t n = 0;
  for (auto* p : params) n += p->w.size();
  return n;
}

// Flat (de)serialization in registration order.
template <typename T>
inline std::vector<float> flatten_params(const ParamRefs<T>& params) {
  std::vector<float> out;
  out.reserve(param_count(params));
  for (auto* p : params)
    for (T x : p->w) out.push_back(static_cast<float>(x));
  return out;
}

template <typename T>
inline void unflatten_params(const ParamRefs<T>& params, const std::vector<float>& flat) {
  if (flat.size() != param_count(params))
    throw std::runtime_error("unflatten_params: size mismatch");
  size_t k = 0;
  for (auto* p : params)
    for (auto& x : p->w) x = static_cast<T>(flat[k++]);
}

}  // namespace splatfix::nn

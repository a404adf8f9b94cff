#include "splatfix/codec.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "splatfix/hash.hpp"
#include "splatfix/serial.hpp"

namespace splatfix {

using nlohmann::json;

nn::Tensor<float> tensor_from_image(const Image& img) {
  nn::Tensor<float> t(img.channels, img.height, img.width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) t.at(c, y, x) = static_cast<float>(img.at(y, x, c));
  return t;
}

Image image_from_tensor(const nn::Tensor<float>& t, bool clamp) {
  Image img(t.w, t.h, t.c);
  for (int c = 0; c < t.c; ++c)
    for (int y = 0; y < t.h; ++y)
      for (int x = 0; x < t.w; ++x) {
        double v = static_cast<double>(t.at(c, y, x));
        if (clamp) v = std::min(1.0, std::max(0.0, v));
        img.at(y, x, c) = v;
      }
  return img;
}

void Codec::configure(const CodecConfig& cfg, uint64_t seed) {
  const int n = static_cast<int>(cfg.hidden.size());
  if (n < 1) throw std::invalid_argument("Codec: hidden widths empty");
  if (cfg.downsample != (1 << (n - 1)))
    throw std::invalid_argument("Codec: downsample must be 2^(hidden levels - 1)");
  if (cfg.latent_channels < 1) throw std::invalid_argument("Codec: latent_channels must be >= 1");
  cfg_ = cfg;
  frozen_ = false;
  Rng rng = Rng::stream(seed, "codec_init");

  enc_convs_.assign(n + 1, {});
  enc_gns_.assign(n, {});
  enc_convs_[0].configure(3, cfg.hidden[0], 3, 1, rng);
  enc_gns_[0].configure(cfg.hidden[0]);
  for (int i = 1; i < n; ++i) {
    enc_convs_[i].configure(cfg.hidden[i - 1], cfg.hidden[i], 3, 2, rng);
    enc_gns_[i].configure(cfg.hidden[i]);
  }
  enc_convs_[n].configure(cfg.hidden[n - 1], 2 * cfg.latent_channels, 3, 1, rng);

  dec_convs_.assign(n + 1, {});
  dec_gns_.assign(n, {});
  dec_convs_[0].configure(cfg.latent_channels, cfg.hidden[n - 1], 3, 1, rng);
  dec_gns_[0].configure(cfg.hidden[n - 1]);
  for (int i = 1; i < n; ++i) {
    dec_convs_[i].configure(cfg.hidden[n - i], cfg.hidden[n - 1 - i], 3, 1, rng);
    dec_gns_[i].configure(cfg.hidden[n - 1 - i]);
  }
  dec_convs_[n].configure(cfg.hidden[0], 3, 3, 1, rng);
}

std::string Codec::descriptor() const {
  std::ostringstream os;
  os << "codec(f=" << cfg_.downsample << ",c=" << cfg_.latent_channels << ",hidden=";
  for (size_t i = 0; i < cfg_.hidden.size(); ++i) os << (i ? "-" : "") << cfg_.hidden[i];
  os << ",gn=8)";
  return os.str();
}

nn::ParamRefs<float> Codec::params() {
  nn::ParamRefs<float> ps;
  for (auto& c : enc_convs_) c.params(ps);
  for (auto& g : enc_gns_) g.params(ps);
  for (auto& c : dec_convs_) c.params(ps);
  for (auto& g : dec_gns_) g.params(ps);
  return ps;
}

void Codec::encode_dist(const nn::Tensor<float>& x, nn::Tensor<float>& mu,
                        nn::Tensor<float>& logvar, nn::Tape<float>* tape) {
  if (x.h % cfg_.downsample != 0 || x.w % cfg_.downsample != 0)
    throw std::invalid_argument("Codec: resolution not divisible by downsample factor");
  const int n = static_cast<int>(cfg_.hidden.size());
  nn::Tensor<float> h = enc_convs_[0].forward(x, tape);
  h = enc_gns_[0].forward(h, tape);
  h = silu_.forward(h, tape);
  for (int i = 1; i < n; ++i) {
    h = enc_convs_[i].forward(h, tape);
    h = enc_gns_[i].forward(h, tape);
    h = silu_.forward(h, tape);
  }
  h = enc_convs_[n].forward(h, tape);
  nn::split_channels(h, mu, logvar, cfg_.latent_channels);
}

nn::Tensor<float> Codec::encode_backward(const nn::Tensor<float>& dmu,
                                         const nn::Tensor<float>& dlogvar, nn::Tape<float>& tape) {
  const int n = static_cast<int>(cfg_.hidden.size());
  nn::Tensor<float> dh = nn::concat_channels(dmu, dlogvar);
  dh = enc_convs_[n].backward(dh, tape);
  for (int i = n - 1; i >= 1; --i) {
    dh = silu_.backward(dh, tape);
    dh = enc_gns_[i].backward(dh, tape);
    dh = enc_convs_[i].backward(dh, tape);
  }
  dh = silu_.backward(dh, tape);
  dh = enc_gns_[0].backward(dh, tape);
  return enc_convs_[0].backward(dh, tape);
}

nn::Tensor<float> Codec::decode_raw(const nn::Tensor<float>& z, nn::Tape<float>* tape) {
  if (z.c != cfg_.latent_channels) throw std::invalid_argument("Codec: latent channel mismatch");
  const int n = static_cast<int>(cfg_.hidden.size());
  nn::Tensor<float> h = dec_convs_[0].forward(z, tape);
  h = dec_gns_[0].forward(h, tape);
  h = silu_.forward(h, tape);
  for (int i = 1; i < n; ++i) {
    h = nn::upsample2x(h);
    h = dec_convs_[i].forward(h, tape);
    h = dec_gns_[i].forward(h, tape);
    h = silu_.forward(h, tape);
  }
  return dec_convs_[n].forward(h, tape);
}

nn::Tensor<float> Codec::decode_backward(const nn::Tensor<float>& dy, nn::Tape<float>& tape) {
  const int n = static_cast<int>(cfg_.hidden.size());
  nn::Tensor<float> dh = dec_convs_[n].backward(dy, tape);
  for (int i = n - 1; i >= 1; --i) {
    dh = silu_.backward(dh, tape);
    dh = dec_gns_[i].backward(dh, tape);
    dh = dec_convs_[i].backward(dh, tape);
    dh = nn::upsample2x_backward(dh);
  }
  dh = silu_.backward(dh, tape);
  dh = dec_gns_[0].backward(dh, tape);
  return dec_convs_[0].backward(dh, tape);
}

nn::Tensor<float> Codec::encode(const Image& img) {
  nn::Tensor<float> mu, logvar;
  encode_dist(tensor_from_image(img), mu, logvar, nullptr);
  return mu;
}

Image Codec::decode(const nn::Tensor<float>& z) { return image_from_tensor(decode_raw(z, nullptr)); }

Codec pretrain_codec(const std::vector<Image>& images, const CodecConfig& cfg, int iters,
                     uint64_t seed, CodecTrainReport* report) {
  if (images.empty()) throw std::invalid_argument("pretrain_codec: no images");
  for (const auto& im : images) {
    if (im.width != images[0].width || im.height != images[0].height || im.channels != 3)
      throw std::invalid_argument("pretrain_codec: images must share one RGB resolution");
    if (im.width % cfg.downsample != 0 || im.height % cfg.downsample != 0)
      throw std::invalid_argument("pretrain_codec: resolution not divisible by downsample factor");
  }

  Codec codec;
  codec.configure(cfg, seed);
  CodecTrainConfig tc;
  tc.seed = seed;
  nn::Adam<float> opt;
  opt.lr = static_cast<float>(tc.lr);
  Rng rng = Rng::stream(seed, "codec_train");
  auto params = codec.params();

  CodecTrainReport rep;
  nn::Tape<float> tape;
  for (int iter = 0; iter < iters; ++iter) {
    nn::zero_grads(params);
    double total = 0.0;
    for (int b = 0; b < tc.batch_size; ++b) {
      const Image& img = images[rng.uniform_int(static_cast<int>(images.size()))];
      nn::Tensor<float> x = tensor_from_image(img);
      tape.clear();
      nn::Tensor<float> mu, logvar;
      codec.encode_dist(x, mu, logvar, &tape);

      nn::Tensor<float> eps(mu.c, mu.h, mu.w), z(mu.c, mu.h, mu.w);
      for (size_t k = 0; k < mu.size(); ++k) {
        eps.v[k] = static_cast<float>(rng.normal());
        z.v[k] = mu.v[k] + std::exp(0.5f * logvar.v[k]) * eps.v[k];
      }
      nn::Tensor<float> recon = codec.decode_raw(z, &tape);

      const double inv_pix = 1.0 / static_cast<double>(recon.size());
      const double inv_lat = 1.0 / static_cast<double>(mu.size());
      const double inv_b = 1.0 / tc.batch_size;
      double l1 = 0.0, kl = 0.0;
      nn::Tensor<float> drecon(recon.c, recon.h, recon.w);
      for (size_t k = 0; k < recon.size(); ++k) {
        const double d = static_cast<double>(recon.v[k]) - static_cast<double>(x.v[k]);
        l1 += std::abs(d) * inv_pix;
        drecon.v[k] = static_cast<float>((d > 0 ? 1.0 : d < 0 ? -1.0 : 0.0) * inv_pix * inv_b);
      }
      nn::Tensor<float> dz = codec.decode_backward(drecon, tape);
      nn::Tensor<float> dmu(mu.c, mu.h, mu.w), dlogvar(mu.c, mu.h, mu.w);
      for (size_t k = 0; k < mu.size(); ++k) {
        const double m = mu.v[k], lv = logvar.v[k], ev = std::exp(lv);
        kl += 0.5 * (m * m + ev - 1.0 - lv) * inv_lat;
        dmu.v[k] = static_cast<float>(dz.v[k] + tc.kl_weight * m * inv_lat * inv_b);
        dlogvar.v[k] = static_cast<float>(dz.v[k] * eps.v[k] * 0.5 * std::exp(0.5 * lv) +
                                          tc.kl_weight * 0.5 * (ev - 1.0) * inv_lat * inv_b);
      }
      codec.encode_backward(dmu, dlogvar, tape);
      total += (l1 + tc.kl_weight * kl) * inv_b;
    }
    if (!nn::grads_finite(params) || !std::isfinite(total)) {
      nn::zero_grads(params);
      ++rep.rejected_steps;
    } else {
      opt.step(params);
    }
    rep.final_loss = total;
    if (iter % 50 == 0) rep.loss_history.push_back(total);
  }
  rep.iterations = iters;
  if (report) *report = rep;
  codec.freeze();
  return codec;
}

void save_codec(const std::string& dir, Codec& codec, int64_t trained_iterations) {
  ensure_dir(dir);
  const CodecConfig& c = codec.config();
  json m;
  m["schema_version"] = 1;
  m["format"] = "codec";
  m["architecture"] = codec.descriptor();
  m["architecture_hash"] = hex64(fnv1a64(codec.descriptor()));
  m["codec"] = {{"downsample", c.downsample},
                {"latent_channels", c.latent_channels},
                {"hidden", c.hidden}};
  m["frozen"] = codec.frozen();
  m["trained_iterations"] = trained_iterations;
  write_text_file(dir + "/manifest.json", m.dump(2) + "\n");
  const std::vector<float> flat = nn::flatten_params(codec.params());
  write_blob_f32(dir + "/weights.f32", flat.data(), flat.size());
}

void load_codec(const std::string& dir, Codec& codec) {
  const json m = json::parse(read_text_file(dir + "/manifest.json"));
  if (m.at("format").get<std::string>() != "codec")
    throw std::runtime_error("load_codec: not a codec checkpoint: " + dir);
  CodecConfig cfg;
  const json& c = m.at("codec");
  cfg.downsample = c.at("downsample").get<int>();
  cfg.latent_channels = c.at("latent_channels").get<int>();
  cfg.hidden = c.at("hidden").get<std::vector<int>>();
  codec.configure(cfg, 0);
  if (m.at("architecture_hash").get<std::string>() != hex64(fnv1a64(codec.descriptor())))
    throw std::runtime_error("load_codec: architecture hash mismatch in " + dir);
  nn::unflatten_params(codec.params(), read_blob_f32(dir + "/weights.f32"));
  if (m.at("frozen").get<bool>()) codec.freeze();
}

}  // namespace splatfix

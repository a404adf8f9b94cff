#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "splatfix/image.hpp"
#include "splatfix/nn.hpp"
#include "splatfix/rng.hpp"

namespace splatfix {

struct CodecConfig {
  int downsample = 4;  // must equal 2^(hidden.size()-1)
  int latent_channels = 4;
  std::vector<int> hidden = {32, 64, 96};
};

// Convolutional autoencoder with a diagonal-Gaussian bottleneck. encode()
// returns the posterior mean, so the pipeline sees a deterministic codec; the
// stochastic path only exists inside pretraining.
class Codec {
 public:
  void configure(const CodecConfig& cfg, uint64_t seed);
  const CodecConfig& config() const { return cfg_; }
  std::string descriptor() const;
  nn::ParamRefs<float> params();

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  nn::Tensor<float> encode(const Image& img);
  Image decode(const nn::Tensor<float>& z);

  // Training-side entry points (raw linear decode output, tape-recorded).
  void encode_dist(const nn::Tensor<float>& x, nn::Tensor<float>& mu, nn::Tensor<float>& logvar,
                   nn::Tape<float>* tape);
  nn::Tensor<float> decode_raw(const nn::Tensor<float>& z, nn::Tape<float>* tape);
  nn::Tensor<float> decode_backward(const nn::Tensor<float>& dy, nn::Tape<float>& tape);
  nn::Tensor<float> encode_backward(const nn::Tensor<float>& dmu, const nn::Tensor<float>& dlogvar,
                                    nn::Tape<float>& tape);

 private:
  CodecConfig cfg_;
  bool frozen_ = false;
  std::vector<nn::Conv2d<float>> enc_convs_;  // 3->h0 s1, h_{i-1}->h_i s2..., h_last->2c
  std::vector<nn::GroupNorm<float>> enc_gns_;
  std::vector<nn::Conv2d<float>> dec_convs_;  // c->h_last s1, (up2, h_i->h_{i-1})..., h0->3
  std::vector<nn::GroupNorm<float>> dec_gns_;
  nn::SiLU<float> silu_;
};

struct CodecTrainConfig {
  int iterations = 3000;
  int batch_size = 4;
  double lr = 1e-3;
  double kl_weight = 1e-6;
  uint64_t seed = 1;
};

struct CodecTrainReport {
  int iterations = 0;
  int rejected_steps = 0;
  double final_loss = 0.0;
  std::vector<double> loss_history;  // sampled every 50 iterations
};

// Trains on the image corpus and returns a frozen codec.
Codec pretrain_codec(const std::vector<Image>& images, const CodecConfig& cfg, int iters,
                     uint64_t seed, CodecTrainReport* report = nullptr);

void save_codec(const std::string& dir, Codec& codec, int64_t trained_iterations);
// Configures codec from the manifest (including frozen state) and loads weights.
void load_codec(const std::string& dir, Codec& codec);

nn::Tensor<float> tensor_from_image(const Image& img);
Image image_from_tensor(const nn::Tensor<float>& t, bool clamp = true);

}  // namespace splatfix

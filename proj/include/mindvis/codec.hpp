#pragma once

// Image <-> latent maps for the diffusion model. Latents are planar [c, h, w]
// tensors with values on the image scale ([0, 1] for the fixed codecs).

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mindvis/autograd.hpp"
#include "mindvis/checkpoint.hpp"
#include "mindvis/image.hpp"
#include "mindvis/nn.hpp"

namespace mindvis::codec {

enum class CodecKind { Identity, Downsample, TinyAutoencoder };

CodecKind parse_codec_kind(const std::string& s);
std::string to_string(CodecKind k);

struct CodecConfig {
  CodecKind kind = CodecKind::Downsample;
  int image_size = 32;
  int latent_channels = 3;  // tiny autoencoder only
  int hidden_channels = 16;
  double train_mse_threshold = 0.01;
};

struct AutoencoderTraining {
  int steps = 1500;
  int batch_size = 8;
  double lr = 2e-3;
  double crop_ratio = 0.2;
  std::uint64_t seed = 3;
};

class LatentCodec {
 public:
  explicit LatentCodec(const CodecConfig& cfg, std::uint64_t seed = 0);
  LatentCodec(const LatentCodec&) = delete;
  LatentCodec& operator=(const LatentCodec&) = delete;
  LatentCodec(LatentCodec&&) = default;
  LatentCodec& operator=(LatentCodec&&) = default;

  const CodecConfig& config() const { return cfg_; }
  std::string id() const;
  std::vector<int> latent_shape() const;
  bool trained() const { return trained_; }

  Tensor encode_image(const Image& image) const;
  Image decode_latent(const Tensor& latent) const;

  // Fits the tiny autoencoder on the given images; returns the final
  // round-trip MSE over them. No-op for the fixed codecs.
  double train(const std::vector<Image>& images, const AutoencoderTraining& opts);
  double round_trip_mse(const std::vector<Image>& images) const;

  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);

 private:
  Var ae_encode(Tape& tape, Var x) const;
  Var ae_decode(Tape& tape, Var z) const;

  CodecConfig cfg_;
  ParamStore store_;
  nn::Conv2d e1_, e2_, e3_, d1_, d2_, d3_;
  bool trained_ = false;
};

}  // namespace mindvis::codec

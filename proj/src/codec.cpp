#include "mindvis/codec.hpp"

#include <algorithm>

#include "mindvis/data.hpp"
#include "mindvis/errors.hpp"
#include "mindvis/optim.hpp"

namespace mindvis::codec {

CodecKind parse_codec_kind(const std::string& s) {
  if (s == "identity") return CodecKind::Identity;
  if (s == "downsample") return CodecKind::Downsample;
  if (s == "tiny-autoencoder") return CodecKind::TinyAutoencoder;
  throw ConfigError("unknown codec kind '" + s + "' (expected identity, downsample or tiny-autoencoder)");
}

std::string to_string(CodecKind k) {
  switch (k) {
    case CodecKind::Identity: return "identity";
    case CodecKind::Downsample: return "downsample";
    default: return "tiny-autoencoder";
  }
}

namespace {

Tensor pool2(const Tensor& x) {
  const int c = x.dim(0), h = x.dim(1) / 2, w = x.dim(2) / 2;
  Tensor out({c, h, w});
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < h; ++y)
      for (int z = 0; z < w; ++z) {
        auto at = [&](int yy, int xx) { return x[(static_cast<std::size_t>(k) * x.dim(1) + yy) * x.dim(2) + xx]; };
        out[(static_cast<std::size_t>(k) * h + y) * w + z] =
            0.25 * (at(2 * y, 2 * z) + at(2 * y, 2 * z + 1) + at(2 * y + 1, 2 * z) + at(2 * y + 1, 2 * z + 1));
      }
  return out;
}

Tensor upsample2(const Tensor& x) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < 2 * h; ++y)
      for (int z = 0; z < 2 * w; ++z)
        out[(static_cast<std::size_t>(k) * 2 * h + y) * 2 * w + z] = x[(static_cast<std::size_t>(k) * h + y / 2) * w + z / 2];
  return out;
}

}  // namespace

LatentCodec::LatentCodec(const CodecConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.image_size < 2) throw ConfigError("codec: image_size must be >= 2");
  if (cfg.kind != CodecKind::Identity && cfg.image_size % 2 != 0) {
    throw ConfigError("codec: downsampling codecs need an even image size");
  }
  if (cfg.kind == CodecKind::Identity) trained_ = true;
  if (cfg.kind == CodecKind::Downsample) trained_ = true;
  if (cfg.kind != CodecKind::TinyAutoencoder) return;
  if (cfg.latent_channels != 3) throw ConfigError("codec: the tiny autoencoder uses 3 latent channels");
  Rng rng(seed);
  const int h = cfg.hidden_channels;
  e1_ = nn::Conv2d::make(store_, "codec.e1", 3, h, 3, 1, 1, rng);
  e2_ = nn::Conv2d::make(store_, "codec.e2", h, h, 3, 2, 1, rng);
  e3_ = nn::Conv2d::make(store_, "codec.e3", h, cfg.latent_channels, 1, 1, 0, rng, true);
  d1_ = nn::Conv2d::make(store_, "codec.d1", cfg.latent_channels, h, 3, 1, 1, rng);
  d2_ = nn::Conv2d::make(store_, "codec.d2", h, h, 3, 1, 1, rng);
  d3_ = nn::Conv2d::make(store_, "codec.d3", h, 3, 3, 1, 1, rng, true);
}

std::string LatentCodec::id() const {
  return to_string(cfg_.kind) + "-" + std::to_string(cfg_.image_size);
}

std::vector<int> LatentCodec::latent_shape() const {
  if (cfg_.kind == CodecKind::Identity) return {3, cfg_.image_size, cfg_.image_size};
  return {cfg_.latent_channels, cfg_.image_size / 2, cfg_.image_size / 2};
}

// Both halves are residual around the fixed pool / upsample pair, so the
// zero-initialised output convolutions start as the downsample codec.
Var LatentCodec::ae_encode(Tape& tape, Var x) const {
  Var h = silu(e1_(tape, x));
  h = silu(e2_(tape, h));
  return add(avg_pool2(x), e3_(tape, h));
}

Var LatentCodec::ae_decode(Tape& tape, Var z) const {
  Var h = silu(d1_(tape, z));
  h = silu(d2_(tape, upsample_nearest2(h)));
  return add(upsample_nearest2(z), d3_(tape, h));
}

Tensor LatentCodec::encode_image(const Image& image) const {
  if (image.height != cfg_.image_size || image.width != cfg_.image_size) {
    throw ShapeError("codec " + id() + ": image is " + std::to_string(image.height) + "x" + std::to_string(image.width));
  }
  const Tensor x = image_to_tensor(image);
  switch (cfg_.kind) {
    case CodecKind::Identity: return x;
    case CodecKind::Downsample: return pool2(x);
    default: {
      Tape tape;
      return ae_encode(tape, tape.constant(x)).value();
    }
  }
}

Image LatentCodec::decode_latent(const Tensor& latent) const {
  if (latent.shape() != latent_shape()) {
    throw ShapeError("codec " + id() + ": latent shape " + shape_str(latent.shape()) + ", expected " +
                     shape_str(latent_shape()));
  }
  switch (cfg_.kind) {
    case CodecKind::Identity: return tensor_to_image(latent);
    case CodecKind::Downsample: return tensor_to_image(upsample2(latent));
    default: {
      if (!trained_) throw InvalidArgument("codec: the tiny autoencoder has not been trained");
      Tape tape;
      return tensor_to_image(ae_decode(tape, tape.constant(latent)).value());
    }
  }
}

double LatentCodec::round_trip_mse(const std::vector<Image>& images) const {
  if (images.empty()) throw InvalidArgument("round_trip_mse: no images");
  double s = 0.0;
  std::size_t n = 0;
  for (const Image& im : images) {
    const Image r = decode_latent(encode_image(im));
    for (std::size_t i = 0; i < im.pixels.size(); ++i) s += (r.pixels[i] - im.pixels[i]) * (r.pixels[i] - im.pixels[i]);
    n += im.pixels.size();
  }
  return s / static_cast<double>(n);
}

double LatentCodec::train(const std::vector<Image>& images, const AutoencoderTraining& opts) {
  if (cfg_.kind != CodecKind::TinyAutoencoder) return round_trip_mse(images);
  if (images.empty()) throw InvalidArgument("codec training: no images");
  OptimizerConfig oc;
  oc.peak_lr = opts.lr;
  oc.weight_decay = 0.0;
  AdamW opt({&store_}, oc);
  const LrSchedule sched(opts.lr, std::min(50, opts.steps), opts.steps);
  for (int step = 0; step < opts.steps; ++step) {
    opt.zero_grad();
    for (int b = 0; b < opts.batch_size; ++b) {
      Rng rng = Rng::derive(opts.seed, {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b)});
      const Image& src = images[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(images.size()) - 1))];
      const Tensor x = image_to_tensor(data::random_crop_image(src, opts.crop_ratio, rng));
      Tape tape;
      Var xv = tape.constant(x);
      Var loss = scale(mse(ae_decode(tape, ae_encode(tape, xv)), xv), 1.0 / opts.batch_size);
      tape.backward(loss);
    }
    clip_grad_norm({&store_}, 1.0);
    opt.step(sched.at(step));
  }
  trained_ = true;
  return round_trip_mse(images);
}

void LatentCodec::save(Checkpoint& ckpt) const {
  ckpt.meta["codec"] = {{"kind", to_string(cfg_.kind)},
                        {"image_size", cfg_.image_size},
                        {"latent_channels", cfg_.latent_channels},
                        {"hidden_channels", cfg_.hidden_channels},
                        {"trained", trained_}};
  put_params(ckpt, store_);
}

void LatentCodec::load(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("codec")) throw FormatError("checkpoint holds no codec");
  const auto& m = ckpt.meta["codec"];
  if (m.at("kind").get<std::string>() != to_string(cfg_.kind) || m.at("image_size").get<int>() != cfg_.image_size) {
    throw ConfigError("codec checkpoint is " + m.at("kind").get<std::string>() + " at " +
                      std::to_string(m.at("image_size").get<int>()) + ", config wants " + id());
  }
  get_params(ckpt, store_);
  trained_ = m.at("trained").get<bool>();
}

}  // namespace mindvis::codec

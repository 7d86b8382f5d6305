#pragma once

// Training loops: masked-signal pretraining of the brain encoder, pretraining
// of the label-conditioned image denoiser, and the conditional finetuning that
// joins the two under the freeze policy. All randomness comes from streams
// derived from (seed, epoch, sample), so a run resumed from a checkpoint
// continues exactly where an uninterrupted run would be.

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "mindvis/checkpoint.hpp"
#include "mindvis/codec.hpp"
#include "mindvis/conditioning.hpp"
#include "mindvis/data.hpp"
#include "mindvis/diffusion.hpp"
#include "mindvis/mbm.hpp"
#include "mindvis/optim.hpp"

namespace mindvis::train {

struct EpochRecord {
  int epoch = 0;  // 1-based
  double loss = 0.0;
  double lr = 0.0;  // at the last step of the epoch
  double grad_norm = 0.0;  // pre-clip, last step
};

void write_loss_csv(const std::vector<EpochRecord>& log, const std::string& path);

// ---- Stage A ----

struct StageAConfig {
  mbm::MbmConfig mbm;
  OptimizerConfig opt;
  double sparsify_fraction = 0.2;
  std::uint64_t seed = 1;
};

class StageATrainer {
 public:
  StageATrainer(const StageATrainer&) = delete;
  StageATrainer& operator=(const StageATrainer&) = delete;
  // signals must share one length, a multiple of the patch size.
  StageATrainer(const StageAConfig& cfg, std::vector<std::vector<double>> signals, std::vector<int> primary_patch,
                std::string config_hash);

  // Runs one epoch; returns its mean per-sample loss.
  double run_epoch();
  // Runs until `epoch() == until` (capped at max_epochs).
  void train_until(int until);

  int epoch() const { return epoch_; }
  long step() const { return optim_.steps_taken(); }
  const std::vector<EpochRecord>& log() const { return log_; }
  mbm::MbmModel& model() { return model_; }
  const mbm::MbmModel& model() const { return model_; }
  int steps_per_epoch() const;

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);

 private:
  StageAConfig cfg_;
  std::vector<std::vector<double>> signals_;
  std::vector<int> primary_patch_;
  std::string hash_;
  mbm::MbmModel model_;
  AdamW optim_;
  LrSchedule schedule_;
  int epoch_ = 0;
  std::vector<EpochRecord> log_;
};

// Input prepared for the encoder from one normalised, padded signal.
Tensor signal_patches(const std::vector<double>& signal, int patch_size);

// Held-out masked-recovery correlation of a trained model, one value per
// signal; mask plans come from the given seed.
std::vector<double> recovery_scores(const mbm::MbmModel& model, const std::vector<std::vector<double>>& signals,
                                    std::uint64_t seed, const std::vector<int>* primary_patch = nullptr);

// ---- Denoiser pretraining ----

struct DiffusionConfig {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  diffusion::NoiseSchedule schedule() const;
};

// Image latent in diffusion space: 2 * codec latent - 1.
Tensor to_diffusion_space(const codec::LatentCodec& codec, const Image& image);
Image from_diffusion_space(const codec::LatentCodec& codec, const Tensor& z);
// Bound on clean diffusion-space latents used to clip sampler predictions:
// 1 for the fixed codecs, 0 (no clipping) for the learned autoencoder.
double latent_clip(const codec::LatentCodec& codec);

struct LdmPretrainConfig {
  cond::UNetConfig unet;
  DiffusionConfig diffusion;
  int M = 8;
  int steps = 3000;
  int batch_size = 4;
  double lr = 1e-3;
  double crop_ratio = 0.2;
  std::uint64_t seed = 11;
};

// Class-label context for the denoiser's cross-attention: one learned
// [M, tau_dim] table per class, parameters "label.<c>".
class LabelContext {
 public:
  LabelContext(ParamStore& store, int classes, int M, int tau_dim, Rng& rng);
  Var operator()(Tape& tape, int class_id) const;
  int classes() const { return static_cast<int>(rows_.size()); }

 private:
  std::vector<Parameter*> rows_;
};

struct PretrainedLdm {
  std::unique_ptr<cond::UNet> unet;
  ParamStore label_store;
  std::vector<double> losses;  // per step
};

PretrainedLdm pretrain_ldm(const LdmPretrainConfig& cfg, const codec::LatentCodec& codec,
                           const std::vector<Image>& images, const std::vector<int>& labels);
// Sample of the label-conditioned denoiser for one class.
Image sample_label(const PretrainedLdm& ldm, const LdmPretrainConfig& cfg, const codec::LatentCodec& codec, int class_id,
                   int steps, Rng& rng);

// ---- Stage B ----

struct StageBConfig {
  OptimizerConfig opt;
  DiffusionConfig diffusion;
  cond::CondMode mode = cond::CondMode::CT;
  int M = 8;
  double crop_ratio = 0.2;
  std::uint64_t seed = 1;
};

// Encoder + projector + denoiser: fMRI signal in, image latent out.
class BrainDecoder {
 public:
  BrainDecoder(mbm::MbmModel encoder, std::unique_ptr<cond::UNet> unet, int M, std::uint64_t projector_seed);

  mbm::MbmModel& encoder() { return encoder_; }
  const mbm::MbmModel& encoder() const { return encoder_; }
  cond::UNet& unet() { return *unet_; }
  const cond::UNet& unet() const { return *unet_; }
  ParamStore& projector_params() { return proj_store_; }
  const ParamStore& projector_params() const { return proj_store_; }
  const cond::ConditionProjector& projector() const { return *projector_; }
  std::vector<ParamStore*> stores();
  std::vector<const ParamStore*> stores() const;

  diffusion::ConditionVars condition(Tape& tape, const std::vector<double>& signal) const;
  diffusion::ConditionBundle condition(const std::vector<double>& signal) const;

  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);

 private:
  mbm::MbmModel encoder_;
  std::unique_ptr<cond::UNet> unet_;
  ParamStore proj_store_;
  std::unique_ptr<cond::ConditionProjector> projector_;
};

class StageBTrainer {
 public:
  StageBTrainer(const StageBTrainer&) = delete;
  StageBTrainer& operator=(const StageBTrainer&) = delete;
  StageBTrainer(const StageBConfig& cfg, BrainDecoder& model, const codec::LatentCodec& codec,
                std::vector<std::vector<double>> signals, std::vector<Image> images, std::string config_hash);

  double run_epoch();
  void train_until(int until);

  int epoch() const { return epoch_; }
  const std::vector<EpochRecord>& log() const { return log_; }
  // Throws PolicyViolation when any frozen tensor differs from its value at
  // construction.
  void verify_frozen() const;

  Checkpoint checkpoint() const;
  void restore(const Checkpoint& ckpt);

 private:
  StageBConfig cfg_;
  BrainDecoder& model_;
  const codec::LatentCodec& codec_;
  std::vector<std::vector<double>> signals_;
  std::vector<Image> images_;
  std::string hash_;
  diffusion::NoiseSchedule schedule_;
  std::map<std::string, Tensor> frozen_;
  std::unique_ptr<AdamW> optim_;
  LrSchedule lr_;
  int epoch_ = 0;
  std::vector<EpochRecord> log_;
};

enum class SamplerKind { Ddpm, Plms };
SamplerKind parse_sampler(const std::string& s);
std::string to_string(SamplerKind k);

// Generated image for one signal. steps is ignored by the DDPM sampler.
Image decode_signal(const BrainDecoder& model, const codec::LatentCodec& codec, const std::vector<double>& signal,
                    const diffusion::NoiseSchedule& schedule, SamplerKind sampler, int steps, Rng& rng);

}  // namespace mindvis::train

#include "mindvis/trainer.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "mindvis/errors.hpp"

namespace mindvis::train {

namespace {

constexpr std::uint64_t kPermStream = 0x5045524dULL;
constexpr std::uint64_t kSampleStream = 0x53414d50ULL;

long ceil_div(long a, long b) { return (a + b - 1) / b; }

nlohmann::json log_to_json(const std::vector<EpochRecord>& log) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : log) j.push_back({r.epoch, r.loss, r.lr, r.grad_norm});
  return j;
}

std::vector<EpochRecord> log_from_json(const nlohmann::json& j) {
  std::vector<EpochRecord> out;
  for (const auto& r : j) out.push_back({r.at(0).get<int>(), r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>()});
  return out;
}

void put_optimizer(Checkpoint& ckpt, const AdamW& opt) {
  for (const auto& [k, t] : opt.state()) ckpt.tensors["optim." + k] = t;
}

std::map<std::string, Tensor> get_optimizer(const Checkpoint& ckpt) {
  std::map<std::string, Tensor> out;
  for (const auto& [k, t] : ckpt.tensors)
    if (k.rfind("optim.", 0) == 0) out.emplace(k.substr(6), t);
  return out;
}

void require_kind(const Checkpoint& ckpt, const std::string& kind) {
  const std::string got = ckpt.meta.value("kind", std::string());
  if (got != kind) throw ConfigError("expected a " + kind + " checkpoint, got '" + got + "'");
}

}  // namespace

void write_loss_csv(const std::vector<EpochRecord>& log, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << "epoch,loss,lr,grad_norm\n" << std::setprecision(17);
  for (const auto& r : log) f << r.epoch << ',' << r.loss << ',' << r.lr << ',' << r.grad_norm << '\n';
}

Tensor signal_patches(const std::vector<double>& signal, int patch_size) { return mbm::patchify(signal, patch_size); }

// ---- Stage A ----

StageATrainer::StageATrainer(const StageAConfig& cfg, std::vector<std::vector<double>> signals,
                             std::vector<int> primary_patch, std::string config_hash)
    : cfg_(cfg),
      signals_(std::move(signals)),
      primary_patch_(std::move(primary_patch)),
      hash_(std::move(config_hash)),
      model_(cfg.mbm,
             signals_.empty() ? 1 : static_cast<int>(signals_.front().size()) / std::max(1, cfg.mbm.patch_size),
             cfg.seed),
      optim_({&model_.params()}, cfg.opt),
      schedule_(cfg.opt.peak_lr, 1, 1) {
  if (signals_.empty()) throw InvalidArgument("stage A: empty dataset");
  cfg_.mbm.validate();
  cfg_.opt.validate();
  const std::size_t len = signals_.front().size();
  for (const auto& s : signals_) {
    if (s.size() != len) throw ShapeError("stage A: signals differ in length");
  }
  if (len % static_cast<std::size_t>(cfg_.mbm.patch_size) != 0) throw ShapeError("stage A: length is not patch aligned");
  if (cfg_.mbm.mask_strategy == mbm::MaskStrategy::Focus &&
      primary_patch_.size() != static_cast<std::size_t>(model_.num_patches())) {
    throw InvalidArgument("stage A: focus masking needs one region flag per patch");
  }
  const long spe = steps_per_epoch();
  schedule_ = LrSchedule(cfg_.opt.peak_lr, cfg_.opt.warmup_epochs * spe, cfg_.opt.max_epochs * spe);
}

int StageATrainer::steps_per_epoch() const {
  return static_cast<int>(ceil_div(static_cast<long>(signals_.size()), cfg_.opt.batch_size));
}

double StageATrainer::run_epoch() {
  const int n = static_cast<int>(signals_.size());
  const int e = epoch_;
  const std::vector<int> order = Rng::derive(cfg_.seed, {kPermStream, static_cast<std::uint64_t>(e)}).permutation(n);
  const int p = cfg_.mbm.patch_size;
  const std::vector<int>* labels = cfg_.mbm.mask_strategy == mbm::MaskStrategy::Focus ? &primary_patch_ : nullptr;
  double total = 0.0, lr = 0.0, gn = 0.0;
  for (int start = 0; start < n; start += cfg_.opt.batch_size) {
    const int end = std::min(n, start + cfg_.opt.batch_size);
    const double inv_b = 1.0 / static_cast<double>(end - start);
    model_.params().zero_grad();
    for (int k = start; k < end; ++k) {
      const int idx = order[static_cast<std::size_t>(k)];
      Rng rng = Rng::derive(cfg_.seed, {kSampleStream, static_cast<std::uint64_t>(e), static_cast<std::uint64_t>(idx)});
      const auto& raw = signals_[static_cast<std::size_t>(idx)];
      const Tensor input = mbm::patchify(data::random_sparsify(raw, cfg_.sparsify_fraction, rng), p);
      const Tensor target = mbm::patchify(raw, p);
      const mbm::MaskPlan plan = mbm::make_mask_plan(model_.num_patches(), cfg_.mbm.mask_ratio,
                                                     cfg_.mbm.mask_strategy, labels, rng);
      Tape tape;
      Var l;
      try {
        l = model_.loss(tape, input, target, plan);
      } catch (const NumericError& err) {
        throw NumericError("stage A diverged at epoch " + std::to_string(e + 1) + ", step " +
                           std::to_string(optim_.steps_taken()) + ", sample " + std::to_string(idx) + ": " + err.what() +
                           " (lower peak_lr or grad_clip_norm)");
      }
      total += l.value()[0];
      tape.backward(scale(l, inv_b));
    }
    gn = clip_grad_norm({&model_.params()}, cfg_.opt.grad_clip_norm);
    if (!std::isfinite(gn)) {
      throw NumericError("stage A diverged at epoch " + std::to_string(e + 1) + ": gradient norm is not finite");
    }
    lr = schedule_.at(optim_.steps_taken());
    optim_.step(lr);
  }
  ++epoch_;
  const double mean_loss = total / static_cast<double>(n);
  log_.push_back({epoch_, mean_loss, lr, gn});
  return mean_loss;
}

void StageATrainer::train_until(int until) {
  until = std::min(until, cfg_.opt.max_epochs);
  while (epoch_ < until) run_epoch();
}

Checkpoint StageATrainer::checkpoint() const {
  Checkpoint c;
  const auto& m = cfg_.mbm;
  c.meta = {{"kind", "stage_a"},
            {"config_hash", hash_},
            {"epoch", epoch_},
            {"step", optim_.steps_taken()},
            {"seed", cfg_.seed},
            {"num_patches", model_.num_patches()},
            {"mbm",
             {{"patch_size", m.patch_size},
              {"embed_dim", m.embed_dim},
              {"encoder_depth", m.encoder_depth},
              {"encoder_heads", m.encoder_heads},
              {"decoder_embed_dim", m.decoder_embed_dim},
              {"decoder_depth", m.decoder_depth},
              {"decoder_heads", m.decoder_heads},
              {"mlp_ratio", m.mlp_ratio},
              {"mask_ratio", m.mask_ratio},
              {"mask_strategy", mbm::to_string(m.mask_strategy)}}},
            {"log", log_to_json(log_)}};
  put_params(c, model_.params());
  put_optimizer(c, optim_);
  return c;
}

void StageATrainer::restore(const Checkpoint& ckpt) {
  require_kind(ckpt, "stage_a");
  require_config_hash(ckpt, hash_);
  get_params(ckpt, model_.params());
  const long step = ckpt.meta.at("step").get<long>();
  optim_.load_state(get_optimizer(ckpt), step);
  epoch_ = ckpt.meta.at("epoch").get<int>();
  log_ = log_from_json(ckpt.meta.at("log"));
}

std::vector<double> recovery_scores(const mbm::MbmModel& model, const std::vector<std::vector<double>>& signals,
                                    std::uint64_t seed, const std::vector<int>* primary_patch) {
  const int p = model.config().patch_size;
  std::vector<double> out;
  for (std::size_t i = 0; i < signals.size(); ++i) {
    Rng rng = Rng::derive(seed, {static_cast<std::uint64_t>(i)});
    const mbm::MaskPlan plan = mbm::make_mask_plan(model.num_patches(), model.config().mask_ratio,
                                                   model.config().mask_strategy, primary_patch, rng);
    const Tensor x = mbm::patchify(signals[i], p);
    const Tensor pred = model.reconstruct(x, plan);
    std::vector<double> a, b;
    for (int r : plan.masked_idx)
      for (int c = 0; c < p; ++c) {
        a.push_back(x.at(r, c));
        b.push_back(pred.at(r, c));
      }
    out.push_back(mbm::recovery_correlation(a, b));
  }
  return out;
}

// ---- Denoiser pretraining ----

diffusion::NoiseSchedule DiffusionConfig::schedule() const { return diffusion::make_schedule(T, beta_start, beta_end); }

Tensor to_diffusion_space(const codec::LatentCodec& codec, const Image& image) {
  Tensor z = codec.encode_image(image);
  for (double& v : z.values()) v = 2.0 * v - 1.0;
  return z;
}

double latent_clip(const codec::LatentCodec& codec) {
  return codec.config().kind == codec::CodecKind::TinyAutoencoder ? 0.0 : 1.0;
}

Image from_diffusion_space(const codec::LatentCodec& codec, const Tensor& z) {
  Tensor lat = z;
  for (double& v : lat.values()) v = (v + 1.0) * 0.5;
  return codec.decode_latent(lat);
}

LabelContext::LabelContext(ParamStore& store, int classes, int M, int tau_dim, Rng& rng) {
  if (classes < 1) throw InvalidArgument("label context: need at least one class");
  for (int c = 0; c < classes; ++c) rows_.push_back(&store.add("label." + std::to_string(c), nn::normal_init({M, tau_dim}, 1.0, rng)));
}

Var LabelContext::operator()(Tape& tape, int class_id) const {
  if (class_id < 0 || class_id >= classes()) throw InvalidArgument("label context: class out of range");
  return tape.param(*rows_[static_cast<std::size_t>(class_id)]);
}

PretrainedLdm pretrain_ldm(const LdmPretrainConfig& cfg, const codec::LatentCodec& codec,
                           const std::vector<Image>& images, const std::vector<int>& labels) {
  if (images.empty() || images.size() != labels.size()) throw InvalidArgument("ldm pretraining: need labelled images");
  int classes = 0;
  for (int l : labels) classes = std::max(classes, l + 1);
  PretrainedLdm out;
  cond::UNetConfig ucfg = cfg.unet;
  ucfg.mode = cond::CondMode::C;
  out.unet = std::make_unique<cond::UNet>(ucfg, cfg.seed);
  Rng init = Rng::derive(cfg.seed, {1});
  LabelContext ctx(out.label_store, classes, cfg.M, ucfg.tau_dim, init);
  const diffusion::NoiseSchedule sched = cfg.diffusion.schedule();

  OptimizerConfig oc;
  oc.peak_lr = cfg.lr;
  oc.weight_decay = 0.0;
  oc.warmup_epochs = 0;
  oc.max_epochs = 1;
  oc.grad_clip_norm = 1.0;
  std::vector<ParamStore*> stores{&out.unet->params(), &out.label_store};
  AdamW opt(stores, oc);
  LrSchedule lr(cfg.lr, std::max(1, cfg.steps / 20), cfg.steps);
  const int n = static_cast<int>(images.size());
  for (int step = 0; step < cfg.steps; ++step) {
    for (ParamStore* s : stores) s->zero_grad();
    double total = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      Rng rng = Rng::derive(cfg.seed, {kSampleStream, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(b)});
      const int idx = rng.uniform_int(0, n - 1);
      const Image im = data::random_crop_image(images[static_cast<std::size_t>(idx)], cfg.crop_ratio, rng);
      const Tensor x0 = to_diffusion_space(codec, im);
      const int t = rng.uniform_int(1, sched.T);
      Tensor eps(x0.shape());
      for (double& v : eps.values()) v = rng.normal();
      Tape tape;
      diffusion::ConditionVars cv;
      cv.tau = ctx(tape, labels[static_cast<std::size_t>(idx)]);
      Var l = diffusion::cond_loss(*out.unet, tape, x0, t, eps, cv, sched);
      if (!std::isfinite(l.value()[0])) throw NumericError("ldm pretraining diverged at step " + std::to_string(step));
      total += l.value()[0];
      tape.backward(scale(l, 1.0 / cfg.batch_size));
    }
    clip_grad_norm(stores, oc.grad_clip_norm);
    opt.step(lr.at(step));
    out.losses.push_back(total / cfg.batch_size);
  }
  return out;
}

Image sample_label(const PretrainedLdm& ldm, const LdmPretrainConfig& cfg, const codec::LatentCodec& codec, int class_id,
                   int steps, Rng& rng) {
  diffusion::ConditionBundle b;
  b.tau = ldm.label_store.at("label." + std::to_string(class_id)).value;
  const Tensor z = diffusion::plms_sample(*ldm.unet, &b, cfg.diffusion.schedule(), steps, rng, nullptr,
                                        latent_clip(codec));
  return from_diffusion_space(codec, z);
}

// ---- Stage B ----

BrainDecoder::BrainDecoder(mbm::MbmModel encoder, std::unique_ptr<cond::UNet> unet, int M, std::uint64_t projector_seed)
    : encoder_(std::move(encoder)), unet_(std::move(unet)) {
  if (!unet_) throw InvalidArgument("brain decoder: no denoiser");
  cond::ProjectorConfig pc;
  pc.num_tokens = encoder_.num_patches();
  pc.token_dim = encoder_.config().embed_dim;
  pc.M = M;
  pc.tau_dim = unet_->config().tau_dim;
  pc.time_dim = unet_->config().time_dim;
  Rng rng(projector_seed);
  projector_ = std::make_unique<cond::ConditionProjector>(proj_store_, pc, rng);
}

std::vector<ParamStore*> BrainDecoder::stores() { return {&encoder_.params(), &unet_->params(), &proj_store_}; }

std::vector<const ParamStore*> BrainDecoder::stores() const {
  return {&encoder_.params(), &unet_->params(), &proj_store_};
}

diffusion::ConditionVars BrainDecoder::condition(Tape& tape, const std::vector<double>& signal) const {
  Var tokens = encoder_.encode_all(tape, signal_patches(signal, encoder_.config().patch_size));
  return (*projector_)(tape, tokens);
}

diffusion::ConditionBundle BrainDecoder::condition(const std::vector<double>& signal) const {
  Tape tape;
  const auto v = condition(tape, signal);
  return {v.tau.value(), v.sigma.value()};
}

void BrainDecoder::save(Checkpoint& ckpt) const {
  for (const ParamStore* s : stores()) put_params(ckpt, *s);
  ckpt.meta["cond_mode"] = cond::to_string(unet_->config().mode);
}

void BrainDecoder::load(const Checkpoint& ckpt) {
  for (ParamStore* s : stores()) get_params(ckpt, *s);
  if (ckpt.meta.contains("cond_mode")) unet_->set_mode(cond::parse_cond_mode(ckpt.meta.at("cond_mode").get<std::string>()));
}

StageBTrainer::StageBTrainer(const StageBConfig& cfg, BrainDecoder& model, const codec::LatentCodec& codec,
                             std::vector<std::vector<double>> signals, std::vector<Image> images,
                             std::string config_hash)
    : cfg_(cfg),
      model_(model),
      codec_(codec),
      signals_(std::move(signals)),
      images_(std::move(images)),
      hash_(std::move(config_hash)),
      schedule_(cfg.diffusion.schedule()),
      lr_(cfg.opt.peak_lr, 1, 1) {
  cfg_.opt.validate();
  if (signals_.empty() || signals_.size() != images_.size()) throw InvalidArgument("stage B: need paired samples");
  model_.unet().set_mode(cfg_.mode);
  cond::apply_freeze_policy(model_.stores());
  for (const ParamStore* s : std::as_const(model_).stores())
    for (const auto& [name, p] : *s)
      if (!p.trainable) frozen_.emplace(name, p.value);
  optim_ = std::make_unique<AdamW>(model_.stores(), cfg_.opt);
  const long spe = ceil_div(static_cast<long>(signals_.size()), cfg_.opt.batch_size);
  lr_ = LrSchedule(cfg_.opt.peak_lr, cfg_.opt.warmup_epochs * spe, cfg_.opt.max_epochs * spe);
}

void StageBTrainer::verify_frozen() const {
  for (const ParamStore* s : std::as_const(model_).stores())
    for (const auto& [name, p] : *s) {
      auto it = frozen_.find(name);
      if (it == frozen_.end()) continue;
      if (p.trainable || !(p.value == it->second)) {
        throw PolicyViolation("stage B: frozen parameter " + name + " changed during finetuning");
      }
    }
}

double StageBTrainer::run_epoch() {
  const int n = static_cast<int>(signals_.size());
  const int e = epoch_;
  const std::vector<int> order = Rng::derive(cfg_.seed, {kPermStream, static_cast<std::uint64_t>(e)}).permutation(n);
  const auto stores = model_.stores();
  double total = 0.0, lr = 0.0, gn = 0.0;
  for (int start = 0; start < n; start += cfg_.opt.batch_size) {
    const int end = std::min(n, start + cfg_.opt.batch_size);
    const double inv_b = 1.0 / static_cast<double>(end - start);
    for (ParamStore* s : stores) s->zero_grad();
    for (int k = start; k < end; ++k) {
      const int idx = order[static_cast<std::size_t>(k)];
      Rng rng = Rng::derive(cfg_.seed, {kSampleStream, static_cast<std::uint64_t>(e), static_cast<std::uint64_t>(idx)});
      const Image im = data::random_crop_image(images_[static_cast<std::size_t>(idx)], cfg_.crop_ratio, rng);
      const Tensor x0 = to_diffusion_space(codec_, im);
      const int t = rng.uniform_int(1, schedule_.T);
      Tensor eps(x0.shape());
      for (double& v : eps.values()) v = rng.normal();
      Tape tape;
      const diffusion::ConditionVars cv = model_.condition(tape, signals_[static_cast<std::size_t>(idx)]);
      Var l = diffusion::cond_loss(model_.unet(), tape, x0, t, eps, cv, schedule_);
      if (!std::isfinite(l.value()[0])) {
        throw NumericError("stage B diverged at epoch " + std::to_string(e + 1) + ", sample " + std::to_string(idx));
      }
      total += l.value()[0];
      tape.backward(scale(l, inv_b));
    }
    gn = clip_grad_norm(stores, cfg_.opt.grad_clip_norm);
    lr = lr_.at(optim_->steps_taken());
    optim_->step(lr);
  }
  ++epoch_;
  verify_frozen();
  const double mean_loss = total / static_cast<double>(n);
  log_.push_back({epoch_, mean_loss, lr, gn});
  return mean_loss;
}

void StageBTrainer::train_until(int until) {
  until = std::min(until, cfg_.opt.max_epochs);
  while (epoch_ < until) run_epoch();
}

Checkpoint StageBTrainer::checkpoint() const {
  Checkpoint c;
  c.meta = {{"kind", "stage_b"},
            {"config_hash", hash_},
            {"epoch", epoch_},
            {"step", optim_->steps_taken()},
            {"seed", cfg_.seed},
            {"M", cfg_.M},
            {"log", log_to_json(log_)}};
  model_.save(c);
  put_optimizer(c, *optim_);
  return c;
}

void StageBTrainer::restore(const Checkpoint& ckpt) {
  require_kind(ckpt, "stage_b");
  require_config_hash(ckpt, hash_);
  model_.load(ckpt);
  model_.unet().set_mode(cfg_.mode);
  for (const ParamStore* s : std::as_const(model_).stores())
    for (const auto& [name, p] : *s)
      if (!p.trainable) frozen_[name] = p.value;
  optim_->load_state(get_optimizer(ckpt), ckpt.meta.at("step").get<long>());
  epoch_ = ckpt.meta.at("epoch").get<int>();
  log_ = log_from_json(ckpt.meta.at("log"));
}

SamplerKind parse_sampler(const std::string& s) {
  if (s == "ddpm") return SamplerKind::Ddpm;
  if (s == "plms") return SamplerKind::Plms;
  throw ConfigError("unknown sampler '" + s + "' (expected ddpm or plms)");
}

std::string to_string(SamplerKind k) { return k == SamplerKind::Ddpm ? "ddpm" : "plms"; }

Image decode_signal(const BrainDecoder& model, const codec::LatentCodec& codec, const std::vector<double>& signal,
                    const diffusion::NoiseSchedule& schedule, SamplerKind sampler, int steps, Rng& rng) {
  const diffusion::ConditionBundle b = model.condition(signal);
  const double clip = latent_clip(codec);
  const Tensor z = sampler == SamplerKind::Ddpm
                       ? diffusion::ddpm_sample(model.unet(), &b, schedule, rng, clip)
                       : diffusion::plms_sample(model.unet(), &b, schedule, steps, rng, nullptr, clip);
  return from_diffusion_space(codec, z);
}

}  // namespace mindvis::train

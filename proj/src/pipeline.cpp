#include "mindvis/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "mindvis/errors.hpp"

namespace mindvis::pipeline {

using nlohmann::json;

namespace {

constexpr std::uint64_t kDecodeStream = 0x44454344ULL;
constexpr std::uint64_t kEvalStream = 0x4556414cULL;

// Reads a JSON object into config fields, remembering which keys it saw.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  void field(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
      out = v->get<int>();
    }
  }
  void field(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + ": expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void field(const char* key, double& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + ": expected a number");
      out = v->get<double>();
    }
  }
  void field(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + ": expected true or false");
      out = v->get<bool>();
    }
  }
  void field(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }
  template <class E, class Parse, class Show>
  void choice(const char* key, E& out, Parse parse, Show) {
    if (const json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + ": expected a string");
      try {
        out = parse(v->get<std::string>());
      } catch (const Error& e) {
        throw ConfigError(where(key) + ": " + e.what());
      }
    }
  }
  template <class F>
  void section(const char* key, F&& f) {
    seen_.insert(key);
    const json empty = json::object();
    const json* v = j_.contains(key) ? &j_.at(key) : &empty;
    Reader sub(*v, path_.empty() ? key : path_ + "." + key);
    f(sub);
    sub.finish();
  }
  void finish() const {
    for (const auto& item : j_.items())
      if (!seen_.count(item.key())) throw ConfigError("unknown config key " + where(item.key().c_str()));
  }

 private:
  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }
  std::string where() const { return path_.empty() ? "config" : path_; }
  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  template <class T>
  void field(const char* key, const T& v) {
    j_[key] = v;
  }
  template <class E, class Parse, class Show>
  void choice(const char* key, const E& v, Parse, Show show) {
    j_[key] = show(v);
  }
  template <class F>
  void section(const char* key, F&& f) {
    Writer sub;
    f(sub);
    j_[key] = std::move(sub.j_);
  }
  json take() { return std::move(j_); }

 private:
  json j_ = json::object();
};

template <class V>
void visit_opt(V& v, OptimizerConfig& o) {
  v.field("peak_lr", o.peak_lr);
  v.field("weight_decay", o.weight_decay);
  v.field("warmup_epochs", o.warmup_epochs);
  v.field("max_epochs", o.max_epochs);
  v.field("batch_size", o.batch_size);
  v.field("grad_clip_norm", o.grad_clip_norm);
}

template <class V>
void visit(V& v, RunConfig& c) {
  v.field("seed", c.seed);
  v.field("out_dir", c.out_dir);
  v.section("data", [&](V& s) {
    auto& d = c.data.synth;
    s.field("classes", d.class_count);
    s.field("samples_per_class", d.samples_per_class);
    s.field("voxels", d.voxel_count);
    s.field("image_size", d.image_size);
    s.field("snr", d.snr);
    s.field("seed", d.seed);
    s.field("test_fraction", d.test_fraction);
    s.field("unpaired_per_class", d.unpaired_per_class);
    s.field("unpaired_subjects", d.unpaired_subjects);
    s.field("primary_fraction", d.primary_fraction);
    s.field("blobs_per_class", d.blobs_per_class);
    s.choice("pad_strategy", c.data.pad, data::parse_pad_strategy,
             [](data::PadStrategy p) { return data::to_string(p); });
  });
  v.section("mbm", [&](V& s) {
    auto& m = c.mbm;
    s.field("patch_size", m.patch_size);
    s.field("embed_dim", m.embed_dim);
    s.field("encoder_depth", m.encoder_depth);
    s.field("encoder_heads", m.encoder_heads);
    s.field("decoder_embed_dim", m.decoder_embed_dim);
    s.field("decoder_depth", m.decoder_depth);
    s.field("decoder_heads", m.decoder_heads);
    s.field("mlp_ratio", m.mlp_ratio);
    s.field("mask_ratio", m.mask_ratio);
    s.choice("mask_strategy", m.mask_strategy, mbm::parse_mask_strategy,
             [](mbm::MaskStrategy x) { return mbm::to_string(x); });
    s.field("loss_on_all_patches", m.loss_on_all_patches);
  });
  v.section("diffusion", [&](V& s) {
    auto& d = c.diffusion;
    s.field("timesteps", d.schedule.T);
    s.field("beta_start", d.schedule.beta_start);
    s.field("beta_end", d.schedule.beta_end);
    s.section("codec", [&](V& cs) {
      cs.choice("kind", d.codec.kind, codec::parse_codec_kind, [](codec::CodecKind k) { return codec::to_string(k); });
      cs.field("latent_channels", d.codec.latent_channels);
      cs.field("hidden_channels", d.codec.hidden_channels);
      cs.field("train_steps", d.codec_train_steps);
    });
    s.section("unet", [&](V& us) {
      us.field("width1", d.unet.width1);
      us.field("width2", d.unet.width2);
      us.field("groups", d.unet.groups);
      us.field("time_dim", d.unet.time_dim);
      us.field("time_hidden", d.unet.time_hidden);
      us.field("tau_dim", d.unet.tau_dim);
      us.field("attn_heads", d.unet.attn_heads);
    });
    s.choice("sampler", d.sampler, train::parse_sampler, [](train::SamplerKind k) { return train::to_string(k); });
    s.field("steps", d.steps);
  });
  v.section("conditioning", [&](V& s) {
    s.choice("mode", c.conditioning.mode, cond::parse_cond_mode, [](cond::CondMode m) { return cond::to_string(m); });
    s.field("M", c.conditioning.M);
  });
  v.section("trainer", [&](V& s) {
    auto& t = c.trainer;
    s.section("stage_a", [&](V& a) {
      visit_opt(a, t.stage_a);
      a.field("sparsify_fraction", t.sparsify_fraction);
    });
    s.section("ldm", [&](V& l) {
      l.field("steps", t.ldm_steps);
      l.field("batch_size", t.ldm_batch_size);
      l.field("lr", t.ldm_lr);
      l.field("crop_ratio", t.ldm_crop_ratio);
      l.field("seed", t.ldm_seed);
    });
    s.section("stage_b", [&](V& b) {
      visit_opt(b, t.stage_b);
      b.field("crop_ratio", t.crop_ratio);
      b.choice("encoder_init", t.encoder_init, parse_encoder_init, [](EncoderInit e) { return to_string(e); });
    });
  });
  v.section("eval", [&](V& s) {
    auto& e = c.eval;
    s.field("n", e.n);
    s.field("k", e.k);
    s.field("trials", e.trials);
    s.field("samplings", e.samplings);
    s.field("grid_inputs", e.grid_inputs);
    s.section("oracle", [&](V& o) {
      o.field("width", e.oracle.width);
      o.field("feature_dim", e.oracle.feature_dim);
      o.field("steps", e.oracle.steps);
      o.field("batch_size", e.oracle.batch_size);
      o.field("lr", e.oracle.lr);
      o.field("crop_ratio", e.oracle.crop_ratio);
      o.field("noise", e.oracle.noise);
      o.field("seed", e.oracle.seed);
    });
  });
}

template <class F>
void checked(const std::string& what, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError(msg);
}

std::string short_hash(const std::string& h) { return h.substr(0, 16); }

codec::CodecConfig codec_config(const RunConfig& cfg) {
  codec::CodecConfig c = cfg.diffusion.codec;
  c.image_size = cfg.data.synth.image_size;
  return c;
}

cond::UNetConfig unet_config(const RunConfig& cfg) {
  const codec::LatentCodec probe(codec_config(cfg));
  const std::vector<int> shape = probe.latent_shape();
  cond::UNetConfig u = cfg.diffusion.unet;
  u.in_channels = shape[0];
  u.latent_size = shape[1];
  u.mode = cfg.conditioning.mode;
  return u;
}

eval::ConvOracleConfig oracle_config(const RunConfig& cfg) {
  eval::ConvOracleConfig o = cfg.eval.oracle;
  o.classes = cfg.data.synth.class_count;
  o.image_size = cfg.data.synth.image_size;
  return o;
}

std::vector<Image> train_images(const Prepared& p) {
  std::vector<Image> out;
  out.reserve(p.dataset.train.size());
  for (const auto& s : p.dataset.train) out.push_back(s.image);
  return out;
}

int num_patches(const Prepared& p) { return p.signals.length / p.signals.patch_size; }

std::mutex& path_mutex(const std::string& path) {
  static std::mutex registry_mutex;
  static std::map<std::string, std::unique_ptr<std::mutex>> registry;
  std::lock_guard<std::mutex> lock(registry_mutex);
  auto& m = registry[std::filesystem::absolute(path).lexically_normal().string()];
  if (!m) m = std::make_unique<std::mutex>();
  return *m;
}

std::string meta_hash(const Checkpoint& c) {
  auto it = c.meta.find("stage_hash");
  return it != c.meta.end() && it->is_string() ? it->get<std::string>() : std::string();
}

}  // namespace

EncoderInit parse_encoder_init(const std::string& s) {
  if (s == "pretrained") return EncoderInit::Pretrained;
  if (s == "random") return EncoderInit::Random;
  throw InvalidArgument("unknown encoder init '" + s + "' (pretrained, random)");
}

std::string to_string(EncoderInit e) { return e == EncoderInit::Pretrained ? "pretrained" : "random"; }

void RunConfig::validate() const {
  const auto& d = data.synth;
  require(d.class_count >= 2 && d.class_count <= data::kMaxRenderableClasses, "data.classes must be in [2, 64]");
  require(d.samples_per_class >= 2, "data.samples_per_class must be >= 2");
  require(d.voxel_count >= 1, "data.voxels must be >= 1");
  require(d.image_size >= 8 && d.image_size % 8 == 0, "data.image_size must be a positive multiple of 8");
  require(d.snr > 0.0, "data.snr must be > 0");
  require(d.test_fraction > 0.0 && d.test_fraction < 1.0, "data.test_fraction must be in (0, 1)");
  require(d.unpaired_per_class >= 0, "data.unpaired_per_class must be >= 0");
  require(d.unpaired_subjects >= 1 && d.unpaired_subjects <= 9, "data.unpaired_subjects must be in [1, 9]");
  require(d.primary_fraction > 0.0 && d.primary_fraction <= 1.0, "data.primary_fraction must be in (0, 1]");
  require(d.blobs_per_class >= 1, "data.blobs_per_class must be >= 1");
  checked("mbm", [&] { mbm.validate(); });
  require(diffusion.schedule.T >= 2, "diffusion.timesteps must be >= 2");
  require(diffusion.schedule.beta_start > 0.0 && diffusion.schedule.beta_start <= diffusion.schedule.beta_end &&
              diffusion.schedule.beta_end < 1.0,
          "diffusion betas must satisfy 0 < beta_start <= beta_end < 1");
  require(diffusion.codec_train_steps >= 1, "diffusion.codec.train_steps must be >= 1");
  require(diffusion.codec.latent_channels >= 1 && diffusion.codec.hidden_channels >= 1,
          "diffusion.codec channel counts must be >= 1");
  checked("diffusion.unet", [&] { unet_config(*this).validate(); });
  require(diffusion.steps >= 1 && diffusion.steps <= diffusion.schedule.T, "diffusion.steps must be in [1, timesteps]");
  require(conditioning.M >= 1, "conditioning.M must be >= 1");
  checked("trainer.stage_a", [&] { trainer.stage_a.validate(); });
  checked("trainer.stage_b", [&] { trainer.stage_b.validate(); });
  require(trainer.sparsify_fraction >= 0.0 && trainer.sparsify_fraction < 1.0,
          "trainer.stage_a.sparsify_fraction must be in [0, 1)");
  require(trainer.ldm_steps >= 1 && trainer.ldm_batch_size >= 1 && trainer.ldm_lr > 0.0,
          "trainer.ldm needs steps >= 1, batch_size >= 1, lr > 0");
  require(trainer.ldm_crop_ratio >= 0.0 && trainer.ldm_crop_ratio < 1.0, "trainer.ldm.crop_ratio must be in [0, 1)");
  require(trainer.crop_ratio >= 0.0 && trainer.crop_ratio < 1.0, "trainer.stage_b.crop_ratio must be in [0, 1)");
  require(eval.n >= 1 && eval.n <= d.class_count, "eval.n must be in [1, data.classes]");
  require(eval.k >= 1 && eval.k <= eval.n, "eval.k must be in [1, eval.n]");
  require(eval.trials >= 1, "eval.trials must be >= 1");
  require(eval.samplings >= 1, "eval.samplings must be >= 1");
  require(eval.grid_inputs >= 1, "eval.grid_inputs must be >= 1");
  const auto& o = eval.oracle;
  require(o.width >= 1 && o.feature_dim >= 1 && o.steps >= 1 && o.batch_size >= 1 && o.lr > 0.0,
          "eval.oracle sizes, steps and lr must be positive");
}

RunConfig default_config() {
  RunConfig c;
  c.data.synth.unpaired_per_class = 20;
  c.data.synth.unpaired_subjects = 3;
  c.trainer.stage_a.batch_size = 32;
  c.trainer.stage_a.warmup_epochs = 20;
  c.trainer.stage_a.max_epochs = 200;
  c.trainer.stage_b.peak_lr = 5e-4;
  c.trainer.stage_b.weight_decay = 0.01;
  c.trainer.stage_b.warmup_epochs = 4;
  c.trainer.stage_b.max_epochs = 40;
  c.trainer.stage_b.batch_size = 8;
  c.trainer.stage_b.grad_clip_norm = 1.0;
  return c;
}

RunConfig reference_config() {
  RunConfig c = default_config();
  c.data.synth.voxel_count = 4500;
  c.mbm.patch_size = 16;
  c.mbm.embed_dim = 1024;
  c.mbm.encoder_depth = 24;
  c.mbm.encoder_heads = 16;
  c.mbm.decoder_embed_dim = 512;
  c.mbm.decoder_depth = 8;
  c.mbm.decoder_heads = 16;
  c.mbm.mlp_ratio = 1.0;
  c.mbm.mask_ratio = 0.75;
  c.trainer.stage_a.peak_lr = 2.5e-4;
  c.trainer.stage_a.weight_decay = 0.05;
  c.trainer.stage_a.grad_clip_norm = 0.8;
  c.trainer.stage_a.warmup_epochs = 40;
  c.trainer.stage_a.max_epochs = 500;
  c.trainer.stage_a.batch_size = 500;
  c.trainer.stage_b.peak_lr = 5.3e-5;
  c.trainer.stage_b.batch_size = 5;
  c.trainer.stage_b.max_epochs = 500;
  c.diffusion.schedule.T = 1000;
  c.diffusion.steps = 250;
  c.conditioning.M = 77;
  c.eval.samplings = 5;
  return c;
}

RunConfig profile_config(const std::string& name) {
  if (name == "desk") return default_config();
  if (name == "reference") return reference_config();
  throw ConfigError("unknown profile '" + name + "' (desk or reference)");
}

RunConfig parse_config(const json& j) { return parse_config(j, default_config()); }

RunConfig parse_config(const json& j, const RunConfig& base) {
  RunConfig c = base;
  Reader r(j, "");
  visit(r, c);
  r.finish();
  c.validate();
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

json to_json(const RunConfig& cfg) {
  RunConfig copy = cfg;
  Writer w;
  visit(w, copy);
  return w.take();
}

std::string to_string(Stage s) {
  switch (s) {
    case Stage::Data: return "data";
    case Stage::StageA: return "stage_a";
    case Stage::Ldm: return "ldm";
    case Stage::StageB: return "stage_b";
    case Stage::Oracle: return "oracle";
    default: return "eval";
  }
}

std::string stage_hash(const RunConfig& cfg, Stage s) {
  const json full = to_json(cfg);
  json diffusion = full["diffusion"];
  diffusion.erase("sampler");
  diffusion.erase("steps");
  json part;
  switch (s) {
    case Stage::Data: part = {{"data", full["data"]}}; break;
    case Stage::StageA:
      part = {{"seed", full["seed"]}, {"data", full["data"]}, {"mbm", full["mbm"]},
              {"stage_a", full["trainer"]["stage_a"]}};
      break;
    case Stage::Ldm:
      part = {{"data", full["data"]},
              {"diffusion", diffusion},
              {"M", full["conditioning"]["M"]},
              {"ldm", full["trainer"]["ldm"]}};
      break;
    case Stage::StageB:
      part = {{"seed", full["seed"]},         {"data", full["data"]},       {"mbm", full["mbm"]},
              {"diffusion", diffusion},       {"conditioning", full["conditioning"]},
              {"trainer", full["trainer"]}};
      break;
    case Stage::Oracle:
      part = {{"classes", full["data"]["classes"]},
              {"image_size", full["data"]["image_size"]},
              {"oracle", full["eval"]["oracle"]}};
      break;
    case Stage::Eval: return config_hash(cfg);
  }
  return sha1_hex(to_string(s) + ":" + part.dump());
}

std::string config_hash(const RunConfig& cfg) {
  json j = to_json(cfg);
  j.erase("out_dir");
  return sha1_hex("config:" + j.dump());
}

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes{"embed_dim",     "mask_ratio", "patch_size",   "encoder_depth",
                                             "mask_strategy", "cond_mode",  "pad_strategy", "crop_ratio"};
  return axes;
}

void apply_axis(RunConfig& cfg, const std::string& axis, const json& value) {
  json patch;
  if (axis == "embed_dim" || axis == "mask_ratio" || axis == "patch_size" || axis == "encoder_depth" ||
      axis == "mask_strategy") {
    patch = {{"mbm", {{axis, value}}}};
  } else if (axis == "cond_mode") {
    patch = {{"conditioning", {{"mode", value}}}};
  } else if (axis == "pad_strategy") {
    patch = {{"data", {{"pad_strategy", value}}}};
  } else if (axis == "crop_ratio") {
    patch = {{"trainer", {{"stage_b", {{"crop_ratio", value}}}}}};
  } else {
    throw ConfigError("unknown ablation axis '" + axis + "'");
  }
  json j = to_json(cfg);
  j.merge_patch(patch);
  cfg = parse_config(j);
}

data::PairedDataset make_dataset(const RunConfig& cfg) { return data::generate_synthetic_dataset(cfg.data.synth); }

Prepared prepare(const RunConfig& cfg, data::PairedDataset dataset) {
  Prepared p;
  p.signals = data::prepare_signals(dataset, cfg.mbm.patch_size, cfg.data.pad);
  p.dataset = std::move(dataset);
  return p;
}

std::vector<std::vector<double>> pretraining_signals(const Prepared& p) {
  std::vector<std::vector<double>> all = p.signals.train;
  all.insert(all.end(), p.signals.unpaired.begin(), p.signals.unpaired.end());
  return all;
}

Checkpoint run_stage_a(const RunConfig& cfg, const Prepared& p) {
  train::StageAConfig sc;
  sc.mbm = cfg.mbm;
  sc.opt = cfg.trainer.stage_a;
  sc.sparsify_fraction = cfg.trainer.sparsify_fraction;
  sc.seed = cfg.seed;
  const std::string hash = stage_hash(cfg, Stage::StageA);
  train::StageATrainer trainer(sc, pretraining_signals(p), p.signals.primary_patch, hash);
  trainer.train_until(sc.opt.max_epochs);
  Checkpoint c = trainer.checkpoint();
  c.meta["stage_hash"] = hash;
  return c;
}

Checkpoint run_ldm(const RunConfig& cfg, const Prepared& p) {
  const std::vector<Image> images = train_images(p);
  codec::LatentCodec codec(codec_config(cfg), cfg.trainer.ldm_seed);
  if (cfg.diffusion.codec.kind == codec::CodecKind::TinyAutoencoder) {
    codec::AutoencoderTraining at;
    at.steps = cfg.diffusion.codec_train_steps;
    at.seed = cfg.trainer.ldm_seed;
    codec.train(images, at);
  }
  train::LdmPretrainConfig lc;
  lc.unet = unet_config(cfg);
  lc.diffusion = cfg.diffusion.schedule;
  lc.M = cfg.conditioning.M;
  lc.steps = cfg.trainer.ldm_steps;
  lc.batch_size = cfg.trainer.ldm_batch_size;
  lc.lr = cfg.trainer.ldm_lr;
  lc.crop_ratio = cfg.trainer.ldm_crop_ratio;
  lc.seed = cfg.trainer.ldm_seed;
  std::vector<int> labels;
  for (const auto& s : p.dataset.train) labels.push_back(s.class_id);
  const train::PretrainedLdm ldm = train::pretrain_ldm(lc, codec, images, labels);

  Checkpoint c;
  put_params(c, ldm.unet->params());
  put_params(c, ldm.label_store);
  codec.save(c);
  const std::size_t tail = std::min<std::size_t>(100, ldm.losses.size());
  double last = 0.0;
  for (std::size_t i = ldm.losses.size() - tail; i < ldm.losses.size(); ++i) last += ldm.losses[i];
  c.meta["kind"] = "ldm";
  c.meta["loss_first"] = ldm.losses.front();
  c.meta["loss_last100"] = last / static_cast<double>(tail);
  c.meta["stage_hash"] = stage_hash(cfg, Stage::Ldm);
  return c;
}

codec::LatentCodec load_codec(const RunConfig& cfg, const Checkpoint& ldm) {
  codec::LatentCodec codec(codec_config(cfg));
  codec.load(ldm);
  return codec;
}

Checkpoint run_stage_b(const RunConfig& cfg, const Prepared& p, const Checkpoint* stage_a, const Checkpoint& ldm) {
  mbm::MbmModel encoder(cfg.mbm, num_patches(p), cfg.seed, false);
  if (cfg.trainer.encoder_init == EncoderInit::Pretrained) {
    if (!stage_a) throw MissingArtifact("finetuning needs a pretrained encoder checkpoint");
    get_params(*stage_a, encoder.params());
  }
  auto unet = std::make_unique<cond::UNet>(unet_config(cfg), 0);
  get_params(ldm, unet->params());
  train::BrainDecoder decoder(std::move(encoder), std::move(unet), cfg.conditioning.M, cfg.seed);
  const codec::LatentCodec codec = load_codec(cfg, ldm);

  train::StageBConfig bc;
  bc.opt = cfg.trainer.stage_b;
  bc.diffusion = cfg.diffusion.schedule;
  bc.mode = cfg.conditioning.mode;
  bc.M = cfg.conditioning.M;
  bc.crop_ratio = cfg.trainer.crop_ratio;
  bc.seed = cfg.seed;
  const std::string hash = stage_hash(cfg, Stage::StageB);
  train::StageBTrainer trainer(bc, decoder, codec, p.signals.train, train_images(p), hash);
  trainer.train_until(bc.opt.max_epochs);
  Checkpoint c = trainer.checkpoint();
  c.meta["stage_hash"] = hash;
  c.meta["encoder_init"] = to_string(cfg.trainer.encoder_init);
  return c;
}

std::unique_ptr<train::BrainDecoder> load_decoder(const RunConfig& cfg, const Prepared& p, const Checkpoint& stage_b) {
  mbm::MbmModel encoder(cfg.mbm, num_patches(p), cfg.seed, false);
  auto unet = std::make_unique<cond::UNet>(unet_config(cfg), 0);
  auto decoder =
      std::make_unique<train::BrainDecoder>(std::move(encoder), std::move(unet), cfg.conditioning.M, cfg.seed);
  decoder->load(stage_b);
  return decoder;
}

Checkpoint run_oracle(const RunConfig& cfg) {
  eval::ConvOracle oracle(oracle_config(cfg));
  const double loss = oracle.train();
  Checkpoint c;
  oracle.save(c);
  c.meta["kind"] = "oracle";
  c.meta["final_loss"] = loss;
  c.meta["validation_accuracy"] = oracle.validation_accuracy(20, cfg.eval.oracle.seed + 1);
  c.meta["stage_hash"] = stage_hash(cfg, Stage::Oracle);
  return c;
}

std::unique_ptr<eval::ConvOracle> load_oracle(const RunConfig& cfg, const Checkpoint& oracle) {
  auto o = std::make_unique<eval::ConvOracle>(oracle_config(cfg));
  o->load(oracle);
  return o;
}

std::vector<std::vector<Image>> decode_test_inputs(const RunConfig& cfg, const Prepared& p,
                                                   const train::BrainDecoder& decoder, const codec::LatentCodec& codec,
                                                   int inputs, int samplings) {
  const int n = std::min<int>(inputs, static_cast<int>(p.signals.test.size()));
  const diffusion::NoiseSchedule schedule = cfg.diffusion.schedule.schedule();
  std::vector<std::vector<Image>> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int s = 0; s < samplings; ++s) {
      Rng rng = Rng::derive(cfg.seed, {kDecodeStream, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(s)});
      out[static_cast<std::size_t>(i)].push_back(train::decode_signal(decoder, codec, p.signals.test[i], schedule,
                                                                      cfg.diffusion.sampler, cfg.diffusion.steps, rng));
    }
  }
  return out;
}

Image sample_grid(const Prepared& p, const std::vector<std::vector<Image>>& samples) {
  std::vector<std::vector<Image>> rows;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::vector<Image> row{p.dataset.test[i].image};
    row.insert(row.end(), samples[i].begin(), samples[i].end());
    rows.push_back(std::move(row));
  }
  return make_grid(rows);
}

Evaluation evaluate(const RunConfig& cfg, const Prepared& p, const std::vector<std::vector<Image>>& samples,
                    const eval::ClassifierOracle& oracle) {
  if (samples.empty() || samples.front().empty()) throw InvalidArgument("evaluate: no samples");
  std::vector<Image> gen, gt;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    gen.push_back(samples[i].front());
    gt.push_back(p.dataset.test[i].image);
  }
  Evaluation out;
  auto& r = out.report;
  r.n = cfg.eval.n;
  r.k = cfg.eval.k;
  r.trials = cfg.eval.trials;
  r.seed = cfg.seed;
  Rng rng = Rng::derive(cfg.seed, {kEvalStream});
  r.success_rate = eval::nway_topk_accuracy(gen, gt, oracle, r.n, r.k, r.trials, rng);
  std::vector<std::vector<double>> f_real, f_gen;
  double mse = 0.0;
  for (std::size_t i = 0; i < gen.size(); ++i) {
    f_real.push_back(oracle.features(gt[i]));
    f_gen.push_back(oracle.features(gen[i]));
    mse += eval::pixel_mse(gen[i], gt[i]);
  }
  r.fid = gen.size() >= 2 ? eval::fid(f_real, f_gen) : 0.0;
  r.mse = mse / static_cast<double>(gen.size());
  for (const auto& row : samples) {
    std::vector<int> labels;
    for (const Image& im : row) labels.push_back(eval::argmax(oracle.probabilities(im)));
    out.gen_top1.push_back(labels.front());
    out.labels.push_back(std::move(labels));
  }
  r.samplings = static_cast<int>(samples.front().size());
  if (r.samplings >= 2) {
    const eval::Consistency c = eval::sampling_consistency_labels(out.labels);
    r.consistency_mean = c.mean;
    r.consistency_std = c.std;
  }
  r.validate();
  return out;
}

Checkpoint cached(const std::string& path, const std::string& hash, const std::function<Checkpoint()>& build) {
  std::lock_guard<std::mutex> lock(path_mutex(path));
  if (std::filesystem::exists(path)) {
    Checkpoint c = load_checkpoint(path);
    if (meta_hash(c) == hash) return c;
  }
  Checkpoint c = build();
  c.meta["stage_hash"] = hash;
  const std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  const std::string tmp = path + ".part";
  save_checkpoint(c, tmp);
  std::filesystem::rename(tmp, path);
  return c;
}

Checkpoint require_artifact(const std::string& path, const std::string& hash, const std::string& producer) {
  if (!std::filesystem::exists(path)) {
    throw MissingArtifact("missing " + path + "; run `" + producer + "` first");
  }
  Checkpoint c = load_checkpoint(path);
  if (meta_hash(c) != hash) {
    throw ConfigError(path + " was produced under different settings; rerun `" + producer + "`");
  }
  return c;
}

std::string file_sha1(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot read " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return sha1_hex(os.str());
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out << text;
}

void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

json make_manifest(const std::string& command, const RunConfig& cfg, Stage stage,
                   const std::vector<std::string>& inputs, const std::vector<std::string>& outputs) {
  auto files = [](const std::vector<std::string>& paths) {
    json a = json::array();
    for (const auto& p : paths) a.push_back({{"path", p}, {"sha1", file_sha1(p)}});
    return a;
  };
  return {{"command", command},
          {"config", to_json(cfg)},
          {"config_hash", config_hash(cfg)},
          {"stage_hash", stage_hash(cfg, stage)},
          {"seed", cfg.seed},
          {"inputs", files(inputs)},
          {"outputs", files(outputs)}};
}

std::string artifact_path(const std::string& cache_dir, const RunConfig& cfg, Stage s) {
  return (std::filesystem::path(cache_dir) / (to_string(s) + "-" + short_hash(stage_hash(cfg, s)) + ".mvck")).string();
}

PipelineResult run_all(const RunConfig& cfg, const std::string& cache_dir) {
  const Prepared p = prepare(cfg, make_dataset(cfg));
  auto path = [&](Stage s) { return artifact_path(cache_dir, cfg, s); };
  std::optional<Checkpoint> stage_a;
  if (cfg.trainer.encoder_init == EncoderInit::Pretrained) {
    stage_a = cached(path(Stage::StageA), stage_hash(cfg, Stage::StageA), [&] { return run_stage_a(cfg, p); });
  }
  const Checkpoint ldm = cached(path(Stage::Ldm), stage_hash(cfg, Stage::Ldm), [&] { return run_ldm(cfg, p); });
  const Checkpoint stage_b = cached(path(Stage::StageB), stage_hash(cfg, Stage::StageB), [&] {
    return run_stage_b(cfg, p, stage_a ? &*stage_a : nullptr, ldm);
  });
  const Checkpoint oracle_ckpt =
      cached(path(Stage::Oracle), stage_hash(cfg, Stage::Oracle), [&] { return run_oracle(cfg); });

  const auto decoder = load_decoder(cfg, p, stage_b);
  const codec::LatentCodec codec = load_codec(cfg, ldm);
  const auto oracle = load_oracle(cfg, oracle_ckpt);
  const auto samples = decode_test_inputs(cfg, p, *decoder, codec, static_cast<int>(p.signals.test.size()),
                                          cfg.eval.samplings);
  PipelineResult out;
  out.evaluation = evaluate(cfg, p, samples, *oracle);
  for (const auto& rec : stage_b.meta.at("log")) {
    train::EpochRecord e;
    e.epoch = rec.at(0).get<int>();
    e.loss = rec.at(1).get<double>();
    e.lr = rec.at(2).get<double>();
    e.grad_norm = rec.at(3).get<double>();
    out.stage_b_log.push_back(e);
  }
  return out;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const AblationGrid& grid, const std::string& cache_dir,
                                      int threads) {
  if (std::find(ablation_axes().begin(), ablation_axes().end(), grid.axis) == ablation_axes().end()) {
    throw ConfigError("unknown ablation axis '" + grid.axis + "'");
  }
  if (grid.values.empty() || grid.seeds.empty()) throw ConfigError("ablation grid needs values and seeds");

  struct Point {
    std::size_t row;
    RunConfig cfg;
    std::uint64_t seed;
  };
  std::vector<AblationRow> rows;
  std::vector<Point> points;
  for (int pass = 0; pass < (grid.without_pretraining_rows ? 2 : 1); ++pass) {
    for (const json& v : grid.values) {
      AblationRow row;
      row.axis = grid.axis;
      row.value = v.is_string() ? v.get<std::string>() : v.dump();
      if (pass == 1) row.value += " w/o SC-MBM";
      row.seeds = grid.seeds;
      RunConfig cfg = base;
      std::string invalid;
      try {
        apply_axis(cfg, grid.axis, v);
        if (pass == 1) cfg.trainer.encoder_init = EncoderInit::Random;
      } catch (const Error& e) {
        invalid = e.what();
      }
      for (std::uint64_t s : grid.seeds) {
        if (!invalid.empty()) {
          row.failures.push_back("seed " + std::to_string(s) + ": " + invalid);
          continue;
        }
        RunConfig pc = cfg;
        pc.seed = s;
        points.push_back({rows.size(), pc, s});
      }
      rows.push_back(std::move(row));
    }
  }

  std::vector<std::optional<double>> results(points.size());
  std::vector<std::string> errors(points.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      try {
        results[i] = run_all(points[i].cfg, cache_dir).evaluation.report.success_rate;
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(points.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (std::size_t i = 0; i < points.size(); ++i) {
    AblationRow& row = rows[points[i].row];
    if (results[i]) {
      row.accuracies.push_back(*results[i]);
    } else {
      row.failures.push_back("seed " + std::to_string(points[i].seed) + ": " + errors[i]);
    }
  }
  for (auto& row : rows) {
    if (!row.accuracies.empty()) row.mean = eval::mean_of(row.accuracies);
    if (row.accuracies.size() >= 2) row.std = eval::stddev_of(row.accuracies);
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  auto quote = [](const std::string& s) {
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  };
  std::ostringstream os;
  os << "axis,value,runs,mean,std,accuracies,failures\n";
  for (const auto& r : rows) {
    std::string acc, fail;
    for (std::size_t i = 0; i < r.accuracies.size(); ++i) acc += (i ? ";" : "") + eval::format_double(r.accuracies[i]);
    for (std::size_t i = 0; i < r.failures.size(); ++i) fail += (i ? "; " : "") + r.failures[i];
    os << r.axis << ',' << quote(r.value) << ',' << r.accuracies.size() << ',';
    if (r.accuracies.empty()) {
      os << ",,";
    } else {
      os << eval::format_double(r.mean) << ',' << eval::format_double(r.std) << ',';
    }
    os << quote(acc) << ',' << quote(fail) << '\n';
  }
  return os.str();
}

int thread_cap() {
  const char* env = std::getenv("MINDVIS_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  return end != env && *end == '\0' && v > 0 ? static_cast<int>(v) : 1;
}

}  // namespace mindvis::pipeline

#include "mindvis/conditioning.hpp"

#include <sstream>

#include "mindvis/errors.hpp"

namespace mindvis::cond {

CondMode parse_cond_mode(const std::string& s) {
  if (s == "c" || s == "C") return CondMode::C;
  if (s == "ct" || s == "CT" || s == "C+T") return CondMode::CT;
  throw ConfigError("unknown conditioning mode '" + s + "' (expected c or ct)");
}

std::string to_string(CondMode m) { return m == CondMode::C ? "c" : "ct"; }

ConditionProjector::ConditionProjector(ParamStore& store, const ProjectorConfig& cfg, Rng& rng, const std::string& name)
    : cfg_(cfg) {
  if (cfg.M < 1 || cfg.tau_dim < 1 || cfg.time_dim < 1 || cfg.token_dim < 1) {
    throw ConfigError("condition projector: dimensions must be >= 1");
  }
  if (cfg.num_tokens < cfg.M) {
    throw ConfigError("condition projector: " + std::to_string(cfg.num_tokens) + " encoder tokens cannot pool to M=" +
                      std::to_string(cfg.M) + " rows");
  }
  pool_w_ = &store.add(name + ".pool.w", nn::xavier_uniform({cfg.M, cfg.num_tokens}, cfg.num_tokens, cfg.M, rng));
  pool_b_ = &store.add(name + ".pool.b", Tensor({cfg.M}));
  to_tau_ = nn::Linear::make(store, name + ".tau", cfg.token_dim, cfg.tau_dim, rng);
  to_sigma_ = nn::Linear::make(store, name + ".sigma", cfg.tau_dim, cfg.time_dim, rng);
}

diffusion::ConditionVars ConditionProjector::operator()(Tape& tape, Var tokens) const {
  const auto& s = tokens.shape();
  if (s.size() != 2 || s[1] != cfg_.token_dim) {
    throw ShapeError("condition projector: tokens " + shape_str(s) + ", expected [n, " + std::to_string(cfg_.token_dim) + "]");
  }
  if (s[0] < cfg_.M) {
    throw ShapeError("condition projector: " + std::to_string(s[0]) + " tokens is fewer than M=" + std::to_string(cfg_.M));
  }
  if (s[0] != cfg_.num_tokens) throw ShapeError("condition projector: token count differs from the configured layout");
  Var pooled = add_col(matmul(tape.param(*pool_w_), tokens), tape.param(*pool_b_));
  diffusion::ConditionVars out;
  out.tau = to_tau_(tape, pooled);
  out.sigma = to_sigma_(tape, mean_rows(out.tau));
  return out;
}

diffusion::ConditionBundle project_condition(const ConditionProjector& proj, const Tensor& encoder_tokens) {
  Tape tape;
  const auto v = proj(tape, tape.constant(encoder_tokens));
  return {v.tau.value(), v.sigma.value()};
}

CrossAttentionSite CrossAttentionSite::make(ParamStore& store, const std::string& name, int channels, int tau_dim,
                                            int heads, Rng& rng) {
  CrossAttentionSite s;
  s.norm = nn::LayerNorm::make(store, name + ".norm", channels);
  s.attn = nn::Attention::make(store, name + ".attn", channels, tau_dim, channels, heads, rng, true);
  return s;
}

Var CrossAttentionSite::operator()(Tape& tape, Var features, Var tau, nn::AttentionProbe* probe) const {
  const std::vector<int> shape = features.shape();
  if (shape.size() != 3) throw ShapeError("cross_attention: features must be [C, H, W]");
  const int c = shape[0], hw = shape[1] * shape[2];
  Var seq = transpose(reshape(features, {c, hw}));
  Var out = attn(tape, norm(tape, seq), tau, probe);
  return add(features, reshape(transpose(out), shape));
}

Var cross_attention(Tape& tape, Var features, Var tau, const CrossAttentionSite& site, nn::AttentionProbe* probe) {
  return site(tape, features, tau, probe);
}

void UNetConfig::validate() const {
  if (in_channels < 1 || latent_size < 2 || latent_size % 2 != 0) throw ConfigError("unet: latent must be even-sized");
  if (width1 % groups != 0 || width2 % groups != 0 || (width1 + width2) % groups != 0) {
    throw ConfigError("unet: widths must be divisible by the group count");
  }
  if (time_dim < 2 || time_dim % 2 != 0) throw ConfigError("unet: time_dim must be even");
  if (width1 % attn_heads != 0 || width2 % attn_heads != 0) throw ConfigError("unet: widths must divide by attn_heads");
  if (tau_dim < 1) throw ConfigError("unet: tau_dim must be >= 1");
}

ResBlock ResBlock::make(ParamStore& store, const std::string& name, int cin, int cout, int groups, int temb_dim,
                        Rng& rng) {
  ResBlock b;
  b.n1 = nn::GroupNorm::make(store, name + ".norm1", cin, groups);
  b.c1 = nn::Conv2d::make(store, name + ".conv1", cin, cout, 3, 1, 1, rng);
  b.temb = nn::Linear::make(store, name + ".temb", temb_dim, cout, rng);
  b.n2 = nn::GroupNorm::make(store, name + ".norm2", cout, groups);
  b.c2 = nn::Conv2d::make(store, name + ".conv2", cout, cout, 3, 1, 1, rng);
  b.has_skip = cin != cout;
  if (b.has_skip) b.skip = nn::Conv2d::make(store, name + ".skip", cin, cout, 1, 1, 0, rng);
  return b;
}

Var ResBlock::operator()(Tape& tape, Var x, Var t_emb) const {
  Var h = c1(tape, silu(n1(tape, x)));
  const std::vector<int> shape = h.shape();
  const int c = shape[0];
  Var bias = reshape(temb(tape, silu(t_emb)), {c});
  h = reshape(add_col(reshape(h, {c, shape[1] * shape[2]}), bias), shape);
  h = c2(tape, silu(n2(tape, h)));
  return add(has_skip ? skip(tape, x) : x, h);
}

UNet::UNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed);
  const int w1 = cfg.width1, w2 = cfg.width2, g = cfg.groups, th = cfg.time_hidden;
  time1_ = nn::Linear::make(store_, "unet.time1", cfg.time_dim, th, rng);
  time2_ = nn::Linear::make(store_, "unet.time2", th, th, rng);
  conv_in_ = nn::Conv2d::make(store_, "unet.conv_in", cfg.in_channels, w1, 3, 1, 1, rng);
  down1_ = ResBlock::make(store_, "unet.down1", w1, w1, g, th, rng);
  downsample_ = nn::Conv2d::make(store_, "unet.downsample", w1, w1, 3, 2, 1, rng);
  down2_ = ResBlock::make(store_, "unet.down2", w1, w2, g, th, rng);
  mid_ = ResBlock::make(store_, "unet.mid", w2, w2, g, th, rng);
  xattn_mid_ = CrossAttentionSite::make(store_, "unet.xattn_mid", w2, cfg.tau_dim, cfg.attn_heads, rng);
  up1_ = ResBlock::make(store_, "unet.up1", w2 + w1, w1, g, th, rng);
  xattn_up_ = CrossAttentionSite::make(store_, "unet.xattn_up", w1, cfg.tau_dim, cfg.attn_heads, rng);
  out_norm_ = nn::GroupNorm::make(store_, "unet.out_norm", w1, g);
  conv_out_ = nn::Conv2d::make(store_, "unet.conv_out", w1, cfg.in_channels, 3, 1, 1, rng);
}

std::vector<int> UNet::latent_shape() const { return {cfg_.in_channels, cfg_.latent_size, cfg_.latent_size}; }

Var UNet::time_embedding(Tape& tape, int t, const diffusion::ConditionVars* cond) const {
  Var e = tape.constant(nn::timestep_embedding(static_cast<double>(t), cfg_.time_dim));
  if (cond && cfg_.mode == CondMode::CT) {
    if (!cond->sigma.valid()) throw InvalidArgument("unet: mode ct requires sigma");
    if (cond->sigma.shape() != std::vector<int>{1, cfg_.time_dim}) {
      throw ShapeError("unet: sigma " + shape_str(cond->sigma.shape()) + ", expected [1, " +
                       std::to_string(cfg_.time_dim) + "]");
    }
    e = add(e, cond->sigma);
  }
  return time2_(tape, silu(time1_(tape, e)));
}

Var UNet::forward(Tape& tape, Var x, int t, const diffusion::ConditionVars* cond, nn::AttentionProbe* probe) const {
  if (x.shape() != latent_shape()) {
    throw ShapeError("unet: input " + shape_str(x.shape()) + ", expected " + shape_str(latent_shape()));
  }
  if (cond) {
    if (!cond->tau.valid()) throw InvalidArgument("unet: conditioning without tau");
    const auto& ts = cond->tau.shape();
    if (ts.size() != 2 || ts[0] < 1 || ts[1] != cfg_.tau_dim) {
      throw ShapeError("unet: tau " + shape_str(ts) + ", expected [M, " + std::to_string(cfg_.tau_dim) + "]");
    }
  }
  Var temb = time_embedding(tape, t, cond);
  Var h1 = down1_(tape, conv_in_(tape, x), temb);
  Var h2 = down2_(tape, downsample_(tape, h1), temb);
  Var m = mid_(tape, h2, temb);
  if (cond) m = xattn_mid_(tape, m, cond->tau, probe);
  Var u = up1_(tape, concat_rows({upsample_nearest2(m), h1}), temb);
  if (cond) u = xattn_up_(tape, u, cond->tau, probe);
  return conv_out_(tape, silu(out_norm_(tape, u)));
}

Var UNet::predict(Tape& tape, Var x, int t, const diffusion::ConditionVars* cond) const {
  return forward(tape, x, t, cond, nullptr);
}

ParamRole classify_parameter(const std::string& name) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (starts("encoder.") || starts("cond.") || starts("unet.xattn")) return ParamRole::Trainable;
  return ParamRole::Frozen;
}

std::map<std::string, ParamRole> classify_parameters(const std::vector<const ParamStore*>& stores) {
  std::map<std::string, ParamRole> out;
  for (const ParamStore* s : stores)
    for (const auto& [name, p] : *s) {
      if (!out.emplace(name, classify_parameter(name)).second) {
        throw InvalidArgument("freeze policy: parameter " + name + " appears twice");
      }
    }
  return out;
}

void apply_freeze_policy(const std::vector<ParamStore*>& stores) {
  for (ParamStore* s : stores)
    for (auto& [name, p] : *s) p.trainable = classify_parameter(name) == ParamRole::Trainable;
}

std::string describe_policy(const std::map<std::string, ParamRole>& roles) {
  std::ostringstream os;
  for (const auto& [name, role] : roles) os << (role == ParamRole::Trainable ? "trainable " : "frozen    ") << name << '\n';
  return os.str();
}

}  // namespace mindvis::cond

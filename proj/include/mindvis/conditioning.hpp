#pragma once

// Double conditioning of the denoiser on encoder tokens: a projector from
// tokens to (tau, sigma), cross-attention sites reading tau, and the time
// embedding receiving sigma. The toy UNet lives here too.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mindvis/autograd.hpp"
#include "mindvis/diffusion.hpp"
#include "mindvis/nn.hpp"

namespace mindvis::cond {

enum class CondMode { C, CT };

CondMode parse_cond_mode(const std::string& s);
std::string to_string(CondMode m);

struct ProjectorConfig {
  int num_tokens = 16;  // encoder patches
  int token_dim = 64;   // encoder width
  int M = 8;
  int tau_dim = 32;
  int time_dim = 64;
};

// tau = (W_pool tokens + b_pool) W_d + b_d, a kernel-1 convolution over the
// token axis followed by a linear map; sigma = mean_rows(tau) W_s + b_s.
class ConditionProjector {
 public:
  ConditionProjector(ParamStore& store, const ProjectorConfig& cfg, Rng& rng, const std::string& name = "cond");

  const ProjectorConfig& config() const { return cfg_; }
  diffusion::ConditionVars operator()(Tape& tape, Var tokens) const;

 private:
  ProjectorConfig cfg_;
  Parameter* pool_w_ = nullptr;  // [M, num_tokens]
  Parameter* pool_b_ = nullptr;  // [M]
  nn::Linear to_tau_;
  nn::Linear to_sigma_;
};

diffusion::ConditionBundle project_condition(const ConditionProjector& proj, const Tensor& encoder_tokens);

// One cross-attention site: features [C, H, W] attend over tau [M, d_tau]
// through per-site adapters; zero-initialised output projection, residual.
struct CrossAttentionSite {
  nn::LayerNorm norm;
  nn::Attention attn;

  static CrossAttentionSite make(ParamStore& store, const std::string& name, int channels, int tau_dim, int heads,
                                 Rng& rng);
  Var operator()(Tape& tape, Var features, Var tau, nn::AttentionProbe* probe = nullptr) const;
};

Var cross_attention(Tape& tape, Var features, Var tau, const CrossAttentionSite& site,
                    nn::AttentionProbe* probe = nullptr);

struct UNetConfig {
  int in_channels = 3;
  int latent_size = 16;
  int width1 = 16;  // full resolution
  int width2 = 32;  // half resolution
  int groups = 4;
  int time_dim = 64;     // sinusoidal embedding width (= sigma width)
  int time_hidden = 64;  // shared time-MLP output
  int tau_dim = 32;
  int attn_heads = 1;
  CondMode mode = CondMode::CT;

  void validate() const;
};

struct ResBlock {
  nn::GroupNorm n1, n2;
  nn::Conv2d c1, c2, skip;
  nn::Linear temb;
  bool has_skip = false;

  static ResBlock make(ParamStore& store, const std::string& name, int cin, int cout, int groups, int temb_dim,
                       Rng& rng);
  Var operator()(Tape& tape, Var x, Var temb) const;
};

// Two resolutions, residual blocks, skip concatenation, a cross-attention
// site at the half-resolution middle and one on the full-resolution up path.
class UNet : public diffusion::Denoiser {
 public:
  UNet(const UNetConfig& cfg, std::uint64_t seed);
  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;

  const UNetConfig& config() const { return cfg_; }
  void set_mode(CondMode m) { cfg_.mode = m; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  std::vector<int> latent_shape() const override;
  Var predict(Tape& tape, Var x_t, int t, const diffusion::ConditionVars* cond) const override;
  // Same as predict, collecting the cross-attention maps.
  Var forward(Tape& tape, Var x_t, int t, const diffusion::ConditionVars* cond, nn::AttentionProbe* probe) const;

 private:
  Var time_embedding(Tape& tape, int t, const diffusion::ConditionVars* cond) const;

  UNetConfig cfg_;
  ParamStore store_;
  nn::Linear time1_, time2_;
  nn::Conv2d conv_in_;
  ResBlock down1_;
  nn::Conv2d downsample_;
  ResBlock down2_;
  ResBlock mid_;
  CrossAttentionSite xattn_mid_;
  ResBlock up1_;
  CrossAttentionSite xattn_up_;
  nn::GroupNorm out_norm_;
  nn::Conv2d conv_out_;
};

// Trainable during finetuning: the brain encoder, every cross-attention site
// and the condition projector. Everything else is frozen.
enum class ParamRole { Trainable, Frozen };
ParamRole classify_parameter(const std::string& name);
std::map<std::string, ParamRole> classify_parameters(const std::vector<const ParamStore*>& stores);
void apply_freeze_policy(const std::vector<ParamStore*>& stores);
std::string describe_policy(const std::map<std::string, ParamRole>& roles);

}  // namespace mindvis::cond

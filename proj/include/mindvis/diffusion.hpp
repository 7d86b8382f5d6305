#pragma once

// Noise schedule, forward corruption, the noise-prediction objectives and the
// ancestral (DDPM) and pseudo linear multistep (PLMS) samplers.

#include <optional>
#include <string>
#include <vector>

#include "mindvis/autograd.hpp"
#include "mindvis/rng.hpp"

namespace mindvis::diffusion {

enum class ScheduleKind { Linear };

// Tables are indexed by t in [1, T]; index 0 holds alpha_bar = 1 (no noise).
struct NoiseSchedule {
  int T = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double beta(int t) const { return betas.at(static_cast<std::size_t>(t)); }
  double alpha(int t) const { return alphas.at(static_cast<std::size_t>(t)); }
  double alpha_bar(int t) const { return alpha_bars.at(static_cast<std::size_t>(t)); }
};

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind = ScheduleKind::Linear);

Tensor forward_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);

// Conditioning payloads: tau [M, d_tau] for cross-attention and sigma
// [1, d_t] for the time embedding.
struct ConditionBundle {
  Tensor tau;
  Tensor sigma;

  bool operator==(const ConditionBundle&) const = default;
};

// The same payloads as graph values, so gradients reach the projector.
struct ConditionVars {
  Var tau;
  Var sigma;
};

ConditionVars as_constants(Tape& tape, const ConditionBundle& cond);

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual std::vector<int> latent_shape() const = 0;
  // Predicted noise for x_t at step t; cond may be null for an unconditional
  // call.
  virtual Var predict(Tape& tape, Var x_t, int t, const ConditionVars* cond) const = 0;
};

Var simple_loss(const Denoiser& model, Tape& tape, const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);
Var cond_loss(const Denoiser& model, Tape& tape, const Tensor& x0, int t, const Tensor& eps, const ConditionVars& cond,
              const NoiseSchedule& s);

// clip_x0 > 0 clamps each predicted clean sample into [-clip_x0, clip_x0]
// before the update; 0 disables it.
Tensor ddpm_sample(const Denoiser& model, const ConditionBundle* cond, const NoiseSchedule& s, Rng& rng,
                   double clip_x0 = 0.0);

struct PlmsReport {
  // Set when steps < 4: the fourth-order window never fills.
  bool low_order_warning = false;
  std::vector<int> timesteps;  // descending
};

// Uniformly strided sub-schedule t_i = 1 + floor(i * T / steps).
std::vector<int> plms_timesteps(int T, int steps);

Tensor plms_sample(const Denoiser& model, const ConditionBundle* cond, const NoiseSchedule& s, int steps, Rng& rng,
                   PlmsReport* report = nullptr, double clip_x0 = 0.0);

}  // namespace mindvis::diffusion

#include "mindvis/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "mindvis/errors.hpp"

namespace mindvis::diffusion {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind) {
  if (T < 1) throw InvalidArgument("schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end) {
    throw InvalidArgument("schedule: need 0 < beta_start <= beta_end < 1");
  }
  if (kind != ScheduleKind::Linear) throw InvalidArgument("schedule: unsupported kind");
  NoiseSchedule s;
  s.T = T;
  s.betas.assign(static_cast<std::size_t>(T) + 1, 0.0);
  s.alphas.assign(static_cast<std::size_t>(T) + 1, 1.0);
  s.alpha_bars.assign(static_cast<std::size_t>(T) + 1, 1.0);
  for (int t = 1; t <= T; ++t) {
    const auto u = static_cast<std::size_t>(t);
    s.betas[u] = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * (t - 1) / (T - 1);
    s.alphas[u] = 1.0 - s.betas[u];
    s.alpha_bars[u] = s.alpha_bars[u - 1] * s.alphas[u];
  }
  return s;
}

Tensor forward_sample(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  if (t < 1 || t > s.T) throw InvalidArgument("forward_sample: t=" + std::to_string(t) + " outside [1, T]");
  if (!x0.same_shape(eps)) throw ShapeError("forward_sample: x0 and eps shapes differ");
  const double a = std::sqrt(s.alpha_bar(t)), b = std::sqrt(1.0 - s.alpha_bar(t));
  Tensor out(x0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

ConditionVars as_constants(Tape& tape, const ConditionBundle& cond) {
  ConditionVars v;
  v.tau = tape.constant(cond.tau);
  if (!cond.sigma.empty()) v.sigma = tape.constant(cond.sigma);
  return v;
}

namespace {

Var eps_loss(const Denoiser& model, Tape& tape, const Tensor& x0, int t, const Tensor& eps, const ConditionVars* cond,
             const NoiseSchedule& s) {
  const Tensor xt = forward_sample(x0, t, eps, s);
  Var pred = model.predict(tape, tape.constant(xt), t, cond);
  if (pred.shape() != eps.shape()) throw ShapeError("denoiser output shape differs from the latent");
  return mse(pred, tape.constant(eps));
}

Tensor predict_eps(const Denoiser& model, const Tensor& x, int t, const ConditionBundle* cond) {
  Tape tape;
  ConditionVars cv;
  if (cond) cv = as_constants(tape, *cond);
  Tensor e = model.predict(tape, tape.constant(x), t, cond ? &cv : nullptr).value();
  if (!e.all_finite()) throw NumericError("denoiser produced non-finite output at t=" + std::to_string(t));
  return e;
}

Tensor gaussian(const std::vector<int>& shape, Rng& rng) {
  Tensor x(shape);
  for (double& v : x.values()) v = rng.normal();
  return x;
}

}  // namespace

Var simple_loss(const Denoiser& model, Tape& tape, const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
  return eps_loss(model, tape, x0, t, eps, nullptr, s);
}

Var cond_loss(const Denoiser& model, Tape& tape, const Tensor& x0, int t, const Tensor& eps, const ConditionVars& cond,
              const NoiseSchedule& s) {
  if (!cond.tau.valid()) throw InvalidArgument("cond_loss: conditioning payload missing");
  return eps_loss(model, tape, x0, t, eps, &cond, s);
}

namespace {

double clip(double v, double bound) { return bound > 0.0 ? std::clamp(v, -bound, bound) : v; }

}  // namespace

Tensor ddpm_sample(const Denoiser& model, const ConditionBundle* cond, const NoiseSchedule& s, Rng& rng,
                   double clip_x0) {
  Tensor x = gaussian(model.latent_shape(), rng);
  for (int t = s.T; t >= 1; --t) {
    const Tensor e = predict_eps(model, x, t, cond);
    const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
    const double c0 = std::sqrt(ab_prev) * s.beta(t) / (1.0 - ab);
    const double ct = std::sqrt(s.alpha(t)) * (1.0 - ab_prev) / (1.0 - ab);
    const double sd = std::sqrt((1.0 - ab_prev) / (1.0 - ab) * s.beta(t));
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double x0 = clip((x[i] - std::sqrt(1.0 - ab) * e[i]) / std::sqrt(ab), clip_x0);
      x[i] = c0 * x0 + ct * x[i];
    }
    if (t > 1) {
      for (double& v : x.values()) v += sd * rng.normal();
    }
  }
  return x;
}

std::vector<int> plms_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw InvalidArgument("plms: steps must be in [1, T]");
  std::vector<int> ts;
  for (int i = steps - 1; i >= 0; --i) ts.push_back(1 + static_cast<int>(static_cast<long>(i) * T / steps));
  return ts;
}

Tensor plms_sample(const Denoiser& model, const ConditionBundle* cond, const NoiseSchedule& s, int steps, Rng& rng,
                   PlmsReport* report, double clip_x0) {
  const std::vector<int> ts = plms_timesteps(s.T, steps);
  if (report) {
    report->timesteps = ts;
    report->low_order_warning = steps < 4;
  }
  if (steps < 4) {
    std::cerr << "warning: plms with " << steps << " steps never reaches fourth order\n";
  }
  Tensor x = gaussian(model.latent_shape(), rng);
  std::vector<Tensor> history;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const Tensor e = predict_eps(model, x, t, cond);
    Tensor ep(e.shape());
    const std::size_t h = history.size();
    for (std::size_t k = 0; k < e.size(); ++k) {
      if (h == 0) {
        ep[k] = e[k];
      } else if (h == 1) {
        ep[k] = (3.0 * e[k] - history[0][k]) / 2.0;
      } else if (h == 2) {
        ep[k] = (23.0 * e[k] - 16.0 * history[1][k] + 5.0 * history[0][k]) / 12.0;
      } else {
        ep[k] = (55.0 * e[k] - 59.0 * history[2][k] + 37.0 * history[1][k] - 9.0 * history[0][k]) / 24.0;
      }
    }
    history.push_back(e);
    if (history.size() > 3) history.erase(history.begin());
    const double ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t_prev);
    for (std::size_t k = 0; k < x.size(); ++k) {
      const double x0 = (x[k] - std::sqrt(1.0 - ab) * ep[k]) / std::sqrt(ab);
      const double x0c = clip(x0, clip_x0);
      const double dir = x0c == x0 ? ep[k] : (x[k] - std::sqrt(ab) * x0c) / std::sqrt(1.0 - ab);
      x[k] = std::sqrt(ab_prev) * x0c + std::sqrt(1.0 - ab_prev) * dir;
    }
  }
  return x;
}

}  // namespace mindvis::diffusion

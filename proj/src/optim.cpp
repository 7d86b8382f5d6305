#include "mindvis/optim.hpp"

#include <cmath>
#include <numbers>

#include "mindvis/errors.hpp"

namespace mindvis {

void OptimizerConfig::validate() const {
  if (!(peak_lr > 0.0)) throw ConfigError("optimizer: peak_lr must be > 0");
  if (weight_decay < 0.0) throw ConfigError("optimizer: weight_decay must be >= 0");
  if (max_epochs < 1) throw ConfigError("optimizer: max_epochs must be >= 1");
  if (warmup_epochs < 0 || warmup_epochs > max_epochs) throw ConfigError("optimizer: warmup_epochs must be in [0, max_epochs]");
  if (batch_size < 1) throw ConfigError("optimizer: batch_size must be >= 1");
  if (!(grad_clip_norm > 0.0)) throw ConfigError("optimizer: grad_clip_norm must be > 0");
}

LrSchedule::LrSchedule(double peak_lr, long warmup_steps, long total_steps)
    : peak_(peak_lr), warmup_(warmup_steps), total_(total_steps) {
  if (total_steps < 1 || warmup_steps < 0 || warmup_steps > total_steps) {
    throw InvalidArgument("lr schedule: need 0 <= warmup_steps <= total_steps, total_steps >= 1");
  }
}

double LrSchedule::at(long step) const {
  if (step < warmup_) return peak_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
  if (step >= total_) return 0.0;
  const double progress = static_cast<double>(step - warmup_) / static_cast<double>(total_ - warmup_);
  return 0.5 * peak_ * (1.0 + std::cos(std::numbers::pi * progress));
}

double grad_norm(const std::vector<ParamStore*>& stores) {
  double ss = 0.0;
  for (ParamStore* s : stores)
    for (auto& [name, p] : *s) {
      if (!p.trainable || p.grad.empty()) continue;
      for (double g : p.grad.values()) ss += g * g;
    }
  return std::sqrt(ss);
}

double clip_grad_norm(const std::vector<ParamStore*>& stores, double max_norm) {
  const double norm = grad_norm(stores);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (ParamStore* s : stores)
      for (auto& [name, p] : *s) {
        if (!p.trainable || p.grad.empty()) continue;
        for (double& g : p.grad.values()) g *= f;
      }
  }
  return norm;
}

AdamW::AdamW(std::vector<ParamStore*> stores, const OptimizerConfig& cfg) : stores_(std::move(stores)), cfg_(cfg) {
  for (ParamStore* s : stores_)
    for (auto& [name, p] : *s) {
      if (!p.trainable) continue;
      if (slots_.count(name)) throw InvalidArgument("optimizer: duplicate parameter name " + name);
      slots_.emplace(name, Slot{&p, Tensor(p.value.shape()), Tensor(p.value.shape())});
    }
}

void AdamW::step(double lr) {
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& [name, slot] : slots_) {
    Parameter& p = *slot.p;
    if (!p.trainable) throw PolicyViolation("optimizer: parameter " + name + " was frozen after optimizer creation");
    if (p.grad.empty()) p.grad = Tensor(p.value.shape());
    auto w = p.value.values();
    auto g = p.grad.values();
    auto m = slot.m.values();
    auto v = slot.v.values();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      w[i] -= lr * cfg_.weight_decay * w[i];
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (ParamStore* s : stores_) s->zero_grad();
}

std::map<std::string, Tensor> AdamW::state() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, slot] : slots_) {
    out.emplace(name + ".m", slot.m);
    out.emplace(name + ".v", slot.v);
  }
  return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& state, long steps_taken) {
  for (auto& [name, slot] : slots_) {
    auto m = state.find(name + ".m");
    auto v = state.find(name + ".v");
    if (m == state.end() || v == state.end()) throw FormatError("optimizer state is missing moments for " + name);
    if (m->second.shape() != slot.m.shape() || v->second.shape() != slot.v.shape()) {
      throw ShapeError("optimizer state shape mismatch for " + name);
    }
    slot.m = m->second;
    slot.v = v->second;
  }
  t_ = steps_taken;
}

}  // namespace mindvis

#pragma once

#include <map>
#include <string>
#include <vector>

#include "mindvis/autograd.hpp"

namespace mindvis {

struct OptimizerConfig {
  double peak_lr = 2.5e-4;
  double weight_decay = 0.05;
  int warmup_epochs = 40;
  int max_epochs = 500;
  int batch_size = 500;
  double grad_clip_norm = 0.8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

// Linear warm-up to peak_lr over the first warmup_steps (step s gets
// peak * (s + 1) / warmup_steps), then cosine decay reaching 0 at total_steps.
class LrSchedule {
 public:
  LrSchedule(double peak_lr, long warmup_steps, long total_steps);
  double at(long step) const;

 private:
  double peak_;
  long warmup_;
  long total_;
};

// Scales trainable gradients in place so their global L2 norm is at most
// max_norm; returns the norm before clipping.
double clip_grad_norm(const std::vector<ParamStore*>& stores, double max_norm);
double grad_norm(const std::vector<ParamStore*>& stores);

// Adam with decoupled weight decay over the trainable parameters of a fixed
// set of stores. Parameter names must be unique across the stores.
class AdamW {
 public:
  AdamW(std::vector<ParamStore*> stores, const OptimizerConfig& cfg);

  void step(double lr);
  void zero_grad();
  long steps_taken() const { return t_; }

  // Moments keyed "<name>.m" / "<name>.v", for checkpointing.
  std::map<std::string, Tensor> state() const;
  void load_state(const std::map<std::string, Tensor>& state, long steps_taken);

 private:
  struct Slot {
    Parameter* p;
    Tensor m, v;
  };
  std::vector<ParamStore*> stores_;
  std::map<std::string, Slot> slots_;
  OptimizerConfig cfg_;
  long t_ = 0;
};

}  // namespace mindvis

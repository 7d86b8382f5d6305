#pragma once

// Central finite-difference checks against tape gradients. Test-only; the
// difference quotients never touch the backward closures they verify.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mindvis/autograd.hpp"

namespace mindvis::testing {

struct GradReport {
  double max_rel = 0.0;
  std::string worst;
  int checked = 0;
  int nonzero = 0;
};

inline double rel_err(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Gradient of a scalar function of free leaves.
inline GradReport check_leaves(std::vector<Tensor> inputs, const std::function<Var(Tape&, const std::vector<Var>&)>& f,
                               double h = 1e-6) {
  GradReport rep;
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    Var out = f(tape, vars);
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }
  auto eval = [&](const std::vector<Tensor>& in) {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : in) vars.push_back(tape.constant(t));
    return f(tape, vars).value()[0];
  };
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[k][i] += h;
      minus[k][i] -= h;
      const double num = (eval(plus) - eval(minus)) / (2.0 * h);
      const double a = analytic[k][i];
      const double e = rel_err(a, num);
      ++rep.checked;
      if (std::abs(num) > 1e-9) ++rep.nonzero;
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.worst = "input " + std::to_string(k) + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(num);
      }
    }
  }
  return rep;
}

// Gradient of a scalar loss w.r.t. every trainable parameter in the stores.
// `stride` > 1 samples every stride-th element of large tensors.
inline GradReport check_params(const std::vector<ParamStore*>& stores, const std::function<Var(Tape&)>& loss,
                               double h = 1e-6, std::size_t stride = 1) {
  GradReport rep;
  for (ParamStore* s : stores) s->zero_grad();
  {
    Tape tape;
    tape.backward(loss(tape));
  }
  auto eval = [&]() {
    Tape tape;
    return loss(tape).value()[0];
  };
  for (ParamStore* s : stores) {
    for (auto& [name, p] : *s) {
      if (!p.trainable) continue;
      for (std::size_t i = 0; i < p.value.size(); i += stride) {
        const double orig = p.value[i];
        p.value[i] = orig + h;
        const double lp = eval();
        p.value[i] = orig - h;
        const double lm = eval();
        p.value[i] = orig;
        const double num = (lp - lm) / (2.0 * h);
        const double a = p.grad[i];
        const double e = rel_err(a, num);
        ++rep.checked;
        if (std::abs(num) > 1e-9) ++rep.nonzero;
        if (e > rep.max_rel) {
          rep.max_rel = e;
          rep.worst = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(a) + " numeric=" + std::to_string(num);
        }
      }
    }
  }
  return rep;
}

}  // namespace mindvis::testing

#include "mindvis/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "mindvis/errors.hpp"

namespace mindvis {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

MapMat as_mat(Tensor& t, int r, int c) { return MapMat(t.data(), r, c); }
CMapMat as_mat(const Tensor& t, int r, int c) { return CMapMat(t.data(), r, c); }

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.tape() != b.tape()) throw InvalidArgument(std::string(op) + ": operands on different tapes");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void require_2d(const Var& a, const char* op) {
  if (a.value().ndim() != 2) throw ShapeError(std::string(op) + ": expected a 2D tensor, got " + shape_str(a.shape()));
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

template <typename F, typename D>
Var unary(Var a, F f, D dfdx) {
  const Tensor& x = a.value();
  Tensor y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const int ia = a.id();
  return a.tape()->record(std::move(y), {a}, [ia, dfdx](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    Tensor& ga = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dfdx(xv[i]);
  });
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

Parameter& ParamStore::add(const std::string& name, Tensor init, bool trainable) {
  if (params_.count(name)) throw InvalidArgument("duplicate parameter name: " + name);
  Parameter p;
  p.grad = Tensor(init.shape());
  p.value = std::move(init);
  p.trainable = trainable;
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw InvalidArgument("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw InvalidArgument("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.fill(0.0);
}

void ParamStore::set_trainable(bool trainable) {
  for (auto& [_, p] : params_) p.trainable = trainable;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += p.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = p.trainable;
  n.param = p.trainable ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape() != this) throw InvalidArgument("operand recorded on a different tape");
    if (requires_grad(v.id())) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var out) {
  if (out.tape() != this) throw InvalidArgument("backward on a foreign variable");
  if (out.value().size() != 1) throw ShapeError("backward expects a scalar output, got " + shape_str(out.shape()));
  if (!requires_grad(out.id())) return;
  grad_buffer(out.id())[0] = 1.0;
  for (int i = out.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
  }
  for (Node& n : nodes_) {
    if (n.param && !n.grad.empty()) {
      Tensor& pg = n.param->grad;
      if (pg.size() != n.grad.size()) pg = Tensor(n.value.shape());
      for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
    }
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.grad.empty()) return Tensor(n.value.shape());
  return n.grad;
}

// ---------------------------------------------------------------------------
// Elementwise

Var add(Var a, Var b) {
  require_same(a, b, "add");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    for (int id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      Tensor& gx = t.grad_buffer(id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same(a, b, "sub");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor& gx = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gy = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gy[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same(a, b, "mul");
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    const Tensor& yv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& gx = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gy = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gy[i] += g[i] * xv[i];
    }
  });
}

Var scale(Var a, double s) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, s](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
}

Var add_scalar(Var a, double s) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + s;
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var add_row(Var a, Var b) {
  const int n = a.value().rows(), d = a.value().cols();
  if (static_cast<int>(b.value().size()) != d) {
    throw ShapeError("add_row: bias of size " + std::to_string(b.value().size()) + " for rows of width " + std::to_string(d));
  }
  const Tensor& x = a.value();
  const Tensor& v = b.value();
  Tensor out(x.shape());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) out.at(r, c) = x.at(r, c) + v[static_cast<std::size_t>(c)];
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib, n, d](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor& gx = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gv = t.grad_buffer(ib);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) gv[static_cast<std::size_t>(c)] += g.at(r, c);
    }
  });
}

Var mul_row(Var a, Var gam) {
  const int n = a.value().rows(), d = a.value().cols();
  if (static_cast<int>(gam.value().size()) != d) throw ShapeError("mul_row: scale width mismatch");
  const Tensor& x = a.value();
  const Tensor& v = gam.value();
  Tensor out(x.shape());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) out.at(r, c) = x.at(r, c) * v[static_cast<std::size_t>(c)];
  const int ia = a.id(), ib = gam.id();
  return a.tape()->record(std::move(out), {a, gam}, [ia, ib, n, d](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    const Tensor& vv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& gx = t.grad_buffer(ia);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) gx.at(r, c) += g.at(r, c) * vv[static_cast<std::size_t>(c)];
    }
    if (t.requires_grad(ib)) {
      Tensor& gv = t.grad_buffer(ib);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) gv[static_cast<std::size_t>(c)] += g.at(r, c) * xv.at(r, c);
    }
  });
}

Var add_col(Var a, Var b) {
  const int n = a.value().rows(), d = a.value().cols();
  if (static_cast<int>(b.value().size()) != n) throw ShapeError("add_col: bias height mismatch");
  const Tensor& x = a.value();
  const Tensor& v = b.value();
  Tensor out(x.shape());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) out.at(r, c) = x.at(r, c) + v[static_cast<std::size_t>(r)];
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib, n, d](Tape& t, const Tensor& g) {
    if (t.requires_grad(ia)) {
      Tensor& gx = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      Tensor& gv = t.grad_buffer(ib);
      for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) s += g.at(r, c);
        gv[static_cast<std::size_t>(r)] += s;
      }
    }
  });
}

Var mul_col(Var a, Var gam) {
  const int n = a.value().rows(), d = a.value().cols();
  if (static_cast<int>(gam.value().size()) != n) throw ShapeError("mul_col: scale height mismatch");
  const Tensor& x = a.value();
  const Tensor& v = gam.value();
  Tensor out(x.shape());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) out.at(r, c) = x.at(r, c) * v[static_cast<std::size_t>(r)];
  const int ia = a.id(), ib = gam.id();
  return a.tape()->record(std::move(out), {a, gam}, [ia, ib, n, d](Tape& t, const Tensor& g) {
    const Tensor& xv = t.value(ia);
    const Tensor& vv = t.value(ib);
    if (t.requires_grad(ia)) {
      Tensor& gx = t.grad_buffer(ia);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < d; ++c) gx.at(r, c) += g.at(r, c) * vv[static_cast<std::size_t>(r)];
    }
    if (t.requires_grad(ib)) {
      Tensor& gv = t.grad_buffer(ib);
      for (int r = 0; r < n; ++r) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) s += g.at(r, c) * xv.at(r, c);
        gv[static_cast<std::size_t>(r)] += s;
      }
    }
  });
}

Var silu(Var a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var gelu(Var a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x) { return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x); });
}

Var relu(Var a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double x) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 - s);
      });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const int m = a.value().rows(), k = a.value().cols(), n = b.value().cols();
  if (b.value().rows() != k) {
    throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  as_mat(out, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), k, n);
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, const Tensor& g) {
    auto gm = as_mat(g, m, n);
    if (t.requires_grad(ia)) as_mat(t.grad_buffer(ia), m, k).noalias() += gm * as_mat(t.value(ib), k, n).transpose();
    if (t.requires_grad(ib)) as_mat(t.grad_buffer(ib), k, n).noalias() += as_mat(t.value(ia), m, k).transpose() * gm;
  });
}

Var matmul_nt(Var a, Var b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  const int m = a.value().rows(), k = a.value().cols(), n = b.value().rows();
  if (b.value().cols() != k) {
    throw ShapeError("matmul_nt: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  }
  Tensor out({m, n});
  as_mat(out, m, n).noalias() = as_mat(a.value(), m, k) * as_mat(b.value(), n, k).transpose();
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape& t, const Tensor& g) {
    auto gm = as_mat(g, m, n);
    if (t.requires_grad(ia)) as_mat(t.grad_buffer(ia), m, k).noalias() += gm * as_mat(t.value(ib), n, k);
    if (t.requires_grad(ib)) as_mat(t.grad_buffer(ib), n, k).noalias() += gm.transpose() * as_mat(t.value(ia), m, k);
  });
}

Var transpose(Var a) {
  require_2d(a, "transpose");
  const int m = a.value().rows(), n = a.value().cols();
  Tensor out({n, m});
  as_mat(out, n, m) = as_mat(a.value(), m, n).transpose();
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, m, n](Tape& t, const Tensor& g) {
    as_mat(t.grad_buffer(ia), m, n) += as_mat(g, n, m).transpose();
  });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

// ---------------------------------------------------------------------------
// Normalisation

Var softmax_rows(Var a) {
  const Tensor& x = a.value();
  const int n = x.rows(), d = x.cols();
  Tensor out(x.shape());
  for (int r = 0; r < n; ++r) {
    double mx = x.at(r, 0);
    for (int c = 1; c < d; ++c) mx = std::max(mx, x.at(r, c));
    double s = 0.0;
    for (int c = 0; c < d; ++c) {
      out.at(r, c) = std::exp(x.at(r, c) - mx);
      s += out.at(r, c);
    }
    for (int c = 0; c < d; ++c) out.at(r, c) /= s;
  }
  Tensor y = out;
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, n, d, y = std::move(y)](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (int r = 0; r < n; ++r) {
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += g.at(r, c) * y.at(r, c);
      for (int c = 0; c < d; ++c) gx.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
    }
  });
}

Var normalize_rows(Var a, double eps) {
  const Tensor& x = a.value();
  const int n = x.rows(), d = x.cols();
  Tensor out(x.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    double mu = 0.0;
    for (int c = 0; c < d; ++c) mu += x.at(r, c);
    mu /= d;
    double var = 0.0;
    for (int c = 0; c < d; ++c) var += (x.at(r, c) - mu) * (x.at(r, c) - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<std::size_t>(r)] = is;
    for (int c = 0; c < d; ++c) out.at(r, c) = (x.at(r, c) - mu) * is;
  }
  Tensor y = out;
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a},
                          [ia, n, d, y = std::move(y), inv_std = std::move(inv_std)](Tape& t, const Tensor& g) {
                            Tensor& gx = t.grad_buffer(ia);
                            for (int r = 0; r < n; ++r) {
                              double mg = 0.0, mgy = 0.0;
                              for (int c = 0; c < d; ++c) {
                                mg += g.at(r, c);
                                mgy += g.at(r, c) * y.at(r, c);
                              }
                              mg /= d;
                              mgy /= d;
                              const double is = inv_std[static_cast<std::size_t>(r)];
                              for (int c = 0; c < d; ++c) gx.at(r, c) += is * (g.at(r, c) - mg - y.at(r, c) * mgy);
                            }
                          });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  return add_row(mul_row(normalize_rows(x, eps), gamma), beta);
}

Var group_norm(Var x, int groups, Var gamma, Var beta, double eps) {
  const std::vector<int> shape = x.shape();
  const int c = x.value().rows();
  if (groups <= 0 || c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const int per = static_cast<int>(x.value().size()) / groups;
  Var g = normalize_rows(reshape(x, {groups, per}), eps);
  Var flat = reshape(g, {c, static_cast<int>(x.value().size()) / c});
  return reshape(add_col(mul_col(flat, gamma), beta), shape);
}

// ---------------------------------------------------------------------------
// Shape manipulation

Var reshape(Var a, std::vector<int> shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var slice_cols(Var a, int start, int len) {
  const Tensor& x = a.value();
  const int n = x.rows(), d = x.cols();
  if (start < 0 || len < 0 || start + len > d) throw ShapeError("slice_cols: range out of bounds");
  Tensor out({n, len});
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < len; ++c) out.at(r, c) = x.at(r, start + c);
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, n, start, len](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < len; ++c) gx.at(r, start + c) += g.at(r, c);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int n = parts[0].value().rows();
  int total = 0;
  std::vector<int> widths;
  for (const Var& p : parts) {
    if (p.value().rows() != n) throw ShapeError("concat_cols: row count mismatch");
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out({n, total});
  int off = 0;
  for (const Var& p : parts) {
    const Tensor& x = p.value();
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < x.cols(); ++c) out.at(r, off + c) = x.at(r, c);
    off += x.cols();
  }
  std::vector<int> ids;
  for (const Var& p : parts) ids.push_back(p.id());
  return parts[0].tape()->record(std::move(out), parts, [ids, widths, n](Tape& t, const Tensor& g) {
    int o = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) {
        Tensor& gx = t.grad_buffer(ids[i]);
        for (int r = 0; r < n; ++r)
          for (int c = 0; c < widths[i]; ++c) gx.at(r, c) += g.at(r, o + c);
      }
      o += widths[i];
    }
  });
}

Var slice_rows(Var a, int start, int len) {
  const Tensor& x = a.value();
  if (start < 0 || len < 0 || start + len > x.rows()) throw ShapeError("slice_rows: range out of bounds");
  const std::size_t stride = static_cast<std::size_t>(x.cols());
  std::vector<int> shape = x.shape();
  shape[0] = len;
  Tensor out(shape);
  std::copy(x.data() + static_cast<std::size_t>(start) * stride,
            x.data() + static_cast<std::size_t>(start + len) * stride, out.data());
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, start, stride](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    const std::size_t off = static_cast<std::size_t>(start) * stride;
    for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  std::vector<int> shape = parts[0].shape();
  int rows = 0;
  for (const Var& p : parts) {
    std::vector<int> s = p.shape();
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw ShapeError("concat_rows: trailing dims mismatch " + shape_str(s) + " vs " + shape_str(shape));
    }
    rows += s[0];
  }
  shape[0] = rows;
  Tensor out(shape);
  std::size_t off = 0;
  std::vector<int> ids;
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + off);
    off += p.value().size();
    ids.push_back(p.id());
    sizes.push_back(p.value().size());
  }
  return parts[0].tape()->record(std::move(out), parts, [ids, sizes](Tape& t, const Tensor& g) {
    std::size_t o = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) {
        Tensor& gx = t.grad_buffer(ids[i]);
        for (std::size_t k = 0; k < sizes[i]; ++k) gx[k] += g[o + k];
      }
      o += sizes[i];
    }
  });
}

Var gather_rows(Var a, const std::vector<int>& idx) {
  const Tensor& x = a.value();
  const int d = x.cols();
  Tensor out({static_cast<int>(idx.size()), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    for (int c = 0; c < d; ++c) out.at(static_cast<int>(i), c) = x.at(idx[i], c);
  }
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, idx, d](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int c = 0; c < d; ++c) gx.at(idx[i], c) += g.at(static_cast<int>(i), c);
  });
}

Var repeat_rows(Var a, int n) {
  const Tensor& x = a.value();
  if (x.rows() != 1) throw ShapeError("repeat_rows: expected a single row");
  const int d = x.cols();
  Tensor out({n, d});
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) out.at(r, c) = x[static_cast<std::size_t>(c)];
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, n, d](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < d; ++c) gx[static_cast<std::size_t>(c)] += g.at(r, c);
  });
}

Var mean_rows(Var a) {
  const Tensor& x = a.value();
  const int n = x.rows(), d = x.cols();
  Tensor out({1, d});
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(c)] += x.at(r, c);
  for (int c = 0; c < d; ++c) out[static_cast<std::size_t>(c)] /= n;
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, n, d](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < d; ++c) gx.at(r, c) += g[static_cast<std::size_t>(c)] / n;
  });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.values()) s += v;
  const int ia = a.id();
  return a.tape()->record(Tensor::scalar(s), {a}, [ia](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mse(Var a, Var b) { return mean(square(sub(a, b))); }

Var cross_entropy(Var logits, int label) {
  const Tensor& x = logits.value();
  const int c = static_cast<int>(x.size());
  if (label < 0 || label >= c) throw InvalidArgument("cross_entropy: label out of range");
  double mx = x[0];
  for (int i = 1; i < c; ++i) mx = std::max(mx, x[static_cast<std::size_t>(i)]);
  double s = 0.0;
  std::vector<double> p(static_cast<std::size_t>(c));
  for (int i = 0; i < c; ++i) {
    p[static_cast<std::size_t>(i)] = std::exp(x[static_cast<std::size_t>(i)] - mx);
    s += p[static_cast<std::size_t>(i)];
  }
  for (double& v : p) v /= s;
  const double loss = -std::log(p[static_cast<std::size_t>(label)]);
  const int ia = logits.id();
  return logits.tape()->record(Tensor::scalar(loss), {logits}, [ia, p, label](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (std::size_t i = 0; i < p.size(); ++i) {
      gx[i] += g[0] * (p[i] - (static_cast<int>(i) == label ? 1.0 : 0.0));
    }
  });
}

// ---------------------------------------------------------------------------
// Spatial

Var conv2d(Var x, Var weight, Var bias, int kernel, int stride, int pad) {
  const Tensor& in = x.value();
  if (in.ndim() != 3) throw ShapeError("conv2d: expected [C, H, W] input, got " + shape_str(in.shape()));
  const int cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  const int cout = weight.value().rows();
  const int kk = cin * kernel * kernel;
  if (weight.value().cols() != kk) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with " + std::to_string(cin) +
                     " input channels and kernel " + std::to_string(kernel));
  }
  if (static_cast<int>(bias.value().size()) != cout) throw ShapeError("conv2d: bias size mismatch");
  const int ho = (h + 2 * pad - kernel) / stride + 1;
  const int wo = (w + 2 * pad - kernel) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: output would be empty");
  const int npix = ho * wo;

  Tensor cols({kk, npix});
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < kernel; ++ky)
      for (int kx = 0; kx < kernel; ++kx) {
        const int row = (ci * kernel + ky) * kernel + kx;
        double* dst = cols.data() + static_cast<std::size_t>(row) * static_cast<std::size_t>(npix);
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride + ky - pad;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride + kx - pad;
            dst[oy * wo + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    ? in[(static_cast<std::size_t>(ci) * h + iy) * w + ix]
                                    : 0.0;
          }
        }
      }

  Tensor out({cout, ho, wo});
  auto om = as_mat(out, cout, npix);
  om.noalias() = as_mat(weight.value(), cout, kk) * as_mat(cols, kk, npix);
  const Tensor& b = bias.value();
  for (int co = 0; co < cout; ++co) om.row(co).array() += b[static_cast<std::size_t>(co)];

  const int ix_ = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape()->record(
      std::move(out), {x, weight, bias},
      [=, cols = std::move(cols)](Tape& t, const Tensor& g) {
        auto gm = as_mat(g, cout, npix);
        if (t.requires_grad(iw)) as_mat(t.grad_buffer(iw), cout, kk).noalias() += gm * as_mat(cols, kk, npix).transpose();
        if (t.requires_grad(ib)) {
          Tensor& gb = t.grad_buffer(ib);
          for (int co = 0; co < cout; ++co) gb[static_cast<std::size_t>(co)] += gm.row(co).sum();
        }
        if (t.requires_grad(ix_)) {
          RowMat dcols = as_mat(t.value(iw), cout, kk).transpose() * gm;
          Tensor& gx = t.grad_buffer(ix_);
          for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kernel; ++ky)
              for (int kx = 0; kx < kernel; ++kx) {
                const int row = (ci * kernel + ky) * kernel + kx;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride + ky - pad;
                  if (iy < 0 || iy >= h) continue;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= w) continue;
                    gx[(static_cast<std::size_t>(ci) * h + iy) * w + ix] += dcols(row, oy * wo + ox);
                  }
                }
              }
        }
      });
}

Var upsample_nearest2(Var x) {
  const Tensor& in = x.value();
  if (in.ndim() != 3) throw ShapeError("upsample_nearest2: expected [C, H, W]");
  const int c = in.dim(0), h = in.dim(1), w = in.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx] = in[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
  const int ia = x.id();
  return x.tape()->record(std::move(out), {x}, [ia, c, h, w](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          gx[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] += g[(static_cast<std::size_t>(ch) * 2 * h + y) * 2 * w + xx];
  });
}

Var avg_pool2(Var x) {
  const Tensor& in = x.value();
  if (in.ndim() != 3 || in.dim(1) % 2 || in.dim(2) % 2) throw ShapeError("avg_pool2: expected [C, H, W] with even H, W");
  const int c = in.dim(0), h = in.dim(1) / 2, w = in.dim(2) / 2;
  const int iw = 2 * w;
  Tensor out({c, h, w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        const std::size_t base = (static_cast<std::size_t>(ch) * 2 * h + 2 * y) * iw + 2 * xx;
        out[(static_cast<std::size_t>(ch) * h + y) * w + xx] =
            0.25 * (in[base] + in[base + 1] + in[base + iw] + in[base + iw + 1]);
      }
  const int ia = x.id();
  return x.tape()->record(std::move(out), {x}, [ia, c, h, w, iw](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_buffer(ia);
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
          const double v = 0.25 * g[(static_cast<std::size_t>(ch) * h + y) * w + xx];
          const std::size_t base = (static_cast<std::size_t>(ch) * 2 * h + 2 * y) * iw + 2 * xx;
          gx[base] += v;
          gx[base + 1] += v;
          gx[base + iw] += v;
          gx[base + iw + 1] += v;
        }
  });
}

}  // namespace mindvis

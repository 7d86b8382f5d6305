#include "mindvis/nn.hpp"

#include <algorithm>
#include <cmath>

#include "mindvis/errors.hpp"

namespace mindvis::nn {

Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.values()) v = rng.uniform(-a, a);
  return t;
}

Tensor normal_init(std::vector<int> shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = stddev * rng.normal();
  return t;
}

Tensor sinusoidal_table(int positions, int dim) {
  Tensor t({positions, dim});
  const int half = dim / 2;
  for (int p = 0; p < positions; ++p) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / std::max(half, 1));
      t.at(p, i) = std::sin(p * freq);
      t.at(p, half + i) = std::cos(p * freq);
    }
  }
  return t;
}

Tensor timestep_embedding(double step, int dim) {
  Tensor t({1, dim});
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / std::max(half, 1));
    t[static_cast<std::size_t>(i)] = std::cos(step * freq);
    t[static_cast<std::size_t>(half + i)] = std::sin(step * freq);
  }
  return t;
}

Linear Linear::make(ParamStore& store, const std::string& name, int in, int out, Rng& rng, bool zero_init) {
  Linear l;
  l.in = in;
  l.out = out;
  l.w = &store.add(name + ".w", zero_init ? Tensor({in, out}) : xavier_uniform({in, out}, in, out, rng));
  l.b = &store.add(name + ".b", Tensor({out}));
  return l;
}

Var Linear::operator()(Tape& tape, Var x) const { return linear(x, tape.param(*w), tape.param(*b)); }

LayerNorm LayerNorm::make(ParamStore& store, const std::string& name, int dim) {
  LayerNorm ln;
  ln.gamma = &store.add(name + ".gamma", Tensor({dim}, 1.0));
  ln.beta = &store.add(name + ".beta", Tensor({dim}));
  return ln;
}

Var LayerNorm::operator()(Tape& tape, Var x) const {
  return layer_norm(x, tape.param(*gamma), tape.param(*beta));
}

GroupNorm GroupNorm::make(ParamStore& store, const std::string& name, int channels, int groups) {
  if (channels % groups != 0) throw InvalidArgument(name + ": channels must be divisible by groups");
  GroupNorm gn;
  gn.groups = groups;
  gn.gamma = &store.add(name + ".gamma", Tensor({channels}, 1.0));
  gn.beta = &store.add(name + ".beta", Tensor({channels}));
  return gn;
}

Var GroupNorm::operator()(Tape& tape, Var x) const {
  return group_norm(x, groups, tape.param(*gamma), tape.param(*beta));
}

Conv2d Conv2d::make(ParamStore& store, const std::string& name, int cin, int cout, int kernel, int stride, int pad,
                    Rng& rng, bool zero_init) {
  Conv2d c;
  c.cin = cin;
  c.cout = cout;
  c.kernel = kernel;
  c.stride = stride;
  c.pad = pad;
  const int fan_in = cin * kernel * kernel;
  const int fan_out = cout * kernel * kernel;
  c.w = &store.add(name + ".w", zero_init ? Tensor({cout, fan_in}) : xavier_uniform({cout, fan_in}, fan_in, fan_out, rng));
  c.b = &store.add(name + ".b", Tensor({cout}));
  return c;
}

Var Conv2d::operator()(Tape& tape, Var x) const {
  return conv2d(x, tape.param(*w), tape.param(*b), kernel, stride, pad);
}

Var attention_head(Var q, Var k, Var v, AttentionProbe* probe) {
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(q.value().cols()));
  Var p = softmax_rows(scale(matmul_nt(q, k), scale_factor));
  if (probe) probe->maps.push_back(p.value());
  return matmul(p, v);
}

Attention Attention::make(ParamStore& store, const std::string& name, int dim, int context_dim, int inner_dim,
                          int heads, Rng& rng, bool zero_out) {
  if (heads <= 0 || inner_dim % heads != 0) {
    throw InvalidArgument(name + ": attention width " + std::to_string(inner_dim) + " not divisible by " +
                          std::to_string(heads) + " heads");
  }
  Attention a;
  a.heads = heads;
  a.q = Linear::make(store, name + ".q", dim, inner_dim, rng);
  a.k = Linear::make(store, name + ".k", context_dim, inner_dim, rng);
  a.v = Linear::make(store, name + ".v", context_dim, inner_dim, rng);
  a.o = Linear::make(store, name + ".o", inner_dim, dim, rng, zero_out);
  return a;
}

Var Attention::operator()(Tape& tape, Var x, Var context, AttentionProbe* probe) const {
  Var qa = q(tape, x);
  Var ka = k(tape, context);
  Var va = v(tape, context);
  if (heads == 1) return o(tape, attention_head(qa, ka, va, probe));
  const int hd = qa.value().cols() / heads;
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    outs.push_back(attention_head(slice_cols(qa, h * hd, hd), slice_cols(ka, h * hd, hd), slice_cols(va, h * hd, hd), probe));
  }
  return o(tape, concat_cols(outs));
}

TransformerBlock TransformerBlock::make(ParamStore& store, const std::string& name, int dim, int heads,
                                        double mlp_ratio, Rng& rng) {
  TransformerBlock b;
  const int hidden = std::max(1, static_cast<int>(std::lround(dim * mlp_ratio)));
  b.ln1 = LayerNorm::make(store, name + ".ln1", dim);
  b.attn = Attention::make(store, name + ".attn", dim, dim, dim, heads, rng);
  b.ln2 = LayerNorm::make(store, name + ".ln2", dim);
  b.fc1 = Linear::make(store, name + ".fc1", dim, hidden, rng);
  b.fc2 = Linear::make(store, name + ".fc2", hidden, dim, rng);
  return b;
}

Var TransformerBlock::operator()(Tape& tape, Var x, AttentionProbe* probe) const {
  Var h = ln1(tape, x);
  x = add(x, attn(tape, h, h, probe));
  Var m = fc2(tape, gelu(fc1(tape, ln2(tape, x))));
  return add(x, m);
}

}  // namespace mindvis::nn

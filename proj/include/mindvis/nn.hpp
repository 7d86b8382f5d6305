#pragma once

// Layers shared by the brain encoder, the denoiser and the oracle classifier.
// Layers are thin handles onto parameters owned by a ParamStore, so a model
// is just a store plus a set of handles.

#include <string>
#include <vector>

#include "mindvis/autograd.hpp"
#include "mindvis/rng.hpp"

namespace mindvis::nn {

Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng);
Tensor normal_init(std::vector<int> shape, double stddev, Rng& rng);

// Fixed sine/cosine table [positions, dim].
Tensor sinusoidal_table(int positions, int dim);
// Sinusoidal embedding of a diffusion step, [1, dim].
Tensor timestep_embedding(double t, int dim);

struct Linear {
  Parameter* w = nullptr;  // [in, out]
  Parameter* b = nullptr;  // [out]
  int in = 0;
  int out = 0;

  static Linear make(ParamStore& store, const std::string& name, int in, int out, Rng& rng, bool zero_init = false);
  Var operator()(Tape& tape, Var x) const;
};

struct LayerNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;

  static LayerNorm make(ParamStore& store, const std::string& name, int dim);
  Var operator()(Tape& tape, Var x) const;
};

struct GroupNorm {
  Parameter* gamma = nullptr;
  Parameter* beta = nullptr;
  int groups = 1;

  static GroupNorm make(ParamStore& store, const std::string& name, int channels, int groups);
  Var operator()(Tape& tape, Var x) const;
};

struct Conv2d {
  Parameter* w = nullptr;  // [cout, cin*k*k]
  Parameter* b = nullptr;  // [cout]
  int cin = 0, cout = 0, kernel = 3, stride = 1, pad = 1;

  static Conv2d make(ParamStore& store, const std::string& name, int cin, int cout, int kernel, int stride, int pad,
                     Rng& rng, bool zero_init = false);
  Var operator()(Tape& tape, Var x) const;
};

// Collects post-softmax attention matrices when passed to a forward pass.
struct AttentionProbe {
  std::vector<Tensor> maps;
};

// softmax(q k^T / sqrt(d)) v for one head; d is the q/k width.
Var attention_head(Var q, Var k, Var v, AttentionProbe* probe);

// Multi-head attention. Queries come from x [n, dim]; keys and values from
// context [m, context_dim] (context = x for self-attention).
struct Attention {
  Linear q, k, v, o;
  int heads = 1;

  static Attention make(ParamStore& store, const std::string& name, int dim, int context_dim, int inner_dim,
                        int heads, Rng& rng, bool zero_out = false);
  Var operator()(Tape& tape, Var x, Var context, AttentionProbe* probe) const;
};

// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
struct TransformerBlock {
  LayerNorm ln1;
  Attention attn;
  LayerNorm ln2;
  Linear fc1, fc2;

  static TransformerBlock make(ParamStore& store, const std::string& name, int dim, int heads, double mlp_ratio,
                               Rng& rng);
  Var operator()(Tape& tape, Var x, AttentionProbe* probe) const;
};

}  // namespace mindvis::nn

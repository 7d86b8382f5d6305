#include "mindvis/mbm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mindvis/errors.hpp"

namespace mindvis::mbm {

MaskStrategy parse_mask_strategy(const std::string& s) {
  if (s == "random") return MaskStrategy::Random;
  if (s == "focus") return MaskStrategy::Focus;
  throw ConfigError("unknown mask strategy '" + s + "' (expected random or focus)");
}

std::string to_string(MaskStrategy s) { return s == MaskStrategy::Random ? "random" : "focus"; }

void MbmConfig::validate() const {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("mbm: " + msg);
  };
  need(patch_size >= 1, "patch_size must be >= 1");
  need(embed_dim >= 1 && decoder_embed_dim >= 1, "embedding widths must be >= 1");
  need(encoder_depth >= 1 && decoder_depth >= 1, "depths must be >= 1");
  need(encoder_heads >= 1 && embed_dim % encoder_heads == 0, "embed_dim must be divisible by encoder_heads");
  need(decoder_heads >= 1 && decoder_embed_dim % decoder_heads == 0,
       "decoder_embed_dim must be divisible by decoder_heads");
  need(mask_ratio > 0.0 && mask_ratio < 1.0, "mask_ratio must be in (0, 1)");
  need(mlp_ratio > 0.0, "mlp_ratio must be > 0");
}

CapacityReport info_capacity_ratio(int embed_dim, int patch_elements) {
  if (embed_dim < 1 || patch_elements < 1) throw InvalidArgument("capacity: sizes must be >= 1");
  CapacityReport r;
  r.data_size = patch_elements;
  r.representation_size = embed_dim;
  r.ratio = static_cast<double>(embed_dim) / patch_elements;
  return r;
}

CapacityReport info_capacity_ratio(const MbmConfig& cfg) { return info_capacity_ratio(cfg.embed_dim, cfg.patch_size); }

MaskPlan make_mask_plan(int n, double ratio, MaskStrategy strategy, const std::vector<int>* labels, Rng& rng) {
  if (n < 1) throw InvalidArgument("mask plan: num_patches must be >= 1");
  if (ratio < 0.0 || ratio >= 1.0) throw InvalidArgument("mask plan: ratio must be in [0, 1)");
  const int k = static_cast<int>(std::floor(ratio * n + 1e-9));
  std::vector<char> masked(static_cast<std::size_t>(n), 0);

  if (strategy == MaskStrategy::Random) {
    for (int i : rng.sample_without_replacement(n, k)) masked[static_cast<std::size_t>(i)] = 1;
  } else {
    if (!labels) throw InvalidArgument("focus masking requires region labels");
    if (static_cast<int>(labels->size()) != n) throw ShapeError("focus masking: one region label per patch required");
    // Inclusion probabilities proportional to the weights, capped at 1.
    std::vector<double> w(static_cast<std::size_t>(n)), pi(static_cast<std::size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = (*labels)[static_cast<std::size_t>(i)] ? 2.0 : 1.0;
    std::vector<char> capped(static_cast<std::size_t>(n), 0);
    for (bool changed = true; changed && k > 0;) {
      changed = false;
      double free_w = 0.0;
      int n_capped = 0;
      for (int i = 0; i < n; ++i) {
        if (capped[static_cast<std::size_t>(i)]) ++n_capped;
        else free_w += w[static_cast<std::size_t>(i)];
      }
      const double budget = k - n_capped;
      for (int i = 0; i < n; ++i) {
        const auto u = static_cast<std::size_t>(i);
        if (capped[u]) {
          pi[u] = 1.0;
          continue;
        }
        pi[u] = budget * w[u] / free_w;
        if (pi[u] >= 1.0) {
          capped[u] = 1;
          changed = true;
        }
      }
    }
    // Systematic sampling over a shuffled order: exactly k units.
    const std::vector<int> order = rng.permutation(n);
    const double u0 = rng.uniform();
    double cum = 0.0;
    int next = 0;
    for (int j = 0; j < n && next < k; ++j) {
      const auto i = static_cast<std::size_t>(order[static_cast<std::size_t>(j)]);
      cum = j == n - 1 ? static_cast<double>(k) : cum + pi[i];
      if (u0 + next < cum) {
        masked[i] = 1;
        ++next;
      }
    }
    for (int j = 0; j < n && next < k; ++j) {
      const auto i = static_cast<std::size_t>(order[static_cast<std::size_t>(j)]);
      if (!masked[i]) {
        masked[i] = 1;
        ++next;
      }
    }
  }

  MaskPlan plan;
  for (int i = 0; i < n; ++i) (masked[static_cast<std::size_t>(i)] ? plan.masked_idx : plan.visible_idx).push_back(i);
  return plan;
}

Tensor patchify(const std::vector<double>& signal, int patch_size) {
  if (patch_size < 1) throw InvalidArgument("patchify: patch_size must be >= 1");
  if (signal.empty() || signal.size() % static_cast<std::size_t>(patch_size) != 0) {
    throw ShapeError("patchify: length " + std::to_string(signal.size()) + " is not a positive multiple of " +
                     std::to_string(patch_size));
  }
  return Tensor({static_cast<int>(signal.size()) / patch_size, patch_size}, signal);
}

std::vector<double> unpatchify(const Tensor& patches) { return patches.to_vector(); }

Var mbm_loss(Var pred, Var target, const MaskPlan& plan, bool all_patches) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("mbm_loss: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  if (all_patches) return mse(pred, target);
  if (plan.masked_idx.empty()) throw InvalidArgument("mbm_loss: no masked patches, loss undefined");
  return mse(gather_rows(pred, plan.masked_idx), gather_rows(target, plan.masked_idx));
}

double recovery_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("recovery_correlation: length mismatch");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) throw InvalidArgument("recovery_correlation: constant vector");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

MbmModel::MbmModel(const MbmConfig& cfg, int num_patches, std::uint64_t seed, bool with_decoder)
    : cfg_(cfg), num_patches_(num_patches), has_decoder_(with_decoder) {
  cfg_.validate();
  if (num_patches < 1) throw InvalidArgument("mbm: num_patches must be >= 1");
  Rng rng(seed);
  pos_ = nn::sinusoidal_table(num_patches, cfg.embed_dim);
  patch_embed_ = nn::Linear::make(store_, "encoder.patch_embed", cfg.patch_size, cfg.embed_dim, rng);
  for (int i = 0; i < cfg.encoder_depth; ++i) {
    encoder_.push_back(nn::TransformerBlock::make(store_, "encoder.block" + std::to_string(i), cfg.embed_dim,
                                                  cfg.encoder_heads, cfg.mlp_ratio, rng));
  }
  if (!with_decoder) return;
  decoder_pos_ = nn::sinusoidal_table(num_patches, cfg.decoder_embed_dim);
  mask_token_ = &store_.add("decoder.mask_token", nn::normal_init({1, cfg.decoder_embed_dim}, 0.02, rng));
  decoder_proj_ = nn::Linear::make(store_, "decoder.proj", cfg.embed_dim, cfg.decoder_embed_dim, rng);
  for (int i = 0; i < cfg.decoder_depth; ++i) {
    decoder_.push_back(nn::TransformerBlock::make(store_, "decoder.block" + std::to_string(i), cfg.decoder_embed_dim,
                                                  cfg.decoder_heads, cfg.mlp_ratio, rng));
  }
  decoder_norm_ = nn::LayerNorm::make(store_, "decoder.norm", cfg.decoder_embed_dim);
  decoder_head_ = nn::Linear::make(store_, "decoder.head", cfg.decoder_embed_dim, cfg.patch_size, rng);
}

Var MbmModel::embed_patches(Tape& tape, const Tensor& patches) const {
  if (patches.ndim() != 2 || patches.dim(0) != num_patches_ || patches.dim(1) != cfg_.patch_size) {
    throw ShapeError("embed_patches: expected [" + std::to_string(num_patches_) + ", " +
                     std::to_string(cfg_.patch_size) + "], got " + shape_str(patches.shape()));
  }
  return add(patch_embed_(tape, tape.constant(patches)), tape.constant(pos_));
}

Var MbmModel::run_encoder(Tape& tape, Var x, nn::AttentionProbe* probe) const {
  for (const auto& block : encoder_) x = block(tape, x, probe);
  if (!x.value().all_finite()) throw NumericError("encoder produced non-finite activations");
  return x;
}

Var MbmModel::encode_visible(Tape& tape, Var tokens, const MaskPlan& plan, nn::AttentionProbe* probe) const {
  if (tokens.shape().size() != 2 || tokens.shape()[0] != num_patches_) {
    throw ShapeError("encode_visible: token count does not match the model");
  }
  if (plan.visible_idx.size() + plan.masked_idx.size() != static_cast<std::size_t>(num_patches_)) {
    throw ShapeError("encode_visible: mask plan does not cover the patches");
  }
  if (plan.visible_idx.empty()) throw InvalidArgument("encode_visible: no visible patches");
  return run_encoder(tape, gather_rows(tokens, plan.visible_idx), probe);
}

Var MbmModel::encode_all(Tape& tape, const Tensor& patches, nn::AttentionProbe* probe) const {
  return run_encoder(tape, embed_patches(tape, patches), probe);
}

Var MbmModel::decode_with_mask_tokens(Tape& tape, Var latents, const MaskPlan& plan, nn::AttentionProbe* probe) const {
  if (!has_decoder_) throw InvalidArgument("mbm: model was built without a decoder");
  const auto nv = plan.visible_idx.size(), nm = plan.masked_idx.size();
  if (nv + nm != static_cast<std::size_t>(num_patches_) || latents.shape()[0] != static_cast<int>(nv) ||
      latents.shape()[1] != cfg_.embed_dim) {
    throw ShapeError("decode: latents " + shape_str(latents.shape()) + " inconsistent with mask plan");
  }
  // Rows [visible..., masked...] put back into patch order.
  std::vector<int> where(static_cast<std::size_t>(num_patches_));
  for (std::size_t i = 0; i < nv; ++i) where[static_cast<std::size_t>(plan.visible_idx[i])] = static_cast<int>(i);
  for (std::size_t i = 0; i < nm; ++i) where[static_cast<std::size_t>(plan.masked_idx[i])] = static_cast<int>(nv + i);

  std::vector<Var> parts;
  if (nv > 0) parts.push_back(decoder_proj_(tape, latents));
  if (nm > 0) parts.push_back(repeat_rows(tape.param(*mask_token_), static_cast<int>(nm)));
  Var x = add(gather_rows(concat_rows(parts), where), tape.constant(decoder_pos_));
  for (const auto& block : decoder_) x = block(tape, x, probe);
  return decoder_head_(tape, decoder_norm_(tape, x));
}

Var MbmModel::loss(Tape& tape, const Tensor& input, const Tensor& target, const MaskPlan& plan) const {
  Var latents = encode_visible(tape, embed_patches(tape, input), plan);
  Var pred = decode_with_mask_tokens(tape, latents, plan);
  Var l = mbm_loss(pred, tape.constant(target), plan, cfg_.loss_on_all_patches);
  if (!std::isfinite(l.value()[0])) throw NumericError("mbm loss is not finite");
  return l;
}

Tensor MbmModel::reconstruct(const Tensor& input, const MaskPlan& plan) const {
  Tape tape;
  Var latents = encode_visible(tape, embed_patches(tape, input), plan);
  return decode_with_mask_tokens(tape, latents, plan).value();
}

}  // namespace mindvis::mbm

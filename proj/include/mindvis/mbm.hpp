#pragma once

// Masked modelling of 1D voxel signals: patchify, mask plans, an asymmetric
// transformer autoencoder and the masked reconstruction objective.

#include <cstdint>
#include <string>
#include <vector>

#include "mindvis/autograd.hpp"
#include "mindvis/nn.hpp"
#include "mindvis/rng.hpp"

namespace mindvis::mbm {

enum class MaskStrategy { Random, Focus };

MaskStrategy parse_mask_strategy(const std::string& s);
std::string to_string(MaskStrategy s);

struct MbmConfig {
  int patch_size = 16;
  int embed_dim = 64;
  int encoder_depth = 4;
  int encoder_heads = 4;
  int decoder_embed_dim = 32;
  int decoder_depth = 2;
  int decoder_heads = 4;
  double mlp_ratio = 1.0;
  double mask_ratio = 0.75;
  MaskStrategy mask_strategy = MaskStrategy::Random;
  // Regress every patch instead of the masked ones only.
  bool loss_on_all_patches = false;

  void validate() const;
};

struct MaskPlan {
  std::vector<int> visible_idx;
  std::vector<int> masked_idx;
};

struct CapacityReport {
  double data_size = 0;            // L
  double representation_size = 0;  // L~
  double ratio = 0;                // R = L~ / L
};

CapacityReport info_capacity_ratio(const MbmConfig& cfg);
CapacityReport info_capacity_ratio(int embed_dim, int patch_elements);

// Exactly floor(ratio * n) masked patches. Focus masks patches flagged in
// region_labels with twice the inclusion probability of the rest.
MaskPlan make_mask_plan(int num_patches, double mask_ratio, MaskStrategy strategy,
                        const std::vector<int>* region_labels, Rng& rng);

// [len / patch_size, patch_size]; len must be a multiple of patch_size.
Tensor patchify(const std::vector<double>& signal, int patch_size);
std::vector<double> unpatchify(const Tensor& patches);

Var mbm_loss(Var pred, Var target, const MaskPlan& plan, bool all_patches = false);

double recovery_correlation(const std::vector<double>& original, const std::vector<double>& recovered);

class MbmModel {
 public:
  MbmModel(const MbmConfig& cfg, int num_patches, std::uint64_t seed, bool with_decoder = true);
  MbmModel(const MbmModel&) = delete;
  MbmModel& operator=(const MbmModel&) = delete;
  MbmModel(MbmModel&&) = default;
  MbmModel& operator=(MbmModel&&) = default;

  const MbmConfig& config() const { return cfg_; }
  int num_patches() const { return num_patches_; }
  bool has_decoder() const { return has_decoder_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }

  // Per-patch linear map plus the fixed positional table.
  Var embed_patches(Tape& tape, const Tensor& patches) const;
  // Encoder blocks alone on arbitrary token rows (no positional term).
  Var run_encoder(Tape& tape, Var tokens, nn::AttentionProbe* probe = nullptr) const;
  Var encode_visible(Tape& tape, Var tokens, const MaskPlan& plan, nn::AttentionProbe* probe = nullptr) const;
  // All patches visible: the representation handed to the image generator.
  Var encode_all(Tape& tape, const Tensor& patches, nn::AttentionProbe* probe = nullptr) const;
  Var decode_with_mask_tokens(Tape& tape, Var latents, const MaskPlan& plan,
                              nn::AttentionProbe* probe = nullptr) const;

  Var loss(Tape& tape, const Tensor& input, const Tensor& target, const MaskPlan& plan) const;
  // Predicted patches [num_patches, patch_size] without recording gradients.
  Tensor reconstruct(const Tensor& input, const MaskPlan& plan) const;

  const Tensor& positional_table() const { return pos_; }

 private:
  MbmConfig cfg_;
  int num_patches_ = 0;
  bool has_decoder_ = true;
  ParamStore store_;
  Tensor pos_;
  nn::Linear patch_embed_;
  std::vector<nn::TransformerBlock> encoder_;
  Parameter* mask_token_ = nullptr;
  nn::Linear decoder_proj_;
  std::vector<nn::TransformerBlock> decoder_;
  nn::LayerNorm decoder_norm_;
  nn::Linear decoder_head_;
  Tensor decoder_pos_;
};

}  // namespace mindvis::mbm

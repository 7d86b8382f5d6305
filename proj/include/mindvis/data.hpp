#pragma once

// Paired (voxel signal, image, class) data: synthetic generation, the
// preprocessing chain (wrap-around padding, patch-boundary padding, global
// z-scoring), augmentations, and the MVDS binary format.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mindvis/image.hpp"
#include "mindvis/rng.hpp"

namespace mindvis::data {

struct FmriSample {
  std::vector<double> voxels;
  std::uint32_t subject_id = 0;
  std::optional<int> image_id;
  std::optional<int> class_id;

  bool operator==(const FmriSample&) const = default;
};

struct PairedSample {
  FmriSample fmri;
  Image image;
  int class_id = 0;

  bool operator==(const PairedSample&) const = default;
};

struct NormStats {
  double mean = 0.0;
  double std = 1.0;

  bool operator==(const NormStats&) const = default;
};

struct PairedDataset {
  std::vector<PairedSample> train;
  std::vector<PairedSample> test;
  // Signals without images, used only for masked-signal pretraining. They may
  // come from several subjects with different voxel counts.
  std::vector<FmriSample> unpaired;
  NormStats norm_stats;
  int class_count = 0;
  int image_size = 0;
  // Voxels [0, primary_voxels) form the labelled primary region.
  int primary_voxels = 0;

  bool operator==(const PairedDataset&) const = default;
};

struct SynthSpec {
  int class_count = 10;
  int samples_per_class = 20;
  int voxel_count = 256;
  int image_size = 32;
  double snr = 4.0;
  std::uint64_t seed = 1;
  // Per-class share of samples held out for testing.
  double test_fraction = 0.2;
  int unpaired_per_class = 0;
  // Unpaired subject s keeps the first voxel_count * (1 - 0.1 s) voxels.
  int unpaired_subjects = 1;
  double primary_fraction = 0.4;
  // Blob-shaped activations per class template.
  int blobs_per_class = 8;
};

// Upper bound on classes with a distinct (shape, hue) render.
constexpr int kMaxRenderableClasses = 64;

enum class PadStrategy { Wrap, Constant, Cut };

PadStrategy parse_pad_strategy(const std::string& s);
std::string to_string(PadStrategy s);

// Unit-RMS sparse template of class c, as used by the generator.
std::vector<std::vector<double>> class_templates(const SynthSpec& spec);
Image render_class(int class_id, int size);
PairedDataset generate_synthetic_dataset(const SynthSpec& spec);

std::vector<double> wrap_pad(const std::vector<double>& voxels, std::size_t target_len);
std::vector<double> pad_to_patch_boundary(const std::vector<double>& voxels, int patch_size);

NormStats fit_norm_stats(const std::vector<FmriSample>& train);
FmriSample apply_norm(const FmriSample& sample, const NormStats& stats);

std::vector<double> random_sparsify(const std::vector<double>& voxels, double fraction, Rng& rng);

struct CropWindow {
  int y0 = 0, x0 = 0, height = 0, width = 0;
};
// Centre-biased crop keeping at least ceil((1 - ratio) * side) of each side.
CropWindow sample_crop_window(int height, int width, double crop_ratio, Rng& rng);
Image random_crop_image(const Image& image, double crop_ratio, Rng& rng);

// Voxel matrices ready for the encoder: normalised with the training stats,
// brought to one common length and padded to the patch boundary.
struct PreparedSignals {
  std::vector<std::vector<double>> train;
  std::vector<std::vector<double>> test;
  std::vector<std::vector<double>> unpaired;
  int length = 0;
  int patch_size = 0;
  // Per-patch primary-region flag (majority of voxels inside the region).
  std::vector<int> primary_patch;
};

PreparedSignals prepare_signals(const PairedDataset& dataset, int patch_size, PadStrategy pad);

void save_dataset(const PairedDataset& dataset, const std::string& path);
PairedDataset load_dataset(const std::string& path);
std::vector<unsigned char> encode_dataset(const PairedDataset& dataset);
PairedDataset decode_dataset(std::vector<unsigned char> bytes);
void export_csv(const PairedDataset& dataset, const std::string& path);

}  // namespace mindvis::data

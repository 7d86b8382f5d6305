#pragma once

// Run configuration and the end-to-end pipeline shared by the command line
// tool, the ablation harness and the acceptance run: synthetic data, masked
// pretraining, denoiser pretraining, finetuning, sampling and evaluation.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "mindvis/checkpoint.hpp"
#include "mindvis/codec.hpp"
#include "mindvis/conditioning.hpp"
#include "mindvis/data.hpp"
#include "mindvis/eval.hpp"
#include "mindvis/mbm.hpp"
#include "mindvis/optim.hpp"
#include "mindvis/trainer.hpp"

namespace mindvis::pipeline {

struct DataSection {
  data::SynthSpec synth;
  data::PadStrategy pad = data::PadStrategy::Wrap;
};

struct DiffusionSection {
  train::DiffusionConfig schedule;
  codec::CodecConfig codec;
  int codec_train_steps = 1500;
  cond::UNetConfig unet;
  train::SamplerKind sampler = train::SamplerKind::Plms;
  int steps = 50;
};

struct ConditioningSection {
  cond::CondMode mode = cond::CondMode::CT;
  int M = 8;
};

enum class EncoderInit { Pretrained, Random };
EncoderInit parse_encoder_init(const std::string& s);
std::string to_string(EncoderInit e);

struct TrainerSection {
  OptimizerConfig stage_a;
  double sparsify_fraction = 0.2;
  int ldm_steps = 3000;
  int ldm_batch_size = 4;
  double ldm_lr = 1e-3;
  double ldm_crop_ratio = 0.2;
  std::uint64_t ldm_seed = 11;
  OptimizerConfig stage_b;
  double crop_ratio = 0.2;
  EncoderInit encoder_init = EncoderInit::Pretrained;
};

struct EvalSection {
  int n = 10;
  int k = 1;
  int trials = 1000;
  int samplings = 5;
  // Test inputs shown in the sample grid.
  int grid_inputs = 8;
  eval::ConvOracleConfig oracle;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "run";
  DataSection data;
  mbm::MbmConfig mbm;
  DiffusionSection diffusion;
  ConditioningSection conditioning;
  TrainerSection trainer;
  EvalSection eval;

  // Throws ConfigError on values the stages would reject.
  void validate() const;
};

// The desk profile.
RunConfig default_config();
// Published full-model hyperparameters (encoder, finetuning, M, sampler).
// Far beyond a desk budget; data stays synthetic.
RunConfig reference_config();
// "desk" or "reference".
RunConfig profile_config(const std::string& name);
// Missing keys take the values of `base`; unknown keys and ill-typed values
// throw ConfigError.
RunConfig parse_config(const nlohmann::json& j, const RunConfig& base);
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::string& path);
// Every field, defaults included.
nlohmann::json to_json(const RunConfig& cfg);

enum class Stage { Data, StageA, Ldm, StageB, Oracle, Eval };
std::string to_string(Stage s);

// SHA-1 of the settings a stage's output depends on.
std::string stage_hash(const RunConfig& cfg, Stage s);
// SHA-1 of the whole config except the output directory.
std::string config_hash(const RunConfig& cfg);

// Ablation axes: embed_dim, mask_ratio, patch_size, encoder_depth,
// mask_strategy, cond_mode, pad_strategy, crop_ratio.
const std::vector<std::string>& ablation_axes();
void apply_axis(RunConfig& cfg, const std::string& axis, const nlohmann::json& value);

// ---- stages ----

struct Prepared {
  data::PairedDataset dataset;
  data::PreparedSignals signals;
};

data::PairedDataset make_dataset(const RunConfig& cfg);
Prepared prepare(const RunConfig& cfg, data::PairedDataset dataset);
// Signals used for masked pretraining: paired training and unpaired signals.
std::vector<std::vector<double>> pretraining_signals(const Prepared& p);

// Final Stage A trainer state; meta carries "stage_hash".
Checkpoint run_stage_a(const RunConfig& cfg, const Prepared& p);

// Denoiser, label tables and (when learned) codec weights.
Checkpoint run_ldm(const RunConfig& cfg, const Prepared& p);
codec::LatentCodec load_codec(const RunConfig& cfg, const Checkpoint& ldm);

// Stage A checkpoint is ignored (may be null) with random encoder init.
Checkpoint run_stage_b(const RunConfig& cfg, const Prepared& p, const Checkpoint* stage_a, const Checkpoint& ldm);
std::unique_ptr<train::BrainDecoder> load_decoder(const RunConfig& cfg, const Prepared& p, const Checkpoint& stage_b);

Checkpoint run_oracle(const RunConfig& cfg);
std::unique_ptr<eval::ConvOracle> load_oracle(const RunConfig& cfg, const Checkpoint& oracle);

// samples[i][s]: sampling s of test input i, from the stream (seed, i, s).
std::vector<std::vector<Image>> decode_test_inputs(const RunConfig& cfg, const Prepared& p,
                                                   const train::BrainDecoder& decoder, const codec::LatentCodec& codec,
                                                   int inputs, int samplings);
// Ground truth followed by the samplings, one row per input.
Image sample_grid(const Prepared& p, const std::vector<std::vector<Image>>& samples);

struct Evaluation {
  eval::MetricReport report;
  std::vector<int> gen_top1;       // first sampling of each test input
  std::vector<std::vector<int>> labels;  // oracle top-1 per (input, sampling)
};

Evaluation evaluate(const RunConfig& cfg, const Prepared& p, const std::vector<std::vector<Image>>& samples,
                    const eval::ClassifierOracle& oracle);

// ---- artifacts ----

// Loads `path` when it exists and its meta "stage_hash" equals `hash`;
// otherwise builds, stamps, saves and returns a fresh one.
Checkpoint cached(const std::string& path, const std::string& hash, const std::function<Checkpoint()>& build);
// Loads a dependency artifact: MissingArtifact when absent, ConfigError when
// it was produced under other settings.
Checkpoint require_artifact(const std::string& path, const std::string& hash, const std::string& producer);

std::string file_sha1(const std::string& path);
void write_text(const std::string& path, const std::string& text);
void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes);

// {"command", "config", "config_hash", "stage_hash", "seed", "inputs",
// "outputs"}; files listed with their SHA-1.
nlohmann::json make_manifest(const std::string& command, const RunConfig& cfg, Stage stage,
                             const std::vector<std::string>& inputs, const std::vector<std::string>& outputs);

// "<cache_dir>/<stage>-<hash prefix>.mvck"
std::string artifact_path(const std::string& cache_dir, const RunConfig& cfg, Stage s);

// Whole pipeline with artifacts cached by stage hash under cache_dir.
struct PipelineResult {
  Evaluation evaluation;
  std::vector<train::EpochRecord> stage_b_log;
};
PipelineResult run_all(const RunConfig& cfg, const std::string& cache_dir);

// ---- ablation ----

struct AblationRow {
  std::string axis;
  std::string value;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;  // successful seeds only
  std::vector<std::string> failures;
  double mean = 0.0;
  double std = 0.0;
};

struct AblationGrid {
  std::string axis;
  std::vector<nlohmann::json> values;
  std::vector<std::uint64_t> seeds;
  // Adds the rows without masked pretraining (random encoder init).
  bool without_pretraining_rows = false;
};

// Points run on up to `threads` threads.
std::vector<AblationRow> run_ablation(const RunConfig& base, const AblationGrid& grid, const std::string& cache_dir,
                                      int threads);
std::string ablation_csv(const std::vector<AblationRow>& rows);
// MINDVIS_THREADS when set to a positive integer, else 1.
int thread_cap();

}  // namespace mindvis::pipeline

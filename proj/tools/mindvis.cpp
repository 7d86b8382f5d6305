// mindvis: command line surface over the pipeline.
//
//   mindvis synth-data | pretrain | pretrain-ldm | finetune | sample | evaluate
//   mindvis ablate --axis cond_mode --values c,ct --seeds 1,2,3
//   mindvis config
//
// Exit codes: 0 success, 1 invalid config or arguments, 2 missing dependency
// artifact, 3 any other failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mindvis/errors.hpp"
#include "mindvis/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mindvis;
using namespace mindvis::pipeline;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string cond_mode;
  std::string sampler;
  std::optional<int> steps;
  std::string profile = "desk";
};

RunConfig resolve(const Globals& g) {
  json j = json::object();
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) throw ConfigError("cannot open config " + g.config_path);
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config " + g.config_path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
  }
  json patch = json::object();
  if (g.seed) patch["seed"] = *g.seed;
  if (!g.out.empty()) patch["out_dir"] = g.out;
  if (!g.cond_mode.empty()) patch["conditioning"]["mode"] = g.cond_mode;
  if (!g.sampler.empty()) patch["diffusion"]["sampler"] = g.sampler;
  if (g.steps) patch["diffusion"]["steps"] = *g.steps;
  j.merge_patch(patch);
  return parse_config(j, profile_config(g.profile));
}

class Run {
 public:
  explicit Run(RunConfig cfg) : cfg_(std::move(cfg)) { fs::create_directories(cfg_.out_dir); }

  const RunConfig& cfg() const { return cfg_; }
  std::string path(const std::string& name) const { return (fs::path(cfg_.out_dir) / name).string(); }

  const Prepared& prepared() {
    if (!prepared_) {
      const std::string ds = path("dataset.mvds");
      const std::string manifest = path("synth-data.manifest.json");
      if (!fs::exists(ds) || !fs::exists(manifest)) throw MissingArtifact("missing " + ds + "; run `synth-data` first");
      std::ifstream in(manifest);
      const json m = json::parse(in);
      if (m.at("stage_hash").get<std::string>() != stage_hash(cfg_, Stage::Data)) {
        throw ConfigError(ds + " was produced under different data settings; rerun `synth-data`");
      }
      prepared_ = prepare(cfg_, data::load_dataset(ds));
      inputs_.push_back(ds);
    }
    return *prepared_;
  }

  Checkpoint dependency(const std::string& name, Stage stage, const std::string& producer) {
    Checkpoint c = require_artifact(path(name), stage_hash(cfg_, stage), producer);
    inputs_.push_back(path(name));
    return c;
  }

  void save(const std::string& name, const Checkpoint& c) {
    save_checkpoint(c, path(name));
    outputs_.push_back(path(name));
  }
  void text(const std::string& name, const std::string& s) {
    write_text(path(name), s);
    outputs_.push_back(path(name));
  }
  void bytes(const std::string& name, const std::vector<unsigned char>& b) {
    write_bytes(path(name), b);
    outputs_.push_back(path(name));
  }
  void input(const std::string& name) { inputs_.push_back(path(name)); }

  void manifest(const std::string& command, Stage stage) {
    write_text(path(command + ".manifest.json"),
               make_manifest(command, cfg_, stage, inputs_, outputs_).dump(2) + "\n");
    write_text(path("config.json"), to_json(cfg_).dump(2) + "\n");
  }

 private:
  RunConfig cfg_;
  std::optional<Prepared> prepared_;
  std::vector<std::string> inputs_, outputs_;
};

std::string loss_csv(const json& log) {
  std::vector<train::EpochRecord> records;
  for (const auto& r : log) records.push_back({r.at(0).get<int>(), r.at(1).get<double>(), r.at(2).get<double>(), r.at(3).get<double>()});
  std::ostringstream os;
  os << "epoch,loss,lr,grad_norm\n";
  for (const auto& r : records) {
    os << r.epoch << ',' << eval::format_double(r.loss) << ',' << eval::format_double(r.lr) << ','
       << eval::format_double(r.grad_norm) << '\n';
  }
  return os.str();
}

void note(const std::string& s) { std::cerr << "mindvis: " << s << std::endl; }

void cmd_synth(Run& run) {
  const data::PairedDataset ds = make_dataset(run.cfg());
  std::vector<unsigned char> bytes = data::encode_dataset(ds);
  run.bytes("dataset.mvds", bytes);
  data::export_csv(ds, run.path("dataset.csv"));
  note("dataset: " + std::to_string(ds.train.size()) + " train, " + std::to_string(ds.test.size()) + " test, " +
       std::to_string(ds.unpaired.size()) + " unpaired signals");
  run.manifest("synth-data", Stage::Data);
}

void cmd_pretrain(Run& run) {
  const Prepared& p = run.prepared();
  note("masked pretraining on " + std::to_string(pretraining_signals(p).size()) + " signals for " +
       std::to_string(run.cfg().trainer.stage_a.max_epochs) + " epochs");
  const Checkpoint c = run_stage_a(run.cfg(), p);
  run.save("stage_a.mvck", c);
  run.text("stage_a_loss.csv", loss_csv(c.meta.at("log")));
  const auto& log = c.meta.at("log");
  note("loss " + eval::format_double(log.front().at(1).get<double>()) + " -> " +
       eval::format_double(log.back().at(1).get<double>()));
  run.manifest("pretrain", Stage::StageA);
}

void cmd_pretrain_ldm(Run& run) {
  const Prepared& p = run.prepared();
  note("denoiser pretraining for " + std::to_string(run.cfg().trainer.ldm_steps) + " steps");
  const Checkpoint c = run_ldm(run.cfg(), p);
  run.save("ldm.mvck", c);
  note("loss " + eval::format_double(c.meta.at("loss_first").get<double>()) + " -> " +
       eval::format_double(c.meta.at("loss_last100").get<double>()));
  run.manifest("pretrain-ldm", Stage::Ldm);
}

void cmd_finetune(Run& run) {
  const Prepared& p = run.prepared();
  std::optional<Checkpoint> stage_a;
  if (run.cfg().trainer.encoder_init == EncoderInit::Pretrained) {
    stage_a = run.dependency("stage_a.mvck", Stage::StageA, "pretrain");
  }
  const Checkpoint ldm = run.dependency("ldm.mvck", Stage::Ldm, "pretrain-ldm");
  note("finetuning (" + cond::to_string(run.cfg().conditioning.mode) + ", " +
       to_string(run.cfg().trainer.encoder_init) + " encoder) for " +
       std::to_string(run.cfg().trainer.stage_b.max_epochs) + " epochs");
  const Checkpoint c = run_stage_b(run.cfg(), p, stage_a ? &*stage_a : nullptr, ldm);
  run.save("stage_b.mvck", c);
  run.text("stage_b_loss.csv", loss_csv(c.meta.at("log")));
  run.manifest("finetune", Stage::StageB);
}

struct Decoding {
  std::unique_ptr<train::BrainDecoder> decoder;
  std::optional<codec::LatentCodec> codec;
};

Decoding load_decoding(Run& run) {
  const Prepared& p = run.prepared();
  const Checkpoint ldm = run.dependency("ldm.mvck", Stage::Ldm, "pretrain-ldm");
  const Checkpoint stage_b = run.dependency("stage_b.mvck", Stage::StageB, "finetune");
  Decoding d;
  d.decoder = load_decoder(run.cfg(), p, stage_b);
  d.codec.emplace(load_codec(run.cfg(), ldm));
  return d;
}

void cmd_sample(Run& run) {
  const Prepared& p = run.prepared();
  const Decoding d = load_decoding(run);
  const auto samples =
      decode_test_inputs(run.cfg(), p, *d.decoder, *d.codec, run.cfg().eval.grid_inputs, run.cfg().eval.samplings);
  run.bytes("samples.ppm", encode_ppm(sample_grid(p, samples)));
  note("wrote " + run.path("samples.ppm") + ": " + std::to_string(samples.size()) + " inputs x " +
       std::to_string(run.cfg().eval.samplings) + " samplings");
  run.manifest("sample", Stage::Eval);
}

void cmd_evaluate(Run& run) {
  const Prepared& p = run.prepared();
  const Decoding d = load_decoding(run);
  const Checkpoint oc = cached(run.path("oracle.mvck"), stage_hash(run.cfg(), Stage::Oracle),
                               [&] { return run_oracle(run.cfg()); });
  run.input("oracle.mvck");
  const auto oracle = load_oracle(run.cfg(), oc);
  const auto samples = decode_test_inputs(run.cfg(), p, *d.decoder, *d.codec,
                                          static_cast<int>(p.signals.test.size()), run.cfg().eval.samplings);
  const Evaluation ev = evaluate(run.cfg(), p, samples, *oracle);
  json j = ev.report.to_json();
  j["config_hash"] = config_hash(run.cfg());
  j["oracle_validation_accuracy"] = oc.meta.at("validation_accuracy");
  run.text("metrics.json", j.dump(2) + "\n");
  run.text("metrics.csv", eval::metric_csv({ev.report}));
  std::cout << j.dump(2) << std::endl;
  run.manifest("evaluate", Stage::Eval);
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

void cmd_ablate(Run& run, const std::string& axis, const std::string& values, const std::string& seeds,
                bool without_pretraining) {
  AblationGrid grid;
  grid.axis = axis;
  for (const auto& v : split(values)) {
    json parsed = json::parse(v, nullptr, false);
    grid.values.push_back(parsed.is_discarded() || !parsed.is_number() ? json(v) : parsed);
  }
  for (const auto& s : split(seeds)) {
    try {
      grid.seeds.push_back(std::stoull(s));
    } catch (const std::exception&) {
      throw ConfigError("bad seed '" + s + "'");
    }
  }
  grid.without_pretraining_rows = without_pretraining;
  const int threads = thread_cap();
  note("ablating " + axis + " over " + std::to_string(grid.values.size()) + " values x " +
       std::to_string(grid.seeds.size()) + " seeds on " + std::to_string(threads) + " thread(s)");
  const auto rows = run_ablation(run.cfg(), grid, run.path("cache"), threads);
  const std::string csv = ablation_csv(rows);
  run.text("ablation-" + axis + ".csv", csv);
  std::cout << csv;
  run.manifest("ablate", Stage::Eval);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage signal-to-image decoding pipeline on synthetic data"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "JSON run config (missing keys take the desk defaults)");
  app.add_option("--profile", g.profile, "Base settings under the config file: desk or reference");
  app.add_option("--seed", g.seed, "Global seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--cond-mode", g.cond_mode, "Conditioning: c (cross-attention only) or ct");
  app.add_option("--sampler", g.sampler, "Sampler: ddpm or plms");
  app.add_option("--steps", g.steps, "PLMS steps");

  auto* synth = app.add_subcommand("synth-data", "Generate the synthetic paired dataset");
  auto* pretrain = app.add_subcommand("pretrain", "Masked pretraining of the signal encoder");
  auto* pretrain_ldm = app.add_subcommand("pretrain-ldm", "Label-conditioned pretraining of the denoiser");
  auto* finetune = app.add_subcommand("finetune", "Conditional finetuning of encoder, projector and attention");
  auto* sample = app.add_subcommand("sample", "Image grid: ground truth and samples per test input");
  auto* evaluate_cmd = app.add_subcommand("evaluate", "Identification accuracy, FID, MSE and consistency");
  auto* config_cmd = app.add_subcommand("config", "Print the resolved config");
  auto* ablate = app.add_subcommand("ablate", "Run the pipeline over an ablation grid");
  std::string axis, values, seeds = "1";
  bool without_pretraining = false;
  ablate->add_option("--axis", axis, "embed_dim, mask_ratio, patch_size, encoder_depth, mask_strategy, cond_mode, "
                                     "pad_strategy or crop_ratio")
      ->required();
  ablate->add_option("--values", values, "Comma-separated axis values")->required();
  ablate->add_option("--seeds", seeds, "Comma-separated seeds");
  ablate->add_flag("--without-pretraining", without_pretraining, "Add rows with a random-init encoder");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const RunConfig cfg = resolve(g);
    if (config_cmd->parsed()) {
      std::cout << to_json(cfg).dump(2) << std::endl;
      return 0;
    }
    Run run(cfg);
    if (synth->parsed()) cmd_synth(run);
    if (pretrain->parsed()) cmd_pretrain(run);
    if (pretrain_ldm->parsed()) cmd_pretrain_ldm(run);
    if (finetune->parsed()) cmd_finetune(run);
    if (sample->parsed()) cmd_sample(run);
    if (evaluate_cmd->parsed()) cmd_evaluate(run);
    if (ablate->parsed()) cmd_ablate(run, axis, values, seeds, without_pretraining);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "mindvis: invalid config: " << e.what() << std::endl;
    return 1;
  } catch (const MissingArtifact& e) {
    std::cerr << "mindvis: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "mindvis: error: " << e.what() << std::endl;
    return 3;
  }
}

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "svil/evalkit.hpp"
#include "svil/metaloop.hpp"
#include "svil/model.hpp"
#include "svil/snapshot.hpp"
#include "svil/synthgen.hpp"

namespace svil::exp {

inline constexpr const char* kVersion = "svil 0.1.0";

// Invalid configuration; `field` is the dotted path of the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class ExperimentKind { kMultiSource, kCameraSplit, kFig1 };

const char* kind_name(ExperimentKind kind);

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::kMultiSource;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "svil_out";
  synth::DatasetSpec dataset;
  model::EncoderConfig encoder;
  train::TrainConfig train;
  std::size_t checkpoint_every = 0;  // epochs; the final checkpoint is always written
  bool export_embeddings = false;
  // single-source-camera-split
  int camera_source_domain = 0;
  std::size_t camera_subsets = 3;

  // Kind-specific and cross-section checks that need no data.
  void validate() const;
};

// Parses a config document. Unknown keys and bad values raise ConfigError.
ExperimentConfig parse_config(const io::Json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

// Canonical form: every field, defaults filled in. parse_config(to_json(c)) == c.
io::Json to_json(const ExperimentConfig& config);
std::string config_hash(const ExperimentConfig& config);

// Applies SVIL_OUTPUT_DIR / SVIL_SEED when set.
void apply_environment(ExperimentConfig& config);

// Training sources and held-out target for one run.
struct Prepared {
  synth::Dataset data;
  train::SourceSet sources;
  eval::RetrievalSplit target;
  std::vector<synth::Sample> target_samples;
};

Prepared prepare(const ExperimentConfig& config);
// Same sources with every image restyled to the target domain's style.
Prepared stylize_sources(const Prepared& prepared);

struct RunOutcome {
  train::TrainResult result;
  eval::EvalResult final_eval;
  Tensor domain_gap;  // sources then target
  double mean_gap = 0.0;
};

// Trains and evaluates. When `out_dir` is set, writes metrics.jsonl,
// final_eval.json, checkpoints/ and (optionally) embeddings there.
RunOutcome run_prepared(const ExperimentConfig& config, const Prepared& prepared,
                        const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Domain gap between L2-normalized embeddings of each source domain and the target.
Tensor embedding_gap(const model::EncoderConfig& encoder, const model::ModelParams& params, const Prepared& prepared);

// `run` subcommand: every artifact goes under config.output_dir. Returns the
// summary record.
io::Json run_experiment(const ExperimentConfig& config);

// Ablation toggles: sjm, maml, loss, weight_mode, cross_domain, sjm_stage.
// "name" sweeps all values; "name=a,b" picks values.
struct Toggle {
  std::string name;
  std::vector<std::string> values;
};
Toggle parse_toggle(const std::string& text, const ExperimentConfig& base);
void apply_toggle(ExperimentConfig& config, const std::string& name, const std::string& value);

struct AblationRun {
  std::vector<std::pair<std::string, std::string>> settings;
  std::string label;
  RunOutcome outcome;
};

// Cartesian product of toggle values; every run shares the dataset seed.
std::vector<AblationRun> ablate(const ExperimentConfig& base, const std::vector<Toggle>& toggles,
                                bool write_artifacts = true);

// Record serialization, shared with the tests.
io::Json to_json(const eval::EvalResult& result);
eval::EvalResult eval_from_json(const io::Json& doc);
io::Json to_json(const train::IterationRecord& record);
train::IterationRecord iteration_from_json(const io::Json& doc);
io::Json to_json(const train::EpochRecord& record);
train::EpochRecord epoch_from_json(const io::Json& doc);
io::Json to_json(const losses::LossBreakdown& losses);
losses::LossBreakdown losses_from_json(const io::Json& doc);
io::Json tensor_to_json(const Tensor& t);

// Writes <dir>/stamp.json.
void write_stamp(const std::filesystem::path& dir, const ExperimentConfig& config);

// `eval` subcommand: checkpoint against the target domain of a dataset snapshot.
eval::EvalResult evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset);

}  // namespace svil::exp

#pragma once

// Experiment configuration and the runners behind the command-line verbs.

#include <filesystem>
#include <string>
#include <vector>

#include "rbd/attention_analysis.hpp"
#include "rbd/eval.hpp"
#include "rbd/serialization.hpp"

namespace rbd {

struct AttentionSettings {
  RowRule row_rule = RowRule::tenth_generated;
  int n_probes = 20;
  int generated_tokens = 10;
};

struct AblationAxes {
  std::vector<std::string> generation{"greedy", "beam-2", "beam-5", "top_k", "top_p"};
  std::vector<std::string> textual{"no_image", "noise", "pure_color"};
  std::vector<std::string> visual{"prune", "select", "amplify_all"};
};

enum class SweepParam { alpha, beta, gamma };

struct SweepSpec {
  SweepParam param = SweepParam::alpha;
  std::vector<double> values{0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
};

struct ExperimentConfig {
  WorldSpec world = WorldSpec::standard();
  ModelConfig model;  // shape fields derived from the world
  DecodeParams decode;
  TextualBranchConfig textual;
  VisualBranchConfig visual;
  int n_scenes = 150;
  std::uint64_t dataset_seed = 0;
  std::string dataset_path;  // load instead of generating when set
  std::string outputs = "out";
  bool report_attention = false;
  int workers = 1;
  AttentionSettings attention;
  AblationAxes ablation;
  SweepSpec sweep;
};

// Every seed (model.seed, dataset.seed, decode.sample_seed,
// textual.noise_seed) must be present. Throws ConfigError.
ExperimentConfig parse_experiment_config(const Json& j);
// Complete echo; parse_experiment_config(to_json(c)) reproduces c.
Json experiment_config_to_json(const ExperimentConfig& c);

// `--decode.alpha 0.6`: the value is read as JSON when it parses, else as a
// string. Intermediate objects are created as needed.
void apply_override(Json& config, const std::string& dotted_key, const std::string& value);
// Sets every seed in the config to `seed`.
void apply_global_seed(Json& config, std::uint64_t seed);

Dataset load_or_generate_dataset(const ExperimentConfig& c);
ToyModel build_experiment_model(const ExperimentConfig& c);
EvalSettings eval_settings(const ExperimentConfig& c);

struct ExperimentResult {
  Dataset dataset;
  EvalReport report;
};

ExperimentResult evaluate_experiment(const ExperimentConfig& c);

// Results document. `timestamp` is the only field that varies between runs.
OrderedJson results_json(const ExperimentConfig& c, const ExperimentResult& r, const std::string& timestamp);

// Writes <outputs>/results.json (plus attention_profile.csv when
// report_attention is set). Returns the results path.
std::filesystem::path write_experiment_outputs(const ExperimentConfig& c, const ExperimentResult& r);
// Evaluates and writes <outputs>/results.json (plus attention_profile.csv
// when report_attention is set). Returns the results path.
std::filesystem::path run_experiment(const ExperimentConfig& c);

struct AblationRow {
  std::string generation, textual, visual;
  PopeResult pope;  // adversarial
  ChairResult chair;
};

// Cells are ordered generation-major, then textual, then visual.
std::vector<AblationRow> run_ablation_matrix(const ExperimentConfig& base, const AblationAxes& axes);
void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows);
// Applies one cell of the ablation grid to a base config.
ExperimentConfig ablation_cell(const ExperimentConfig& base, const std::string& generation,
                               const std::string& textual, const std::string& visual);

struct SweepRow {
  double value = 0.0;
  EvalReport report;
};

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const SweepSpec& spec);
void write_sweep_csv(std::ostream& out, SweepParam param, const std::vector<SweepRow>& rows);

AttentionProfile run_attention_profile(const ExperimentConfig& c);

std::string to_string(SweepParam p);
SweepParam parse_sweep_param(const std::string& s);
std::string utc_timestamp();

}  // namespace rbd

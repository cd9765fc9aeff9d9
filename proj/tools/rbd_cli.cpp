// Command-line front end. Exit codes: 0 success, 2 config error, 3 runtime error.

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rbd/experiment.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonFlags {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "JSON experiment config");
  cmd->add_option("--out", flags.out, "output directory (overrides outputs)");
  cmd->add_option("--seed", flags.seed, "sets every seed in the config");
  cmd->add_flag("--quiet", flags.quiet, "suppress progress output");
  cmd->allow_extras();
}

// Leftover arguments are dotted overrides: `--decode.alpha 0.6` or
// `--decode.alpha=0.6`.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0 || arg.size() == 2) throw rbd::ConfigError("unexpected argument '" + arg + "'");
    const std::string body = arg.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
      continue;
    }
    if (i + 1 >= extras.size()) throw rbd::ConfigError("override --" + body + " has no value");
    out.emplace_back(body, extras[++i]);
  }
  return out;
}

rbd::ExperimentConfig load_config(const CommonFlags& flags, const std::vector<std::string>& extras) {
  rbd::Json j = flags.config_path.empty() ? rbd::Json::object() : rbd::read_json_file(flags.config_path);
  if (flags.seed) rbd::apply_global_seed(j, *flags.seed);
  for (const auto& [key, value] : parse_overrides(extras)) rbd::apply_override(j, key, value);
  if (!flags.out.empty()) j["outputs"] = flags.out;
  return rbd::parse_experiment_config(j);
}

void say(const CommonFlags& flags, const std::string& line) {
  if (!flags.quiet) std::cout << line << '\n';
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(4);
  s << std::fixed << v;
  return s.str();
}

void cmd_generate_dataset(const rbd::ExperimentConfig& c, const CommonFlags& flags) {
  const rbd::Dataset data = rbd::generate_dataset(c.n_scenes, c.world, c.dataset_seed);
  const std::filesystem::path path = std::filesystem::path(c.outputs) / "dataset.json";
  rbd::write_text_file(path, rbd::dataset_to_json(data, c.world).dump(1) + "\n");
  say(flags, "wrote " + path.string() + " (" + std::to_string(data.scenes.size()) + " scenes, " +
                 std::to_string(data.items.size()) + " probe items)");
}

void cmd_run(const rbd::ExperimentConfig& c, const CommonFlags& flags) {
  const rbd::ExperimentResult r = rbd::evaluate_experiment(c);
  const std::filesystem::path path = rbd::write_experiment_outputs(c, r);
  say(flags, "strategy " + rbd::to_string(c.decode.strategy));
  if (!r.report.captions.empty()) {
    say(flags, "CHAIR_S " + fmt(r.report.chair.chair_s) + "  CHAIR_I " + fmt(r.report.chair.chair_i));
  }
  for (const auto& [setting, p] : r.report.pope) {
    say(flags, "POPE " + rbd::to_string(setting) + "  acc " + fmt(p.accuracy) + "  f1 " + fmt(p.f1));
  }
  for (const auto& w : r.report.warnings) std::cerr << "warning: " << w << '\n';
  say(flags, "wrote " + path.string());
}

void cmd_ablate(const rbd::ExperimentConfig& c, const CommonFlags& flags) {
  const auto rows = rbd::run_ablation_matrix(c, c.ablation);
  std::ostringstream csv;
  rbd::write_ablation_csv(csv, rows);
  const std::filesystem::path path = std::filesystem::path(c.outputs) / "ablation.csv";
  rbd::write_text_file(path, csv.str());
  if (!flags.quiet) std::cout << csv.str();
  say(flags, "wrote " + path.string());
}

void cmd_sweep(const rbd::ExperimentConfig& c, const CommonFlags& flags) {
  const auto rows = rbd::run_sweep(c, c.sweep);
  std::ostringstream csv;
  rbd::write_sweep_csv(csv, c.sweep.param, rows);
  const std::filesystem::path path = std::filesystem::path(c.outputs) / ("sweep_" + rbd::to_string(c.sweep.param) + ".csv");
  rbd::write_text_file(path, csv.str());
  if (!flags.quiet) std::cout << csv.str();
  say(flags, "wrote " + path.string());
}

void cmd_attention_profile(const rbd::ExperimentConfig& c, const CommonFlags& flags) {
  const rbd::AttentionProfile profile = rbd::run_attention_profile(c);
  std::ostringstream csv;
  rbd::write_profile_csv(csv, profile);
  const std::filesystem::path path = std::filesystem::path(c.outputs) / "attention_profile.csv";
  rbd::write_text_file(path, csv.str());
  if (!flags.quiet) std::cout << csv.str();
  for (const auto& w : profile.warnings) std::cerr << "warning: " << w << '\n';
  say(flags, "wrote " + path.string() + " (" + std::to_string(profile.used) + " probes, " +
                 std::to_string(profile.skipped) + " skipped)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-branch contrastive decoding on a planted-prior toy VLM"};
  app.require_subcommand(1);

  struct Verb {
    const char* name;
    const char* help;
    void (*fn)(const rbd::ExperimentConfig&, const CommonFlags&);
  };
  const Verb verbs[] = {
      {"generate-dataset", "draw scenes and probe items, write dataset.json", cmd_generate_dataset},
      {"run", "evaluate one decoding configuration, write results.json", cmd_run},
      {"ablate", "generation x textual x visual grid, write ablation.csv", cmd_ablate},
      {"sweep", "one hyperparameter over a value list, write sweep_<param>.csv", cmd_sweep},
      {"attention-profile", "per-layer attention shares, write attention_profile.csv", cmd_attention_profile},
  };
  CommonFlags flags;
  std::vector<CLI::App*> cmds;
  for (const Verb& v : verbs) {
    cmds.push_back(app.add_subcommand(v.name, v.help));
    add_common(cmds.back(), flags);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  for (std::size_t i = 0; i < cmds.size(); ++i) {
    if (!cmds[i]->parsed()) continue;
    try {
      const rbd::ExperimentConfig config = load_config(flags, cmds[i]->remaining());
      verbs[i].fn(config, flags);
      return 0;
    } catch (const rbd::ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return kExitConfig;
    } catch (const std::exception& e) {
      std::cerr << "runtime error: " << e.what() << '\n';
      return kExitRuntime;
    }
  }
  return kExitConfig;
}

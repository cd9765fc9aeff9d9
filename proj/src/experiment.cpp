#include "rbd/experiment.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <iomanip>
#include <sstream>

#include "rbd/parallel.hpp"

namespace rbd {
namespace {

void require_seed(const Json& j, const char* section, const char* key) {
  if (!j.contains(section) || !j.at(section).is_object() || !j.at(section).contains(key)) {
    throw ConfigError(std::string("seed ") + section + "." + key + " is missing; every seed must be explicit");
  }
  if (!j.at(section).at(key).is_number_unsigned()) {
    throw ConfigError(std::string(section) + "." + key + " must be a non-negative integer");
  }
}

template <typename T>
void read_field(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

// Branch validators report DomainError; in a config they are config errors.
template <typename Fn>
void as_config_error(Fn fn) {
  try {
    fn();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
}

std::vector<std::string> object_names(const WorldSpec& w, const std::vector<int>& ids) {
  std::vector<std::string> out;
  for (int o : ids) out.push_back(w.object_names[static_cast<std::size_t>(o)]);
  return out;
}

int parse_beam_width(const std::string& generation) {
  const std::string prefix = "beam-";
  if (generation.rfind(prefix, 0) != 0) return 0;
  try {
    std::size_t used = 0;
    const int width = std::stoi(generation.substr(prefix.size()), &used);
    if (used + prefix.size() == generation.size() && width >= 1) return width;
  } catch (const std::exception&) {
  }
  throw ConfigError("ablation.generation: bad beam entry '" + generation + "' (expected beam-<width>)");
}

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

}  // namespace

ExperimentConfig parse_experiment_config(const Json& j) {
  check_keys(j,
             {"model", "dataset", "world", "decode", "textual", "visual", "outputs", "report_attention", "workers",
              "attention", "ablation", "sweep"},
             "config");
  require_seed(j, "model", "seed");
  require_seed(j, "dataset", "seed");
  require_seed(j, "decode", "sample_seed");
  require_seed(j, "textual", "noise_seed");

  ExperimentConfig c;
  const Json& ds = j.at("dataset");
  check_keys(ds, {"n_scenes", "vocab_size", "seed", "path", "bias"}, "dataset");
  int vocab = 16;
  read_field(ds, "vocab_size", vocab, "dataset");
  if (j.contains("world")) {
    from_json(j.at("world"), c.world);
    if (ds.contains("vocab_size") && vocab != c.world.n_objects()) {
      throw ConfigError("dataset.vocab_size disagrees with the number of objects in world");
    }
  } else {
    c.world = WorldSpec::standard(vocab);
  }
  if (ds.contains("bias")) {
    Json w;
    to_json(w, c.world);
    w["bias"] = ds.at("bias");
    from_json(w, c.world);
  }
  read_field(ds, "n_scenes", c.n_scenes, "dataset");
  if (c.n_scenes < 1) throw ConfigError("dataset.n_scenes must be >= 1");
  c.dataset_seed = ds.at("seed").get<std::uint64_t>();
  read_field(ds, "path", c.dataset_path, "dataset");

  const ModelConfig given = j.at("model").get<ModelConfig>();
  c.model = world_model_config(c.world, given.seed);
  c.model.init_std = j.at("model").contains("init_std") ? given.init_std : c.model.init_std;
  for (const auto& item : j.at("model").items()) {
    const std::string& key = item.key();
    if (key == "seed" || key == "init_std") continue;
    Json derived;
    to_json(derived, c.model);
    if (derived.at(key) != item.value()) {
      throw ConfigError("model." + key + " is derived from the world and must be " + derived.at(key).dump());
    }
  }
  if (!(c.model.init_std >= 0.0)) throw ConfigError("model.init_std must be >= 0");

  c.decode = j.at("decode").get<DecodeParams>();
  c.textual = j.at("textual").get<TextualBranchConfig>();
  if (j.contains("visual")) c.visual = j.at("visual").get<VisualBranchConfig>();
  as_config_error([&] {
    c.decode.validate();
    c.textual.validate();
    c.visual.validate();
  });

  read_field(j, "outputs", c.outputs, "config");
  read_field(j, "report_attention", c.report_attention, "config");
  read_field(j, "workers", c.workers, "config");
  if (c.workers < 1) throw ConfigError("workers must be >= 1");

  if (j.contains("attention")) {
    const Json& a = j.at("attention");
    check_keys(a, {"row_rule", "n_probes", "generated_tokens"}, "attention");
    if (a.contains("row_rule")) c.attention.row_rule = parse_row_rule(a.at("row_rule").get<std::string>());
    read_field(a, "n_probes", c.attention.n_probes, "attention");
    read_field(a, "generated_tokens", c.attention.generated_tokens, "attention");
    if (c.attention.n_probes < 1) throw ConfigError("attention.n_probes must be >= 1");
    if (c.attention.generated_tokens < 1) throw ConfigError("attention.generated_tokens must be >= 1");
  }
  if (j.contains("ablation")) {
    const Json& a = j.at("ablation");
    check_keys(a, {"generation", "textual", "visual"}, "ablation");
    read_field(a, "generation", c.ablation.generation, "ablation");
    read_field(a, "textual", c.ablation.textual, "ablation");
    read_field(a, "visual", c.ablation.visual, "ablation");
    for (const auto& g : c.ablation.generation) ablation_cell(c, g, "noise", "select");
    for (const auto& t : c.ablation.textual) parse_textual_mode(t);
    for (const auto& v : c.ablation.visual) parse_mask_mode(v);
  }
  if (j.contains("sweep")) {
    const Json& s = j.at("sweep");
    check_keys(s, {"param", "values"}, "sweep");
    if (s.contains("param")) c.sweep.param = parse_sweep_param(s.at("param").get<std::string>());
    read_field(s, "values", c.sweep.values, "sweep");
  }
  return c;
}

Json experiment_config_to_json(const ExperimentConfig& c) {
  Json j;
  j["model"] = c.model;
  j["world"] = c.world;
  j["dataset"] = Json{{"n_scenes", c.n_scenes}, {"vocab_size", c.world.n_objects()}, {"seed", c.dataset_seed}};
  if (!c.dataset_path.empty()) j["dataset"]["path"] = c.dataset_path;
  j["decode"] = c.decode;
  j["textual"] = c.textual;
  j["visual"] = c.visual;
  j["outputs"] = c.outputs;
  j["report_attention"] = c.report_attention;
  j["workers"] = c.workers;
  j["attention"] = Json{{"row_rule", to_string(c.attention.row_rule)},
                        {"n_probes", c.attention.n_probes},
                        {"generated_tokens", c.attention.generated_tokens}};
  j["ablation"] = Json{{"generation", c.ablation.generation},
                       {"textual", c.ablation.textual},
                       {"visual", c.ablation.visual}};
  j["sweep"] = Json{{"param", to_string(c.sweep.param)}, {"values", c.sweep.values}};
  return j;
}

void apply_override(Json& config, const std::string& dotted_key, const std::string& value) {
  if (dotted_key.empty()) throw ConfigError("empty override key");
  Json parsed = Json::parse(value, nullptr, false);
  if (parsed.is_discarded()) parsed = value;
  Json* node = &config;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("malformed override key '" + dotted_key + "'");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("override '" + dotted_key + "' descends into a non-object");
      *node = Json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = parsed;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

void apply_global_seed(Json& config, std::uint64_t seed) {
  apply_override(config, "model.seed", std::to_string(seed));
  apply_override(config, "dataset.seed", std::to_string(seed));
  apply_override(config, "decode.sample_seed", std::to_string(seed));
  apply_override(config, "textual.noise_seed", std::to_string(seed));
}

Dataset load_or_generate_dataset(const ExperimentConfig& c) {
  if (c.dataset_path.empty()) return generate_dataset(c.n_scenes, c.world, c.dataset_seed);
  const Json j = read_json_file(c.dataset_path);
  Json mine, theirs;
  to_json(mine, c.world);
  to_json(theirs, dataset_world(j));
  if (mine != theirs) throw ConfigError("dataset file " + c.dataset_path + " was drawn from a different world");
  return dataset_from_json(j, c.world);
}

ToyModel build_experiment_model(const ExperimentConfig& c) { return build_world_model(c.world, c.model); }

EvalSettings eval_settings(const ExperimentConfig& c) {
  EvalSettings s;
  s.decode = c.decode;
  s.textual = c.textual;
  s.visual = c.visual;
  s.workers = c.workers;
  return s;
}

ExperimentResult evaluate_experiment(const ExperimentConfig& c) {
  ExperimentResult r;
  r.dataset = load_or_generate_dataset(c);
  const ToyModel model = build_experiment_model(c);
  r.report = evaluate(model, c.world, r.dataset, eval_settings(c));
  return r;
}

OrderedJson results_json(const ExperimentConfig& c, const ExperimentResult& r, const std::string& timestamp) {
  OrderedJson out;
  out["timestamp"] = timestamp;
  out["config"] = experiment_config_to_json(c);
  out["seeds"] = OrderedJson{{"model", c.model.seed},
                             {"dataset", c.dataset_seed},
                             {"sample", c.decode.sample_seed},
                             {"noise", c.textual.noise_seed}};

  OrderedJson pope = OrderedJson::object();
  for (const auto& [setting, p] : r.report.pope) {
    pope[to_string(setting)] = OrderedJson{{"accuracy", p.accuracy}, {"f1", p.f1}, {"n", p.n}};
  }
  out["metrics"] = OrderedJson{{"chair_s", r.report.chair.chair_s}, {"chair_i", r.report.chair.chair_i}, {"pope", pope}};
  out["warnings"] = r.report.warnings;

  const Lexicon lex(c.world);
  OrderedJson captions = OrderedJson::array();
  for (std::size_t i = 0; i < r.report.captions.size(); ++i) {
    const auto mentioned = extract_objects(r.report.captions[i], lex);
    captions.push_back(OrderedJson{{"scene", r.dataset.scenes[i].id},
                                   {"tokens", r.report.captions[i]},
                                   {"objects", object_names(c.world, {mentioned.begin(), mentioned.end()})}});
  }
  OrderedJson answers = OrderedJson::array();
  for (std::size_t i = 0; i < r.dataset.items.size(); ++i) {
    const PopeItem& item = r.dataset.items[i];
    const PopeRecord& rec = r.report.answers[i];
    answers.push_back(OrderedJson{{"scene", r.dataset.scenes[item.scene].id},
                                  {"object", c.world.object_names[static_cast<std::size_t>(item.object)]},
                                  {"setting", to_string(item.setting)},
                                  {"label", item.label ? "yes" : "no"},
                                  {"answer", to_string(rec.answer)},
                                  {"margin", OrderedJson{{"standard", rec.audit.standard},
                                                         {"visual", rec.audit.visual},
                                                         {"textual", rec.audit.textual},
                                                         {"combined", rec.audit.combined}}}});
  }
  out["predictions"] = OrderedJson{{"captions", captions}, {"pope", answers}};
  return out;
}

std::filesystem::path write_experiment_outputs(const ExperimentConfig& c, const ExperimentResult& r) {
  const std::filesystem::path dir(c.outputs);
  const std::filesystem::path path = dir / "results.json";
  write_text_file(path, results_json(c, r, utc_timestamp()).dump(2) + "\n");
  if (c.report_attention) {
    std::ostringstream csv;
    write_profile_csv(csv, run_attention_profile(c));
    write_text_file(dir / "attention_profile.csv", csv.str());
  }
  return path;
}

std::filesystem::path run_experiment(const ExperimentConfig& c) {
  return write_experiment_outputs(c, evaluate_experiment(c));
}

ExperimentConfig ablation_cell(const ExperimentConfig& base, const std::string& generation, const std::string& textual,
                               const std::string& visual) {
  ExperimentConfig c = base;
  // The generation axis picks the sampler; a plain base strategy has no
  // combined distribution to sample from, so it is lifted to rbd.
  switch (c.decode.strategy) {
    case Strategy::greedy:
    case Strategy::beam:
    case Strategy::top_k:
    case Strategy::top_p:
      c.decode.strategy = Strategy::rbd;
      break;
    default:
      break;
  }
  if (generation == "greedy") {
    c.decode.sampler = Sampler::argmax;
  } else if (generation == "top_k") {
    c.decode.sampler = Sampler::top_k;
  } else if (generation == "top_p") {
    c.decode.sampler = Sampler::top_p;
  } else if (const int width = parse_beam_width(generation); width > 0) {
    c.decode.sampler = Sampler::beam;
    c.decode.beam_width = width;
  } else {
    throw ConfigError("ablation.generation: unknown entry '" + generation + "'");
  }
  c.textual.mode = parse_textual_mode(textual);
  c.visual.mode = parse_mask_mode(visual);
  return c;
}

std::vector<AblationRow> run_ablation_matrix(const ExperimentConfig& base, const AblationAxes& axes) {
  if (axes.generation.empty() || axes.textual.empty() || axes.visual.empty()) {
    throw ConfigError("ablation axes must each list at least one option");
  }
  std::vector<AblationRow> rows;
  std::vector<ExperimentConfig> cells;
  for (const auto& g : axes.generation) {
    for (const auto& t : axes.textual) {
      for (const auto& v : axes.visual) {
        cells.push_back(ablation_cell(base, g, t, v));
        cells.back().workers = 1;
        rows.push_back(AblationRow{g, t, v, {}, {}});
      }
    }
  }
  const Dataset data = load_or_generate_dataset(base);
  const ToyModel model = build_experiment_model(base);
  parallel_for(cells.size(), base.workers, [&](std::size_t i) {
    const EvalReport report = evaluate(model, base.world, data, eval_settings(cells[i]));
    rows[i].pope = report.pope_for(PopeSetting::adversarial);
    rows[i].chair = report.chair;
  });
  return rows;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << "generation,textual,visual,pope_accuracy,pope_f1,chair_s,chair_i\n";
  for (const auto& r : rows) {
    out << r.generation << ',' << r.textual << ',' << r.visual << ',' << format_double(r.pope.accuracy) << ','
        << format_double(r.pope.f1) << ',' << format_double(r.chair.chair_s) << ',' << format_double(r.chair.chair_i)
        << '\n';
  }
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const SweepSpec& spec) {
  if (spec.values.empty()) throw ConfigError("sweep.values is empty");
  std::vector<ExperimentConfig> cells;
  for (std::size_t i = 0; i < spec.values.size(); ++i) {
    const double v = spec.values[i];
    const std::string entry = "sweep.values[" + std::to_string(i) + "] = " + format_double(v);
    ExperimentConfig c = base;
    c.workers = 1;
    switch (spec.param) {
      case SweepParam::alpha:
        if (!(v >= 0.0 && v <= 1.0)) throw ConfigError(entry + " is outside [0, 1] for alpha");
        c.decode.alpha = v;
        break;
      case SweepParam::beta:
        if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError(entry + " must be a finite beta > 0");
        c.visual.beta = v;
        break;
      case SweepParam::gamma:
        if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError(entry + " must be a finite gamma >= 0");
        c.textual.gamma = v;
        break;
    }
    cells.push_back(std::move(c));
  }
  const Dataset data = load_or_generate_dataset(base);
  const ToyModel model = build_experiment_model(base);
  std::vector<SweepRow> rows(cells.size());
  parallel_for(cells.size(), base.workers, [&](std::size_t i) {
    EvalSettings s = eval_settings(cells[i]);
    s.captions = false;
    rows[i].value = spec.values[i];
    rows[i].report = evaluate(model, base.world, data, s);
  });
  return rows;
}

void write_sweep_csv(std::ostream& out, SweepParam param, const std::vector<SweepRow>& rows) {
  out << "param,value,adversarial_accuracy,adversarial_f1,popular_accuracy,random_accuracy\n";
  for (const auto& r : rows) {
    const auto& adv = r.report.pope_for(PopeSetting::adversarial);
    out << to_string(param) << ',' << format_double(r.value) << ',' << format_double(adv.accuracy) << ','
        << format_double(adv.f1) << ',' << format_double(r.report.pope_for(PopeSetting::popular).accuracy) << ','
        << format_double(r.report.pope_for(PopeSetting::random).accuracy) << '\n';
  }
}

AttentionProfile run_attention_profile(const ExperimentConfig& c) {
  const Dataset data = load_or_generate_dataset(c);
  const ToyModel model = build_experiment_model(c);
  std::vector<TokenSequence> probes;
  const std::size_t n = std::min(data.scenes.size(), static_cast<std::size_t>(c.attention.n_probes));
  for (std::size_t i = 0; i < n; ++i) probes.push_back(caption_prompt(c.world, data.scenes[i]));
  ProfileOptions opts;
  opts.row_rule = c.attention.row_rule;
  opts.generated_tokens = c.attention.generated_tokens;
  return corpus_attention_profile(model, probes, opts);
}

std::string to_string(SweepParam p) {
  switch (p) {
    case SweepParam::alpha: return "alpha";
    case SweepParam::beta: return "beta";
    case SweepParam::gamma: return "gamma";
  }
  return "?";
}

SweepParam parse_sweep_param(const std::string& s) {
  for (SweepParam p : {SweepParam::alpha, SweepParam::beta, SweepParam::gamma}) {
    if (to_string(p) == s) return p;
  }
  throw ConfigError("unknown sweep parameter '" + s + "' (expected alpha, beta or gamma)");
}

std::string utc_timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

}  // namespace rbd

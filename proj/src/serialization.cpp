#include "rbd/serialization.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace rbd {
namespace {

template <typename T>
void read_if(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <typename Parse, typename T>
void read_enum(const Json& j, const char* key, T& out, Parse parse, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string()) throw ConfigError(where + "." + key + " must be a string");
  out = parse(j.at(key).get<std::string>());
}

void require_object(const Json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
}

int object_id(const WorldSpec& w, const std::string& name) {
  for (int i = 0; i < w.n_objects(); ++i) {
    if (w.object_names[static_cast<std::size_t>(i)] == name) return i;
  }
  throw ConfigError("unknown object name '" + name + "'");
}

Json matrix_to_json(const Matrix& m) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    rows.push_back(std::vector<double>(row.begin(), row.end()));
  }
  return rows;
}

Matrix matrix_from_json(const Json& j, const std::string& where) {
  if (!j.is_array() || j.empty()) throw ConfigError(where + " must be a non-empty array of rows");
  const std::size_t cols = j.front().size();
  Matrix m(j.size(), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols) throw ConfigError(where + " rows differ in length");
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

}  // namespace

void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require_object(j, where);
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) throw ConfigError("unknown key '" + where + "." + item.key() + "'");
  }
}

void to_json(Json& j, const ModelConfig& c) {
  j = Json{{"d_model", c.d_model},     {"n_heads", c.n_heads},         {"n_layers", c.n_layers},
           {"vocab_size", c.vocab_size}, {"n_visual_tokens", c.n_visual_tokens}, {"max_seq_len", c.max_seq_len},
           {"feature_dim", c.feature_dim}, {"d_ff", c.d_ff},            {"eos_token", c.eos_token},
           {"seed", c.seed},           {"init_std", c.init_std}};
}

void from_json(const Json& j, ModelConfig& c) {
  const std::string w = "model";
  check_keys(j, {"d_model", "n_heads", "n_layers", "vocab_size", "n_visual_tokens", "max_seq_len", "feature_dim",
                 "d_ff", "eos_token", "seed", "init_std"},
             w);
  read_if(j, "d_model", c.d_model, w);
  read_if(j, "n_heads", c.n_heads, w);
  read_if(j, "n_layers", c.n_layers, w);
  read_if(j, "vocab_size", c.vocab_size, w);
  read_if(j, "n_visual_tokens", c.n_visual_tokens, w);
  read_if(j, "max_seq_len", c.max_seq_len, w);
  read_if(j, "feature_dim", c.feature_dim, w);
  read_if(j, "d_ff", c.d_ff, w);
  read_if(j, "eos_token", c.eos_token, w);
  read_if(j, "seed", c.seed, w);
  read_if(j, "init_std", c.init_std, w);
}

void to_json(Json& j, const DecodeParams& d) {
  j = Json{{"strategy", to_string(d.strategy)}, {"alpha", d.alpha}, {"beam_width", d.beam_width},
           {"k", d.k}, {"p", d.p}, {"sampler", to_string(d.sampler)}, {"sample_seed", d.sample_seed},
           {"max_new_tokens", d.max_new_tokens}};
}

void from_json(const Json& j, DecodeParams& d) {
  const std::string w = "decode";
  check_keys(j, {"strategy", "alpha", "beam_width", "k", "p", "sampler", "sample_seed", "max_new_tokens"}, w);
  read_enum(j, "strategy", d.strategy, parse_strategy, w);
  read_if(j, "alpha", d.alpha, w);
  read_if(j, "beam_width", d.beam_width, w);
  read_if(j, "k", d.k, w);
  read_if(j, "p", d.p, w);
  read_enum(j, "sampler", d.sampler, parse_sampler, w);
  read_if(j, "sample_seed", d.sample_seed, w);
  read_if(j, "max_new_tokens", d.max_new_tokens, w);
}

void to_json(Json& j, const TextualBranchConfig& t) {
  j = Json{{"mode", to_string(t.mode)}, {"gamma", t.gamma}, {"mu", t.mu}, {"delta", t.delta},
           {"noise_seed", t.noise_seed}};
}

void from_json(const Json& j, TextualBranchConfig& t) {
  const std::string w = "textual";
  check_keys(j, {"mode", "gamma", "mu", "delta", "noise_seed"}, w);
  read_enum(j, "mode", t.mode, parse_textual_mode, w);
  read_if(j, "gamma", t.gamma, w);
  read_if(j, "mu", t.mu, w);
  read_if(j, "delta", t.delta, w);
  read_if(j, "noise_seed", t.noise_seed, w);
}

void to_json(Json& j, const VisualBranchConfig& v) {
  j = Json{{"mode", to_string(v.mode)},
           {"beta", v.beta},
           {"threshold_rule", to_string(v.threshold_rule)},
           {"threshold_value", v.threshold_value},
           {"reduction", to_string(v.reduction)}};
}

void from_json(const Json& j, VisualBranchConfig& v) {
  const std::string w = "visual";
  check_keys(j, {"mode", "beta", "threshold_rule", "threshold_value", "reduction"}, w);
  read_enum(j, "mode", v.mode, parse_mask_mode, w);
  read_if(j, "beta", v.beta, w);
  read_enum(j, "threshold_rule", v.threshold_rule, parse_threshold_rule, w);
  read_if(j, "threshold_value", v.threshold_value, w);
  read_enum(j, "reduction", v.reduction, parse_reduction, w);
}

#define RBD_GAIN_FIELDS(X)                                                                                  \
  X(instr_score) X(sink_score) X(mention_score) X(query_gain) X(query_threshold) X(visual_score)         \
  X(salience_score) X(match_score) X(context_score) X(visual_row_sink) X(match_gain) X(match_threshold) \
  X(yes_match) X(yes_prior) X(no_seen) X(no_bias) X(mode_boost) X(caption_object) X(caption_prior)      \
  X(caption_mention) X(eos_bias)

void to_json(Json& j, const CircuitGains& g) {
  j = Json::object();
#define RBD_PUT(f) j[#f] = g.f;
  RBD_GAIN_FIELDS(RBD_PUT)
#undef RBD_PUT
}

void from_json(const Json& j, CircuitGains& g) {
  const std::string w = "world.gains";
#define RBD_NAME(f) #f,
  check_keys(j, {RBD_GAIN_FIELDS(RBD_NAME)}, w);
#undef RBD_NAME
#define RBD_GET(f) read_if(j, #f, g.f, w);
  RBD_GAIN_FIELDS(RBD_GET)
#undef RBD_GET
}

#undef RBD_GAIN_FIELDS

void to_json(Json& j, const WorldSpec& w) {
  Json contexts = Json::array();
  for (const auto& c : w.contexts) {
    std::vector<std::string> names;
    for (int o : c.typical_objects) names.push_back(w.object_names[static_cast<std::size_t>(o)]);
    contexts.push_back(Json{{"label", c.label}, {"typical_objects", names}});
  }
  Json bias = Json::object();
  for (const auto& [label, row] : w.bias.prior) {
    Json r = Json::object();
    for (const auto& [o, s] : row) r[w.object_names[static_cast<std::size_t>(o)]] = s;
    bias[label] = r;
  }
  j = Json{{"objects", w.object_names},
           {"contexts", contexts},
           {"bias", bias},
           {"n_visual_tokens", w.n_visual_tokens},
           {"max_objects_per_scene", w.max_objects_per_scene},
           {"typical_presence", w.typical_presence},
           {"outsider_rate", w.outsider_rate},
           {"feature_jitter", w.feature_jitter},
           {"gains", w.gains}};
}

void from_json(const Json& j, WorldSpec& w) {
  const std::string where = "world";
  check_keys(j,
             {"objects", "contexts", "bias", "n_visual_tokens", "max_objects_per_scene", "typical_presence",
              "outsider_rate", "feature_jitter", "gains"},
             where);
  read_if(j, "objects", w.object_names, where);
  if (j.contains("contexts")) {
    w.contexts.clear();
    for (const auto& c : j.at("contexts")) {
      check_keys(c, {"label", "typical_objects"}, where + ".contexts[]");
      ContextSpec spec;
      spec.label = c.at("label").get<std::string>();
      for (const auto& name : c.at("typical_objects")) spec.typical_objects.push_back(object_id(w, name.get<std::string>()));
      w.contexts.push_back(std::move(spec));
    }
  }
  if (j.contains("bias")) {
    require_object(j.at("bias"), where + ".bias");
    w.bias.prior.clear();
    for (const auto& [label, row] : j.at("bias").items()) {
      require_object(row, where + ".bias." + label);
      for (const auto& [name, s] : row.items()) {
        if (!s.is_number()) throw ConfigError(where + ".bias." + label + "." + name + " must be a number");
        w.bias.prior[label][object_id(w, name)] = s.get<double>();
      }
    }
  }
  read_if(j, "n_visual_tokens", w.n_visual_tokens, where);
  read_if(j, "max_objects_per_scene", w.max_objects_per_scene, where);
  read_if(j, "typical_presence", w.typical_presence, where);
  read_if(j, "outsider_rate", w.outsider_rate, where);
  read_if(j, "feature_jitter", w.feature_jitter, where);
  if (j.contains("gains")) from_json(j.at("gains"), w.gains);
  w.validate();
}

Json dataset_to_json(const Dataset& data, const WorldSpec& world) {
  std::vector<Json> scenes(data.scenes.size());
  for (std::size_t i = 0; i < data.scenes.size(); ++i) {
    const Scene& s = data.scenes[i];
    std::vector<std::string> names;
    for (int o : s.objects) names.push_back(world.object_names[static_cast<std::size_t>(o)]);
    scenes[i] = Json{{"id", s.id}, {"context", s.context}, {"objects", names},
                     {"features", matrix_to_json(s.features)}, {"pope", Json::array()}};
  }
  for (const PopeItem& item : data.items) {
    scenes.at(item.scene)["pope"].push_back(Json{{"object", world.object_names[static_cast<std::size_t>(item.object)]},
                                                 {"label", item.label ? "yes" : "no"},
                                                 {"setting", to_string(item.setting)}});
  }
  return Json{{"format", "rbd-dataset-1"}, {"seed", data.seed}, {"world", world}, {"scenes", scenes}};
}

WorldSpec dataset_world(const Json& j) {
  if (!j.is_object() || j.value("format", "") != "rbd-dataset-1") throw ConfigError("not a dataset file");
  WorldSpec w;
  from_json(j.at("world"), w);
  return w;
}

Dataset dataset_from_json(const Json& j, const WorldSpec& world) {
  if (!j.is_object() || j.value("format", "") != "rbd-dataset-1") throw ConfigError("not a dataset file");
  check_keys(j, {"format", "seed", "world", "scenes"}, "dataset");
  Dataset data;
  data.seed = j.at("seed").get<std::uint64_t>();
  std::set<std::string> ids;
  for (const auto& rec : j.at("scenes")) {
    check_keys(rec, {"id", "context", "objects", "features", "pope"}, "dataset.scenes[]");
    Scene s;
    s.id = rec.at("id").get<std::string>();
    if (!ids.insert(s.id).second) throw ConfigError("dataset: duplicate scene id " + s.id);
    s.context = rec.at("context").get<std::string>();
    world.context_index(s.context);
    for (const auto& name : rec.at("objects")) s.objects.push_back(object_id(world, name.get<std::string>()));
    std::sort(s.objects.begin(), s.objects.end());
    if (s.objects.empty() || std::adjacent_find(s.objects.begin(), s.objects.end()) != s.objects.end()) {
      throw ConfigError("dataset: scene " + s.id + " needs a non-empty set of distinct objects");
    }
    s.features = matrix_from_json(rec.at("features"), "dataset." + s.id + ".features");
    if (s.features.rows() != static_cast<std::size_t>(world.n_visual_tokens) ||
        s.features.cols() != static_cast<std::size_t>(world.feature_dim())) {
      throw ConfigError("dataset: scene " + s.id + " feature matrix has the wrong shape");
    }
    const std::size_t index = data.scenes.size();
    for (const auto& p : rec.at("pope")) {
      check_keys(p, {"object", "label", "setting"}, "dataset.scenes[].pope[]");
      PopeItem item;
      item.scene = index;
      item.object = object_id(world, p.at("object").get<std::string>());
      const std::string label = p.at("label").get<std::string>();
      if (label != "yes" && label != "no") throw ConfigError("dataset: POPE label must be yes or no");
      item.label = label == "yes";
      if (item.label != std::binary_search(s.objects.begin(), s.objects.end(), item.object)) {
        throw ConfigError("dataset: POPE label disagrees with the objects of " + s.id);
      }
      item.setting = parse_pope_setting(p.at("setting").get<std::string>());
      data.items.push_back(item);
    }
    data.scenes.push_back(std::move(s));
  }
  return data;
}

Json model_fixture_to_json(const ModelConfig& config, const WorldSpec& world) {
  return Json{{"format", "rbd-model-1"}, {"config", config}, {"world", world}};
}

ToyModel model_from_fixture(const Json& j) {
  if (!j.is_object() || j.value("format", "") != "rbd-model-1") throw ConfigError("not a model fixture");
  check_keys(j, {"format", "config", "world"}, "fixture");
  const ModelConfig config = j.at("config").get<ModelConfig>();
  WorldSpec world;
  from_json(j.at("world"), world);
  return build_world_model(world, config);
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace rbd

#pragma once

// JSON forms of every configuration type, the dataset file and the model
// fixture. Readers reject unknown keys so that a misspelt override fails loudly.

#include <filesystem>
#include <string>

#include "json.hpp"
#include "rbd/eval.hpp"

namespace rbd {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

// Throws ConfigError naming `where` and the first key not in `allowed`.
void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where);

void to_json(Json& j, const ModelConfig& c);
void from_json(const Json& j, ModelConfig& c);
void to_json(Json& j, const DecodeParams& d);
void from_json(const Json& j, DecodeParams& d);
void to_json(Json& j, const TextualBranchConfig& t);
void from_json(const Json& j, TextualBranchConfig& t);
void to_json(Json& j, const VisualBranchConfig& v);
void from_json(const Json& j, VisualBranchConfig& v);
void to_json(Json& j, const CircuitGains& g);
void from_json(const Json& j, CircuitGains& g);
void to_json(Json& j, const WorldSpec& w);
void from_json(const Json& j, WorldSpec& w);

// Dataset file: the world it was drawn from plus one record per scene
// (id, context, object names, feature matrix, POPE items).
Json dataset_to_json(const Dataset& data, const WorldSpec& world);
Dataset dataset_from_json(const Json& j, const WorldSpec& world);
WorldSpec dataset_world(const Json& j);

// Model fixture: config and world, from which the weights are rebuilt.
Json model_fixture_to_json(const ModelConfig& config, const WorldSpec& world);
ToyModel model_from_fixture(const Json& j);

Json read_json_file(const std::filesystem::path& path);
// Writes `text` to `path` (directories created as needed); IoError on failure.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace rbd

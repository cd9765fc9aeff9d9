#pragma once

// A closed-vocabulary scene world and a training-free model built for it.
//
// The model is an ordinary seeded ToyModel whose weights receive a hand-placed
// circuit on top of the random initialisation:
//
//   layer 0  head 0  copies the task mode (ask / describe) to later positions
//            head 1  gathers object tokens already written (mentions)
//            mlp     turns "object token + ask mode" into a query vector
//   layer 1  head 0  looks at the image: salient visual tokens, visual tokens
//                    matching the query, and the context token all compete in
//                    one softmax
//            mlp     detects query/image matches and query/context priors
//   head             yes <- match evidence + prior evidence
//                    no  <- visual evidence that was inspected
//                    object o <- visual mass on o + context prior on o - mentions
//
// The context prior enters only through the attention paid to the context
// token, so anything that moves attention from text to image changes how much
// the prior speaks. Degrading the image (noise) starves the visual keys after
// layer norm and hands that attention to the context token.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rbd/model.hpp"

namespace rbd {

// context label -> object id -> prior strength (>= 0)
struct BiasTable {
  std::map<std::string, std::map<int, double>> prior;

  double strength(const std::string& context, int object) const;
};

struct ContextSpec {
  std::string label;
  std::vector<int> typical_objects;
};

struct CircuitGains {
  double instr_score = 10.0;    // mode head: score on the ask/describe token
  double sink_score = 6.0;      // score on the system token
  double mention_score = 10.0;  // mention head: score on object tokens
  double query_gain = 10.0;     // layer-0 mlp gate sharpness
  double query_threshold = 0.75;
  double visual_score = 1.0;    // look head: base score on any visual token
  double salience_score = 1.5;  // extra score on visual tokens holding an object
  double match_score = 6.0;     // extra score on visual tokens matching the query
  double context_score = 3.7;   // score on the context token
  double visual_row_sink = 12.0;
  double match_gain = 1.5;      // layer-1 mlp unit scale
  double match_threshold = 0.8;
  // Readouts, in logits per unit of attention mass.
  double yes_match = 12.0;
  double yes_prior = 9.0;
  double no_seen = 6.0;
  double no_bias = 0.0;
  double mode_boost = 12.0;
  double caption_object = 40.0;
  double caption_prior = 5.0;
  double caption_mention = 100.0;
  double eos_bias = 3.0;
};

struct WorldSpec {
  std::vector<std::string> object_names;
  std::vector<ContextSpec> contexts;
  BiasTable bias;
  int n_visual_tokens = 8;
  int max_objects_per_scene = 4;
  double typical_presence = 0.5;  // chance a typical object appears in its context
  double outsider_rate = 0.3;     // chance of one object from another context
  double feature_jitter = 0.01;
  CircuitGains gains;

  int n_objects() const { return static_cast<int>(object_names.size()); }
  int n_contexts() const { return static_cast<int>(contexts.size()); }
  int context_index(const std::string& label) const;
  int feature_dim() const { return n_objects() + 1; }

  // Throws ConfigError on an inconsistent world.
  void validate() const;

  // Four contexts over sixteen objects with one strongly planted object per
  // context ("fruit-shop" -> "apple" at 1.0).
  static WorldSpec standard(int n_objects = 16);
};

// Token layout shared by prompts, captions and answers.
class Lexicon {
 public:
  explicit Lexicon(const WorldSpec& world);

  static constexpr TokenId eos = 0;
  static constexpr TokenId sys = 1;
  static constexpr TokenId describe = 2;
  static constexpr TokenId ask = 3;
  static constexpr TokenId yes = 4;
  static constexpr TokenId no = 5;

  TokenId context_token(int context) const { return static_cast<TokenId>(6 + context); }
  TokenId object_token(int object) const { return static_cast<TokenId>(6 + n_contexts_ + object); }
  std::optional<int> object_of(TokenId token) const;
  int vocab_size() const { return 6 + n_contexts_ + n_objects_; }
  int n_objects() const { return n_objects_; }

 private:
  int n_contexts_ = 0;
  int n_objects_ = 0;
};

// Model config sized for the world's circuit (d_model, d_ff, vocab, features).
ModelConfig world_model_config(const WorldSpec& world, std::uint64_t seed);

// Seeded weights plus the planted circuit. `config` must come from
// world_model_config (seed and init_std may differ).
ToyModel build_world_model(const WorldSpec& world, const ModelConfig& config);

}  // namespace rbd

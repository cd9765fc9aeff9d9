#pragma once

// Synthetic scenes over a closed object vocabulary, the captioning and
// yes/no probing tasks built on them, and the hallucination metrics.

#include <set>
#include <string>
#include <vector>

#include "rbd/branches.hpp"
#include "rbd/decoding.hpp"
#include "rbd/world.hpp"

namespace rbd {

struct Scene {
  std::string id;
  std::string context;
  std::vector<int> objects;  // sorted, unique, non-empty
  Matrix features;           // n_visual_tokens x feature_dim
};

enum class PopeSetting { random, popular, adversarial };
inline constexpr PopeSetting kPopeSettings[] = {PopeSetting::random, PopeSetting::popular,
                                                PopeSetting::adversarial};

struct PopeItem {
  std::size_t scene = 0;  // index into Dataset::scenes
  int object = 0;
  bool label = false;     // true iff object is present
  PopeSetting setting = PopeSetting::random;
};

struct Dataset {
  std::uint64_t seed = 0;
  std::vector<Scene> scenes;
  std::vector<PopeItem> items;  // grouped by scene, then setting, yes item first
};

// One yes and one no item per scene and setting. The no item of the
// adversarial setting is the absent object with the highest prior in the
// scene's context (ties: co-occurrence count in that context, then id); the
// popular one is the absent object present in most scenes overall.
Dataset generate_dataset(int n_scenes, const WorldSpec& world, std::uint64_t seed);

// Object k of the scene occupies a shuffled visual slot as a one-hot row; the
// remaining slots carry the background flag. Every entry gets N(0, jitter).
Matrix encode_scene_features(const WorldSpec& world, const std::vector<int>& objects, Rng& rng);

TokenSequence caption_prompt(const WorldSpec& world, const Scene& scene);
TokenSequence pope_prompt(const WorldSpec& world, const Scene& scene, int object);

std::set<int> extract_objects(const std::vector<TokenId>& caption, const Lexicon& lexicon);

struct ChairResult {
  double chair_s = 0.0;
  double chair_i = 0.0;
  std::size_t captions = 0;
  std::size_t hallucinated_captions = 0;
  std::size_t mentions = 0;
  std::size_t hallucinated_mentions = 0;
  std::vector<std::string> warnings;
};

ChairResult chair_metrics(const std::vector<std::set<int>>& captions, const std::vector<std::set<int>>& truth);

enum class PopeAnswer { yes, no, invalid };

struct PopeResult {
  double accuracy = 0.0;
  double f1 = 0.0;
  std::size_t n = 0;
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t invalid = 0;  // already folded into fp / fn
  std::vector<std::string> warnings;
};

// An invalid answer counts as wrong: fn on a yes item, fp on a no item.
PopeResult pope_eval(const std::vector<PopeAnswer>& answers, const std::vector<PopeItem>& items);

struct EvalSettings {
  DecodeParams decode;
  TextualBranchConfig textual;
  VisualBranchConfig visual;
  bool captions = true;  // false skips captioning and CHAIR
  int workers = 1;
};

// Per-branch logit margins (yes minus no) at the answer step.
struct PopeAudit {
  double standard = 0.0;
  double visual = 0.0;
  double textual = 0.0;
  double combined = 0.0;  // margin of the distribution actually decoded, in log space
};

struct PopeRecord {
  PopeAnswer answer = PopeAnswer::invalid;
  PopeAudit audit;
};

PopeRecord answer_pope_item(const ToyModel& model, const WorldSpec& world, const Scene& scene,
                            const PopeItem& item, const EvalSettings& settings);

// Caption length is capped by decode.max_new_tokens.
GenerationResult caption_scene(const ToyModel& model, const WorldSpec& world, const Scene& scene,
                               const EvalSettings& settings);

struct EvalReport {
  ChairResult chair;
  std::vector<std::pair<PopeSetting, PopeResult>> pope;
  std::vector<std::vector<TokenId>> captions;  // per scene, empty when captions are off
  std::vector<PopeRecord> answers;             // per item
  std::vector<std::string> warnings;

  const PopeResult& pope_for(PopeSetting setting) const;
};

// Items are independent; workers only change wall time, never the report.
EvalReport evaluate(const ToyModel& model, const WorldSpec& world, const Dataset& data, const EvalSettings& settings);

std::string to_string(PopeSetting s);
std::string to_string(PopeAnswer a);
PopeSetting parse_pope_setting(const std::string& s);
PopeAnswer parse_pope_answer(const std::string& s);

}  // namespace rbd

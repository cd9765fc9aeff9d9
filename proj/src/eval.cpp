#include "rbd/eval.hpp"

#include "rbd/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rbd {
namespace {

std::size_t pick(Rng& rng, std::size_t n) {
  return std::min(n - 1, static_cast<std::size_t>(rng.uniform() * static_cast<double>(n)));
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[pick(rng, i)]);
}

bool contains(const std::vector<int>& sorted, int v) { return std::binary_search(sorted.begin(), sorted.end(), v); }

}  // namespace

Matrix encode_scene_features(const WorldSpec& world, const std::vector<int>& objects, Rng& rng) {
  const auto n_vis = static_cast<std::size_t>(world.n_visual_tokens);
  if (objects.size() > n_vis) throw ConfigError("scene has more objects than visual tokens");
  std::vector<std::size_t> slots(n_vis);
  std::iota(slots.begin(), slots.end(), 0);
  shuffle(slots, rng);

  Matrix f(n_vis, static_cast<std::size_t>(world.feature_dim()));
  const auto background = static_cast<std::size_t>(world.n_objects());
  for (std::size_t r = 0; r < n_vis; ++r) f(r, background) = 1.0;
  for (std::size_t k = 0; k < objects.size(); ++k) {
    const int o = objects[k];
    if (o < 0 || o >= world.n_objects()) throw ConfigError("scene object id out of vocabulary");
    f(slots[k], background) = 0.0;
    f(slots[k], static_cast<std::size_t>(o)) = 1.0;
  }
  for (double& v : f.flat()) v += world.feature_jitter * rng.normal();
  return f;
}

Dataset generate_dataset(int n_scenes, const WorldSpec& world, std::uint64_t seed) {
  if (n_scenes < 1) throw ConfigError("dataset.n_scenes must be >= 1");
  world.validate();
  const int n_obj = world.n_objects();
  const int n_ctx = world.n_contexts();

  Dataset data;
  data.seed = seed;
  Rng rng(mix_seed(seed, 1));
  for (int i = 0; i < n_scenes; ++i) {
    const int c = static_cast<int>(pick(rng, static_cast<std::size_t>(n_ctx)));
    const ContextSpec& ctx = world.contexts[static_cast<std::size_t>(c)];
    std::vector<int> objs;
    for (int o : ctx.typical_objects) {
      if (rng.uniform() < world.typical_presence) objs.push_back(o);
    }
    if (objs.empty()) objs.push_back(ctx.typical_objects[pick(rng, ctx.typical_objects.size())]);
    if (rng.uniform() < world.outsider_rate) {
      std::vector<int> outsiders;
      for (int o = 0; o < n_obj; ++o) {
        if (std::find(ctx.typical_objects.begin(), ctx.typical_objects.end(), o) == ctx.typical_objects.end()) {
          outsiders.push_back(o);
        }
      }
      if (!outsiders.empty()) objs.push_back(outsiders[pick(rng, outsiders.size())]);
    }
    shuffle(objs, rng);
    if (objs.size() > static_cast<std::size_t>(world.max_objects_per_scene)) {
      objs.resize(static_cast<std::size_t>(world.max_objects_per_scene));
    }
    std::sort(objs.begin(), objs.end());

    Scene scene;
    scene.id = "scene-" + std::to_string(i);
    scene.context = ctx.label;
    scene.features = encode_scene_features(world, objs, rng);
    scene.objects = std::move(objs);
    data.scenes.push_back(std::move(scene));
  }

  // Global and per-context object frequencies.
  std::vector<int> global(static_cast<std::size_t>(n_obj), 0);
  std::vector<std::vector<int>> by_ctx(static_cast<std::size_t>(n_ctx), std::vector<int>(static_cast<std::size_t>(n_obj), 0));
  for (const auto& s : data.scenes) {
    const auto c = static_cast<std::size_t>(world.context_index(s.context));
    for (int o : s.objects) {
      ++global[static_cast<std::size_t>(o)];
      ++by_ctx[c][static_cast<std::size_t>(o)];
    }
  }

  Rng item_rng(mix_seed(seed, 2));
  for (std::size_t si = 0; si < data.scenes.size(); ++si) {
    const Scene& s = data.scenes[si];
    std::vector<int> absent;
    for (int o = 0; o < n_obj; ++o) {
      if (!contains(s.objects, o)) absent.push_back(o);
    }
    if (absent.empty()) {
      throw ConfigError("object vocabulary too small: " + s.id + " contains every object, no absent probe exists");
    }
    const auto c = static_cast<std::size_t>(world.context_index(s.context));
    for (PopeSetting setting : kPopeSettings) {
      const int yes_obj = s.objects[pick(item_rng, s.objects.size())];
      int no_obj = absent.front();
      switch (setting) {
        case PopeSetting::random: no_obj = absent[pick(item_rng, absent.size())]; break;
        case PopeSetting::popular:
          no_obj = *std::min_element(absent.begin(), absent.end(), [&](int a, int b) {
            const int fa = global[static_cast<std::size_t>(a)];
            const int fb = global[static_cast<std::size_t>(b)];
            return fa != fb ? fa > fb : a < b;
          });
          break;
        case PopeSetting::adversarial:
          no_obj = *std::min_element(absent.begin(), absent.end(), [&](int a, int b) {
            const double pa = world.bias.strength(s.context, a);
            const double pb = world.bias.strength(s.context, b);
            if (pa != pb) return pa > pb;
            const int fa = by_ctx[c][static_cast<std::size_t>(a)];
            const int fb = by_ctx[c][static_cast<std::size_t>(b)];
            return fa != fb ? fa > fb : a < b;
          });
          break;
      }
      data.items.push_back({si, yes_obj, true, setting});
      data.items.push_back({si, no_obj, false, setting});
    }
  }
  return data;
}

TokenSequence caption_prompt(const WorldSpec& world, const Scene& scene) {
  const Lexicon lex(world);
  return TokenSequence({Lexicon::sys}, scene.features,
                       {lex.context_token(world.context_index(scene.context)), Lexicon::describe});
}

TokenSequence pope_prompt(const WorldSpec& world, const Scene& scene, int object) {
  const Lexicon lex(world);
  if (object < 0 || object >= world.n_objects()) throw DomainError("probe object id out of vocabulary");
  return TokenSequence({Lexicon::sys}, scene.features,
                       {lex.context_token(world.context_index(scene.context)), Lexicon::ask, lex.object_token(object)});
}

std::set<int> extract_objects(const std::vector<TokenId>& caption, const Lexicon& lexicon) {
  std::set<int> out;
  for (TokenId t : caption) {
    if (auto o = lexicon.object_of(t)) out.insert(*o);
  }
  return out;
}

ChairResult chair_metrics(const std::vector<std::set<int>>& captions, const std::vector<std::set<int>>& truth) {
  if (captions.size() != truth.size()) throw ShapeError("chair_metrics: captions and scenes are not aligned");
  ChairResult r;
  r.captions = captions.size();
  for (std::size_t i = 0; i < captions.size(); ++i) {
    std::size_t bad = 0;
    for (int o : captions[i]) {
      if (!truth[i].count(o)) ++bad;
    }
    r.mentions += captions[i].size();
    r.hallucinated_mentions += bad;
    if (bad > 0) ++r.hallucinated_captions;
  }
  if (r.captions > 0) r.chair_s = static_cast<double>(r.hallucinated_captions) / static_cast<double>(r.captions);
  if (r.mentions == 0) {
    r.warnings.push_back("chair: no objects mentioned in any caption; chair_i set to 0");
  } else {
    r.chair_i = static_cast<double>(r.hallucinated_mentions) / static_cast<double>(r.mentions);
  }
  return r;
}

PopeResult pope_eval(const std::vector<PopeAnswer>& answers, const std::vector<PopeItem>& items) {
  if (answers.size() != items.size()) throw ShapeError("pope_eval: answers and items are not aligned");
  PopeResult r;
  r.n = items.size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const PopeAnswer a = answers[i];
    if (a == PopeAnswer::invalid) ++r.invalid;
    const bool said_yes = a == PopeAnswer::yes;
    const bool correct = a != PopeAnswer::invalid && said_yes == items[i].label;
    if (items[i].label) {
      (correct ? r.tp : r.fn)++;
    } else {
      (correct ? r.tn : r.fp)++;
    }
  }
  if (r.invalid > 0) r.warnings.push_back("pope: " + std::to_string(r.invalid) + " answers were neither yes nor no");
  if (r.n > 0) r.accuracy = static_cast<double>(r.tp + r.tn) / static_cast<double>(r.n);
  // fp here also holds invalid answers on no items; predicted positives are
  // only real yes answers.
  std::size_t predicted_yes = 0;
  for (PopeAnswer a : answers) predicted_yes += a == PopeAnswer::yes;
  if (predicted_yes == 0) {
    r.warnings.push_back("pope: no positive predictions; precision and f1 set to 0");
    return r;
  }
  const double precision = static_cast<double>(r.tp) / static_cast<double>(predicted_yes);
  const double recall = r.tp + r.fn == 0 ? 0.0 : static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn);
  r.f1 = precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
  return r;
}

namespace {

const VisualMask* maybe_mask(const ToyModel& model, const TokenSequence& prompt, const EvalSettings& settings,
                             VisualMask& storage) {
  if (!settings.decode.uses_visual_branch()) return nullptr;
  storage = prepare_visual_mask(model, prompt, settings.visual);
  return &storage;
}

}  // namespace

PopeRecord answer_pope_item(const ToyModel& model, const WorldSpec& world, const Scene& scene, const PopeItem& item,
                            const EvalSettings& settings) {
  const TokenSequence prompt = pope_prompt(world, scene, item.object);
  DecodeParams params = settings.decode;
  params.max_new_tokens = 1;
  params.record_branch_logits = true;
  params.record_distributions = true;
  // With a single decision token, beam search reduces to the argmax.
  if (params.strategy == Strategy::beam) params.strategy = Strategy::greedy;
  if (params.sampler == Sampler::beam) params.sampler = Sampler::argmax;
  VisualMask mask;
  const GenerationResult gen = generate(model, prompt, params, settings.textual, maybe_mask(model, prompt, settings, mask));

  PopeRecord rec;
  if (!gen.token_ids.empty()) {
    if (gen.token_ids.front() == Lexicon::yes) rec.answer = PopeAnswer::yes;
    if (gen.token_ids.front() == Lexicon::no) rec.answer = PopeAnswer::no;
  }
  if (!gen.branch_logit_log.empty()) {
    const auto& b = gen.branch_logit_log.front();
    auto margin = [](const std::vector<double>& s) { return s[Lexicon::yes] - s[Lexicon::no]; };
    rec.audit.standard = margin(b.standard);
    rec.audit.visual = margin(b.visual);
    rec.audit.textual = margin(b.textual);
    const auto& dist = gen.per_step_distributions.front();
    rec.audit.combined = std::log(dist[Lexicon::yes]) - std::log(dist[Lexicon::no]);
  }
  return rec;
}

GenerationResult caption_scene(const ToyModel& model, const WorldSpec& world, const Scene& scene,
                               const EvalSettings& settings) {
  const TokenSequence prompt = caption_prompt(world, scene);
  VisualMask mask;
  return generate(model, prompt, settings.decode, settings.textual, maybe_mask(model, prompt, settings, mask));
}

const PopeResult& EvalReport::pope_for(PopeSetting setting) const {
  for (const auto& [s, r] : pope) {
    if (s == setting) return r;
  }
  throw DomainError("no POPE result for setting " + to_string(setting));
}

EvalReport evaluate(const ToyModel& model, const WorldSpec& world, const Dataset& data, const EvalSettings& settings) {
  settings.decode.validate();
  if (settings.decode.uses_textual_branch()) settings.textual.validate();
  if (settings.decode.uses_visual_branch()) settings.visual.validate();

  // Sampled decoding draws from a per-item stream so the result does not
  // depend on scheduling.
  auto item_settings = [&](std::uint64_t stream) {
    EvalSettings s = settings;
    s.decode.sample_seed = mix_seed(settings.decode.sample_seed, stream);
    s.textual.noise_seed = mix_seed(settings.textual.noise_seed, stream);
    return s;
  };

  EvalReport report;
  if (settings.captions) {
    report.captions.resize(data.scenes.size());
    parallel_for(data.scenes.size(), settings.workers, [&](std::size_t i) {
      report.captions[i] = caption_scene(model, world, data.scenes[i], item_settings(2 * i)).token_ids;
    });
  }
  report.answers.resize(data.items.size());
  parallel_for(data.items.size(), settings.workers, [&](std::size_t i) {
    const PopeItem& item = data.items[i];
    if (item.scene >= data.scenes.size()) throw DomainError("POPE item refers to a missing scene");
    report.answers[i] = answer_pope_item(model, world, data.scenes[item.scene], item, item_settings(2 * i + 1));
  });

  if (settings.captions) {
    const Lexicon lex(world);
    std::vector<std::set<int>> mentioned, truth;
    for (std::size_t i = 0; i < data.scenes.size(); ++i) {
      mentioned.push_back(extract_objects(report.captions[i], lex));
      truth.emplace_back(data.scenes[i].objects.begin(), data.scenes[i].objects.end());
    }
    report.chair = chair_metrics(mentioned, truth);
    for (const auto& w : report.chair.warnings) report.warnings.push_back(w);
  }

  for (PopeSetting setting : kPopeSettings) {
    std::vector<PopeAnswer> answers;
    std::vector<PopeItem> items;
    for (std::size_t i = 0; i < data.items.size(); ++i) {
      if (data.items[i].setting != setting) continue;
      answers.push_back(report.answers[i].answer);
      items.push_back(data.items[i]);
    }
    PopeResult r = pope_eval(answers, items);
    for (const auto& w : r.warnings) report.warnings.push_back(to_string(setting) + ": " + w);
    report.pope.emplace_back(setting, std::move(r));
  }
  return report;
}

std::string to_string(PopeSetting s) {
  switch (s) {
    case PopeSetting::random: return "random";
    case PopeSetting::popular: return "popular";
    case PopeSetting::adversarial: return "adversarial";
  }
  return "?";
}

std::string to_string(PopeAnswer a) {
  switch (a) {
    case PopeAnswer::yes: return "yes";
    case PopeAnswer::no: return "no";
    case PopeAnswer::invalid: return "invalid";
  }
  return "?";
}

PopeSetting parse_pope_setting(const std::string& s) {
  for (PopeSetting v : kPopeSettings) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown POPE setting '" + s + "'");
}

PopeAnswer parse_pope_answer(const std::string& s) {
  for (PopeAnswer v : {PopeAnswer::yes, PopeAnswer::no, PopeAnswer::invalid}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown POPE answer '" + s + "'");
}

}  // namespace rbd

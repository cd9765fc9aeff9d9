#include "rbd/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace rbd {
namespace {

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw DomainError("alpha must lie in [0, 1]");
}

void check_same_size(const StepLogits& a, const StepLogits& b) {
  if (a.scores.size() != b.scores.size()) {
    throw ShapeError("branch logits differ in vocabulary size (" + std::to_string(a.scores.size()) + " vs " +
                     std::to_string(b.scores.size()) + ")");
  }
}

void check_dist(std::span<const double> dist) {
  if (dist.empty()) throw DomainError("empty probability vector");
}

// Indices ordered by descending probability, ties by ascending index.
std::vector<std::size_t> ranked(std::span<const double> dist) {
  std::vector<std::size_t> idx(dist.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
  return idx;
}

TokenId draw(std::span<const double> dist, const std::vector<std::size_t>& kept, Rng& rng) {
  double total = 0.0;
  for (std::size_t i : kept) total += dist[i];
  const double target = rng.uniform() * total;
  double acc = 0.0;
  for (std::size_t i : kept) {
    acc += dist[i];
    if (target < acc) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(kept.back());
}

TokenId select_token(std::span<const double> dist, Sampler sampler, const DecodeParams& params, Rng& rng) {
  switch (sampler) {
    case Sampler::argmax: return greedy_step(dist);
    case Sampler::top_k: return sample_top_k(dist, params.k, rng);
    case Sampler::top_p: return sample_top_p(dist, params.p, rng);
    case Sampler::beam: break;
  }
  return greedy_step(dist);
}

}  // namespace

void DecodeParams::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("decode.alpha must lie in [0, 1]");
  if (beam_width < 1) throw ConfigError("decode.beam_width must be >= 1");
  if (k < 1) throw ConfigError("decode.k must be >= 1");
  if (!(p > 0.0 && p <= 1.0)) throw ConfigError("decode.p must lie in (0, 1]");
  if (max_new_tokens < 1) throw ConfigError("decode.max_new_tokens must be >= 1");
}

bool DecodeParams::uses_textual_branch() const {
  return strategy == Strategy::rbd || strategy == Strategy::rbd_no_visual;
}

bool DecodeParams::uses_visual_branch() const {
  return strategy == Strategy::rbd || strategy == Strategy::rbd_no_textual || strategy == Strategy::contrastive;
}

std::vector<double> contrastive_step(const StepLogits& standard, const StepLogits& conditional, double alpha) {
  check_same_size(standard, conditional);
  check_alpha(alpha);
  std::vector<double> mixed(standard.scores.size());
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    mixed[i] = (1.0 - alpha) * standard.scores[i] + alpha * conditional.scores[i];
  }
  return softmax(mixed);
}

std::vector<double> rbd_step(const StepLogits& standard, const StepLogits& visual, const StepLogits& textual,
                             double alpha) {
  check_same_size(standard, visual);
  check_same_size(standard, textual);
  check_alpha(alpha);
  std::vector<double> mixed(standard.scores.size());
  for (std::size_t i = 0; i < mixed.size(); ++i) {
    mixed[i] = (1.0 - alpha) * standard.scores[i] + alpha * (visual.scores[i] - textual.scores[i]);
  }
  return softmax(mixed);
}

TokenId greedy_step(std::span<const double> dist) {
  check_dist(dist);
  std::size_t best = 0;
  for (std::size_t i = 1; i < dist.size(); ++i) {
    if (dist[i] > dist[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

TokenId sample_top_k(std::span<const double> dist, int k, Rng& rng) {
  check_dist(dist);
  if (k < 1) throw DomainError("top-k: k must be >= 1");
  std::vector<std::size_t> kept = ranked(dist);
  kept.resize(std::min(kept.size(), static_cast<std::size_t>(k)));
  return draw(dist, kept, rng);
}

TokenId sample_top_k(std::span<const double> dist, int k, std::uint64_t seed) {
  Rng rng(seed);
  return sample_top_k(dist, k, rng);
}

TokenId sample_top_p(std::span<const double> dist, double p, Rng& rng) {
  check_dist(dist);
  if (!(p > 0.0 && p <= 1.0)) throw DomainError("top-p: p must lie in (0, 1]");
  const std::vector<std::size_t> order = ranked(dist);
  std::vector<std::size_t> kept;
  double mass = 0.0;
  for (std::size_t i : order) {
    kept.push_back(i);
    mass += dist[i];
    if (p < 1.0 && mass >= p) break;
  }
  return draw(dist, kept, rng);
}

TokenId sample_top_p(std::span<const double> dist, double p, std::uint64_t seed) {
  Rng rng(seed);
  return sample_top_p(dist, p, rng);
}

StepScorer::StepScorer(const ToyModel& model, const TokenSequence& prompt, const DecodeParams& params,
                       const TextualBranchConfig& textual, const VisualMask* visual_mask)
    : model_(&model), params_(params) {
  if (params.uses_visual_branch() && visual_mask == nullptr) {
    throw ConfigError("strategy " + to_string(params.strategy) + " needs a visual mask");
  }
  if (params.uses_textual_branch()) {
    textual.validate();
    degraded_ = perturb_textual(project_visual(model, prompt.visual_features()), textual);
  }
  if (params.uses_visual_branch()) {
    if (visual_mask->marks.size() != prompt.img_span().size()) {
      throw ShapeError("generate: visual mask does not match the image span");
    }
    bias_ = ColumnBias{prompt.img_span(), attention_bias(*visual_mask)};
  }
}

std::vector<double> StepScorer::distribution(const TokenSequence& seq, BranchLogitRecord* record) const {
  const StepLogits standard = forward(*model_, seq).logits;
  StepLogits vis = standard;
  StepLogits txt = standard;
  if (params_.uses_visual_branch()) {
    ForwardOptions opts;
    opts.bias = &bias_;
    vis = forward(*model_, seq, opts).logits;
    vis.branch = BranchTag::visual;
  }
  if (params_.uses_textual_branch()) {
    ForwardOptions opts;
    opts.visual_embeddings = &degraded_;
    txt = forward(*model_, seq, opts).logits;
    txt.branch = BranchTag::textual;
  }
  if (record != nullptr) *record = {standard.scores, vis.scores, txt.scores};

  switch (params_.strategy) {
    case Strategy::contrastive: return contrastive_step(standard, vis, params_.alpha);
    case Strategy::rbd:
    case Strategy::rbd_no_textual:
    case Strategy::rbd_no_visual: return rbd_step(standard, vis, txt, params_.alpha);
    default: return softmax(standard.scores);
  }
}

namespace {

GenerationResult run_beam(const StepScorer& scorer, const TokenSequence& prompt, const DecodeParams& params,
                          TokenId eos) {
  struct Hypothesis {
    std::vector<TokenId> tokens;
    double log_prob = 0.0;
    bool finished = false;
    double score() const { return log_prob / static_cast<double>(tokens.size()); }
  };

  std::vector<Hypothesis> alive{Hypothesis{}};
  std::vector<Hypothesis> done;

  for (int step = 0; step < params.max_new_tokens && !alive.empty(); ++step) {
    std::vector<Hypothesis> candidates;
    for (const auto& hyp : alive) {
      TokenSequence seq = prompt;
      for (TokenId t : hyp.tokens) seq.append_response(t);
      const auto dist = scorer.distribution(seq);
      for (std::size_t t = 0; t < dist.size(); ++t) {
        Hypothesis next = hyp;
        next.tokens.push_back(static_cast<TokenId>(t));
        next.log_prob += std::log(dist[t]);
        next.finished = static_cast<TokenId>(t) == eos;
        candidates.push_back(std::move(next));
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hypothesis& a, const Hypothesis& b) { return a.score() > b.score(); });
    candidates.resize(std::min(candidates.size(), static_cast<std::size_t>(params.beam_width)));
    alive.clear();
    for (auto& c : candidates) (c.finished ? done : alive).push_back(std::move(c));
  }

  std::vector<Hypothesis> pool = std::move(done);
  for (auto& a : alive) pool.push_back(std::move(a));
  const auto best = std::max_element(pool.begin(), pool.end(), [](const Hypothesis& a, const Hypothesis& b) {
    return a.score() < b.score();
  });

  GenerationResult result;
  result.normalized_log_prob = best->score();
  result.ended_with_eos = best->finished;
  result.hit_cap = !best->finished;
  result.token_ids = best->tokens;
  if (best->finished) result.token_ids.pop_back();
  return result;
}

}  // namespace

GenerationResult beam_search(const ToyModel& model, const TokenSequence& prompt, const DecodeParams& params) {
  params.validate();
  DecodeParams base = params;
  base.strategy = Strategy::beam;
  const StepScorer scorer(model, prompt, base, TextualBranchConfig{}, nullptr);
  return run_beam(scorer, prompt, base, model.config().eos_token);
}

GenerationResult generate(const ToyModel& model, const TokenSequence& prompt, const DecodeParams& params,
                          const TextualBranchConfig& textual, const VisualMask* visual_mask) {
  params.validate();
  const StepScorer scorer(model, prompt, params, textual, visual_mask);
  const TokenId eos = model.config().eos_token;
  Sampler sampler = params.sampler;
  if (params.strategy == Strategy::greedy) sampler = Sampler::argmax;
  if (params.strategy == Strategy::top_k) sampler = Sampler::top_k;
  if (params.strategy == Strategy::top_p) sampler = Sampler::top_p;
  if (params.strategy == Strategy::beam) sampler = Sampler::beam;
  if (sampler == Sampler::beam) return run_beam(scorer, prompt, params, eos);

  GenerationResult result;
  Rng rng(params.sample_seed);
  TokenSequence seq = prompt;
  for (int step = 0; step < params.max_new_tokens; ++step) {
    BranchLogitRecord record;
    std::vector<double> dist = scorer.distribution(seq, params.record_branch_logits ? &record : nullptr);
    if (params.record_branch_logits) result.branch_logit_log.push_back(std::move(record));
    const TokenId token = select_token(dist, sampler, params, rng);
    if (params.record_distributions) result.per_step_distributions.push_back(std::move(dist));
    if (token == eos) {
      result.ended_with_eos = true;
      return result;
    }
    result.token_ids.push_back(token);
    seq.append_response(token);
  }
  result.hit_cap = true;
  return result;
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::greedy: return "greedy";
    case Strategy::beam: return "beam";
    case Strategy::top_k: return "top_k";
    case Strategy::top_p: return "top_p";
    case Strategy::contrastive: return "contrastive";
    case Strategy::rbd: return "rbd";
    case Strategy::rbd_no_textual: return "rbd_no_textual";
    case Strategy::rbd_no_visual: return "rbd_no_visual";
  }
  return "?";
}

std::string to_string(Sampler s) {
  switch (s) {
    case Sampler::argmax: return "argmax";
    case Sampler::top_k: return "top_k";
    case Sampler::top_p: return "top_p";
    case Sampler::beam: return "beam";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  for (Strategy v : {Strategy::greedy, Strategy::beam, Strategy::top_k, Strategy::top_p, Strategy::contrastive,
                     Strategy::rbd, Strategy::rbd_no_textual, Strategy::rbd_no_visual}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown decode strategy '" + s + "'");
}

Sampler parse_sampler(const std::string& s) {
  for (Sampler v : {Sampler::argmax, Sampler::top_k, Sampler::top_p, Sampler::beam}) {
    if (to_string(v) == s) return v;
  }
  throw ConfigError("unknown sampler '" + s + "' (expected argmax, top_k, top_p or beam)");
}

}  // namespace rbd

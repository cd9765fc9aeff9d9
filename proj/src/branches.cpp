#include "rbd/branches.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rbd {

void TextualBranchConfig::validate() const {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
    throw DomainError("textual.gamma must be a finite value >= 0");
  }
  if (!(delta > 0.0) || !std::isfinite(delta)) throw DomainError("textual.delta must be > 0");
  if (!std::isfinite(mu)) throw DomainError("textual.mu must be finite");
}

Matrix perturb_textual(const Matrix& embeds, const TextualBranchConfig& cfg) {
  cfg.validate();
  Matrix out = embeds;
  switch (cfg.mode) {
    case TextualMode::noise: {
      if (cfg.gamma == 0.0) return out;
      Rng rng(cfg.noise_seed);
      for (double& v : out.flat()) v += cfg.gamma * (cfg.mu + cfg.delta * rng.normal());
      return out;
    }
    case TextualMode::pure_color: {
      if (out.rows() == 0) return out;
      std::vector<double> mean(out.cols(), 0.0);
      for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c = 0; c < out.cols(); ++c) mean[c] += out(r, c);
      }
      for (double& m : mean) m /= static_cast<double>(out.rows());
      for (std::size_t r = 0; r < out.rows(); ++r) std::copy(mean.begin(), mean.end(), out.row(r).begin());
      return out;
    }
    case TextualMode::no_image:
      std::fill(out.flat().begin(), out.flat().end(), 0.0);
      return out;
  }
  return out;
}

ForwardResult textual_branch_forward(const ToyModel& model, const TokenSequence& seq,
                                     const TextualBranchConfig& cfg) {
  const Matrix degraded = perturb_textual(project_visual(model, seq.visual_features()), cfg);
  ForwardOptions opts;
  opts.visual_embeddings = &degraded;
  ForwardResult r = forward(model, seq, opts);
  r.logits.branch = BranchTag::textual;
  return r;
}

ImportanceScores importance_scores(const AttentionTrace& trace, IndexRange img_span, Reduction reduction) {
  if (img_span.empty()) throw DomainError("importance_scores: empty image span");
  const std::size_t n = trace.seq_len();
  if (img_span.end > n) throw DomainError("importance_scores: image span exceeds trace length");

  ImportanceScores out;
  out.reduction = reduction;
  out.n_heads = trace.n_heads();
  if (reduction == Reduction::last_layer) {
    out.layers = {trace.n_layers() - 1};
  } else {
    for (int l = 0; l < trace.n_layers(); ++l) out.layers.push_back(l);
  }
  out.scores.assign(img_span.size(), 0.0);
  const double norm = static_cast<double>(trace.n_heads()) * static_cast<double>(n) *
                      static_cast<double>(out.layers.size());
  for (int l : out.layers) {
    for (int h = 0; h < trace.n_heads(); ++h) {
      const Matrix& a = trace.map(l, h);
      for (std::size_t t = 0; t < img_span.size(); ++t) {
        const std::size_t col = img_span.begin + t;
        double received = 0.0;
        for (std::size_t j = col; j < n; ++j) received += a(j, col);
        out.scores[t] += received;
      }
    }
  }
  for (double& s : out.scores) s /= norm;
  return out;
}

double mark_value(Mark mark) {
  switch (mark) {
    case Mark::amplify: return 1.0;
    case Mark::suppress: return -1.0;
    case Mark::discard: return -std::numeric_limits<double>::infinity();
  }
  return 0.0;
}

VisualMask build_mask(const ImportanceScores& scores, double threshold, MaskMode mode, double beta) {
  VisualMask mask;
  mask.beta = beta;
  mask.threshold = threshold;
  mask.marks.reserve(scores.scores.size());
  for (double s : scores.scores) {
    const bool above = s > threshold;
    switch (mode) {
      case MaskMode::select: mask.marks.push_back(above ? Mark::amplify : Mark::suppress); break;
      case MaskMode::prune: mask.marks.push_back(above ? Mark::amplify : Mark::discard); break;
      case MaskMode::amplify_all: mask.marks.push_back(Mark::amplify); break;
    }
  }
  return mask;
}

double median_threshold(const ImportanceScores& scores) {
  if (scores.scores.empty()) throw DomainError("median_threshold: no scores");
  std::vector<double> v = scores.scores;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::vector<double> attention_bias(const VisualMask& mask) {
  if (!(mask.beta > 0.0) || !std::isfinite(mask.beta)) {
    throw DomainError("attention_bias: beta must be finite and > 0");
  }
  const double log_beta = std::log(mask.beta);
  std::vector<double> bias;
  bias.reserve(mask.marks.size());
  for (Mark m : mask.marks) {
    bias.push_back(m == Mark::discard ? -std::numeric_limits<double>::infinity() : log_beta * mark_value(m));
  }
  return bias;
}

ForwardResult visual_branch_forward(const ToyModel& model, const TokenSequence& seq, const VisualMask& mask) {
  if (mask.marks.size() != seq.img_span().size()) {
    throw ShapeError("visual_branch_forward: mask has " + std::to_string(mask.marks.size()) +
                     " marks for " + std::to_string(seq.img_span().size()) + " visual tokens");
  }
  const ColumnBias bias{seq.img_span(), attention_bias(mask)};
  ForwardOptions opts;
  opts.bias = &bias;
  ForwardResult r = forward(model, seq, opts);
  r.logits.branch = BranchTag::visual;
  return r;
}

void VisualBranchConfig::validate() const {
  if (!(beta > 0.0) || !std::isfinite(beta)) throw DomainError("visual.beta must be finite and > 0");
  if (threshold_rule == ThresholdRule::fixed && !std::isfinite(threshold_value)) {
    throw DomainError("visual.threshold_value must be finite");
  }
}

VisualMask prepare_visual_mask(const ToyModel& model, const TokenSequence& prompt, const VisualBranchConfig& cfg) {
  cfg.validate();
  const ForwardResult base = forward(model, prompt);
  const ImportanceScores scores = importance_scores(base.trace, prompt.img_span(), cfg.reduction);
  double threshold = cfg.threshold_value;
  if (cfg.threshold_rule == ThresholdRule::median) {
    threshold = median_threshold(scores);
  } else if (cfg.threshold_rule == ThresholdRule::mean) {
    double total = 0.0;
    for (double s : scores.scores) total += s;
    threshold = total / static_cast<double>(scores.scores.size());
  }
  return build_mask(scores, threshold, cfg.mode, cfg.beta);
}

std::string to_string(TextualMode mode) {
  switch (mode) {
    case TextualMode::noise: return "noise";
    case TextualMode::pure_color: return "pure_color";
    case TextualMode::no_image: return "no_image";
  }
  return "?";
}

std::string to_string(MaskMode mode) {
  switch (mode) {
    case MaskMode::select: return "select";
    case MaskMode::prune: return "prune";
    case MaskMode::amplify_all: return "amplify_all";
  }
  return "?";
}

std::string to_string(Reduction reduction) {
  return reduction == Reduction::last_layer ? "last_layer" : "mean_all_layers";
}

std::string to_string(ThresholdRule rule) {
  switch (rule) {
    case ThresholdRule::median: return "median";
    case ThresholdRule::mean: return "mean";
    case ThresholdRule::fixed: return "fixed";
  }
  return "?";
}

TextualMode parse_textual_mode(const std::string& s) {
  if (s == "noise") return TextualMode::noise;
  if (s == "pure_color") return TextualMode::pure_color;
  if (s == "no_image") return TextualMode::no_image;
  throw ConfigError("unknown textual mode '" + s + "' (expected noise, pure_color or no_image)");
}

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "select") return MaskMode::select;
  if (s == "prune") return MaskMode::prune;
  if (s == "amplify_all") return MaskMode::amplify_all;
  throw ConfigError("unknown visual mode '" + s + "' (expected select, prune or amplify_all)");
}

Reduction parse_reduction(const std::string& s) {
  if (s == "mean_all_layers") return Reduction::mean_all_layers;
  if (s == "last_layer") return Reduction::last_layer;
  throw ConfigError("unknown reduction '" + s + "' (expected mean_all_layers or last_layer)");
}

ThresholdRule parse_threshold_rule(const std::string& s) {
  if (s == "median") return ThresholdRule::median;
  if (s == "mean") return ThresholdRule::mean;
  if (s == "fixed") return ThresholdRule::fixed;
  throw ConfigError("unknown threshold rule '" + s + "' (expected median, mean or fixed)");
}

}  // namespace rbd

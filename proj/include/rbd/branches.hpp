#pragma once

// The two auxiliary branches of re-balancing contrastive decoding.
//
// Textual branch: degrade the visual prefix (additive Gaussian noise, a flat
// "pure colour" image, or no image at all) so the next-token scores expose what
// the language prior alone would predict.
//
// Visual branch: rank visual tokens by the attention they receive, mark each as
// amplified (+1), suppressed (-1) or discarded (-inf), and add log(beta) * mark
// to the image columns of every attention map before the softmax.

#include <cstdint>
#include <string>
#include <vector>

#include "rbd/model.hpp"

namespace rbd {

enum class TextualMode { noise, pure_color, no_image };

struct TextualBranchConfig {
  TextualMode mode = TextualMode::noise;
  double gamma = 0.8;
  double mu = 0.0;
  double delta = 1.0;
  std::uint64_t noise_seed = 0;

  void validate() const;
};

Matrix perturb_textual(const Matrix& embeds, const TextualBranchConfig& cfg);

ForwardResult textual_branch_forward(const ToyModel& model, const TokenSequence& seq,
                                     const TextualBranchConfig& cfg);

enum class Reduction { mean_all_layers, last_layer };

struct ImportanceScores {
  std::vector<double> scores;  // one per visual token
  Reduction reduction = Reduction::mean_all_layers;
  std::vector<int> layers;     // layers that were averaged
  int n_heads = 0;
};

// Attention received by each visual token: (1 / (N_h n)) sum_h sum_j A_h(j, i),
// then averaged over the layers selected by `reduction`.
ImportanceScores importance_scores(const AttentionTrace& trace, IndexRange img_span,
                                   Reduction reduction = Reduction::mean_all_layers);

enum class Mark { amplify, suppress, discard };
double mark_value(Mark mark);  // +1, -1, -inf

enum class MaskMode { select, prune, amplify_all };

struct VisualMask {
  std::vector<Mark> marks;
  double beta = 2.0;
  double threshold = 0.0;
};

VisualMask build_mask(const ImportanceScores& scores, double threshold, MaskMode mode,
                      double beta = 2.0);

// Median of the scores; marks the upper half when used with `select`.
double median_threshold(const ImportanceScores& scores);

// bias_i = log(beta) * m_i, or -inf for a discarded token.
std::vector<double> attention_bias(const VisualMask& mask);

ForwardResult visual_branch_forward(const ToyModel& model, const TokenSequence& seq,
                                    const VisualMask& mask);

enum class ThresholdRule { median, mean, fixed };

struct VisualBranchConfig {
  MaskMode mode = MaskMode::select;
  double beta = 2.0;
  ThresholdRule threshold_rule = ThresholdRule::median;
  double threshold_value = 0.0;  // used by ThresholdRule::fixed
  Reduction reduction = Reduction::mean_all_layers;

  void validate() const;
};

// Scores from one unbiased pass over the prompt, thresholded into a mask that is
// then held fixed for the whole generation.
VisualMask prepare_visual_mask(const ToyModel& model, const TokenSequence& prompt,
                               const VisualBranchConfig& cfg);

std::string to_string(TextualMode mode);
std::string to_string(MaskMode mode);
std::string to_string(Reduction reduction);
std::string to_string(ThresholdRule rule);
TextualMode parse_textual_mode(const std::string& s);
MaskMode parse_mask_mode(const std::string& s);
Reduction parse_reduction(const std::string& s);
ThresholdRule parse_threshold_rule(const std::string& s);

}  // namespace rbd

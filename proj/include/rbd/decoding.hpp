#pragma once

// Step-level logit combination rules and the generation loop.
//
//   contrastive:  softmax((1 - a) * std + a * cond)
//   rbd:          softmax((1 - a) * std + a * (vis - txt))
//
// The ablations drop one auxiliary branch by substituting the standard logits
// for it, so its term cancels (rbd_no_visual) or folds into std (rbd_no_textual).

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rbd/branches.hpp"
#include "rbd/model.hpp"

namespace rbd {

enum class Strategy { greedy, beam, top_k, top_p, contrastive, rbd, rbd_no_textual, rbd_no_visual };

// Token selection rule applied to the combined distribution of the
// contrastive and rbd strategies. `beam` searches over that distribution.
enum class Sampler { argmax, top_k, top_p, beam };

struct DecodeParams {
  Strategy strategy = Strategy::greedy;
  double alpha = 0.6;
  int beam_width = 2;
  int k = 10;
  double p = 0.9;
  Sampler sampler = Sampler::argmax;
  std::uint64_t sample_seed = 0;
  int max_new_tokens = 32;
  bool record_distributions = false;
  bool record_branch_logits = false;

  void validate() const;
  bool uses_textual_branch() const;
  bool uses_visual_branch() const;
};

struct BranchLogitRecord {
  std::vector<double> standard;
  std::vector<double> visual;
  std::vector<double> textual;
};

struct GenerationResult {
  std::vector<TokenId> token_ids;  // excludes the terminating EOS
  std::vector<std::vector<double>> per_step_distributions;
  std::vector<BranchLogitRecord> branch_logit_log;
  bool ended_with_eos = false;
  bool hit_cap = false;
  double normalized_log_prob = 0.0;  // filled by beam search
};

std::vector<double> contrastive_step(const StepLogits& standard, const StepLogits& conditional, double alpha);
std::vector<double> rbd_step(const StepLogits& standard, const StepLogits& visual, const StepLogits& textual,
                             double alpha);

// Arg-max with ties going to the lowest index.
TokenId greedy_step(std::span<const double> dist);

TokenId sample_top_k(std::span<const double> dist, int k, Rng& rng);
TokenId sample_top_k(std::span<const double> dist, int k, std::uint64_t seed);
TokenId sample_top_p(std::span<const double> dist, double p, Rng& rng);
TokenId sample_top_p(std::span<const double> dist, double p, std::uint64_t seed);

// Length-normalized log-probability beam search over the base model.
GenerationResult beam_search(const ToyModel& model, const TokenSequence& prompt, const DecodeParams& params);

// Combined next-token distribution of `params.strategy` for one sequence.
// Branch inputs (degraded image, mask bias) are fixed at construction.
class StepScorer {
 public:
  StepScorer(const ToyModel& model, const TokenSequence& prompt, const DecodeParams& params,
             const TextualBranchConfig& textual, const VisualMask* visual_mask);

  std::vector<double> distribution(const TokenSequence& seq, BranchLogitRecord* record = nullptr) const;

 private:
  const ToyModel* model_;
  DecodeParams params_;
  Matrix degraded_;
  ColumnBias bias_;
};

// `visual_mask` may be null when the strategy does not use the visual branch.
// Strategy beam, or sampler beam, runs beam search over the combined
// distribution.
GenerationResult generate(const ToyModel& model, const TokenSequence& prompt, const DecodeParams& params,
                          const TextualBranchConfig& textual, const VisualMask* visual_mask);

std::string to_string(Strategy s);
std::string to_string(Sampler s);
Strategy parse_strategy(const std::string& s);
Sampler parse_sampler(const std::string& s);

}  // namespace rbd

#pragma once

// Per-layer decomposition of one row of attention into the share paid to the
// system, image, instruction and response spans.

#include <array>
#include <ostream>
#include <vector>

#include "rbd/decoding.hpp"
#include "rbd/model.hpp"

namespace rbd {

struct AttentionShares {
  int layer = 0;
  std::size_t row = 0;
  // sys, img, ins, res
  std::array<double, 4> shares{};

  double sys() const { return shares[0]; }
  double img() const { return shares[1]; }
  double ins() const { return shares[2]; }
  double res() const { return shares[3]; }
};

// Head-averaged attention that `row` pays to each span at `layer`.
AttentionShares type_shares(const AttentionTrace& trace, const TokenSequence& seq, int layer, std::size_t row);

enum class RowRule { tenth_generated, last };

struct ProfileOptions {
  RowRule row_rule = RowRule::tenth_generated;
  int generated_tokens = 10;  // greedy continuation length per probe
  const VisualMask* mask = nullptr;  // optional bias for the traced pass
};

struct AttentionProfile {
  std::vector<AttentionShares> mean_by_layer;
  std::size_t used = 0;
  std::size_t skipped = 0;
  std::vector<std::string> warnings;
};

// Greedy-continues every probe, traces the full sequence, and averages the
// per-layer shares of the selected row over the probes that qualify.
AttentionProfile corpus_attention_profile(const ToyModel& model, const std::vector<TokenSequence>& probes,
                                          const ProfileOptions& options = {});

// Columns: layer,sys,img,ins,res
void write_profile_csv(std::ostream& out, const AttentionProfile& profile);

std::string to_string(RowRule rule);
RowRule parse_row_rule(const std::string& s);

}  // namespace rbd

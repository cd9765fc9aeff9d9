#include "rbd/attention_analysis.hpp"

#include <iomanip>

namespace rbd {

AttentionShares type_shares(const AttentionTrace& trace, const TokenSequence& seq, int layer, std::size_t row) {
  if (row >= trace.seq_len()) {
    throw DomainError("type_shares: row " + std::to_string(row) + " beyond sequence length " +
                      std::to_string(trace.seq_len()));
  }
  if (layer < 0 || layer >= trace.n_layers()) throw DomainError("type_shares: layer out of range");
  if (seq.length() != trace.seq_len()) throw ShapeError("type_shares: sequence and trace lengths differ");

  AttentionShares out;
  out.layer = layer;
  out.row = row;
  const std::array<IndexRange, 4> spans{seq.sys_span(), seq.img_span(), seq.ins_span(), seq.res_span()};
  for (int h = 0; h < trace.n_heads(); ++h) {
    const Matrix& a = trace.map(layer, h);
    for (std::size_t s = 0; s < spans.size(); ++s) {
      for (std::size_t j = spans[s].begin; j < spans[s].end && j <= row; ++j) out.shares[s] += a(row, j);
    }
  }
  for (double& v : out.shares) v /= static_cast<double>(trace.n_heads());
  return out;
}

AttentionProfile corpus_attention_profile(const ToyModel& model, const std::vector<TokenSequence>& probes,
                                          const ProfileOptions& options) {
  if (probes.empty()) throw DomainError("corpus_attention_profile: empty probe set");
  const int n_layers = model.config().n_layers;

  AttentionProfile profile;
  profile.mean_by_layer.resize(static_cast<std::size_t>(n_layers));
  for (int l = 0; l < n_layers; ++l) profile.mean_by_layer[static_cast<std::size_t>(l)].layer = l;

  DecodeParams greedy;
  greedy.strategy = Strategy::greedy;

  for (std::size_t p = 0; p < probes.size(); ++p) {
    const TokenSequence& prompt = probes[p];
    const std::size_t room = static_cast<std::size_t>(model.config().max_seq_len) - prompt.length();
    greedy.max_new_tokens =
        static_cast<int>(std::min<std::size_t>(room, static_cast<std::size_t>(std::max(1, options.generated_tokens))));
    TokenSequence seq = prompt;
    if (greedy.max_new_tokens > 0) {
      const GenerationResult gen = generate(model, prompt, greedy, TextualBranchConfig{}, nullptr);
      for (TokenId t : gen.token_ids) seq.append_response(t);
    }

    std::size_t row = seq.length() - 1;
    if (options.row_rule == RowRule::tenth_generated) {
      if (seq.res_span().size() < 10) {
        ++profile.skipped;
        profile.warnings.push_back("probe " + std::to_string(p) + " generated " +
                                   std::to_string(seq.res_span().size()) + " tokens (< 10); skipped");
        continue;
      }
      row = seq.res_span().begin + 9;
    }

    ForwardOptions opts;
    ColumnBias bias;
    if (options.mask != nullptr) {
      bias = ColumnBias{seq.img_span(), attention_bias(*options.mask)};
      opts.bias = &bias;
    }
    const ForwardResult traced = forward(model, seq, opts);
    for (int l = 0; l < n_layers; ++l) {
      const AttentionShares s = type_shares(traced.trace, seq, l, row);
      auto& acc = profile.mean_by_layer[static_cast<std::size_t>(l)];
      for (std::size_t k = 0; k < 4; ++k) acc.shares[k] += s.shares[k];
      acc.row = row;
    }
    ++profile.used;
  }

  if (profile.used > 0) {
    for (auto& layer : profile.mean_by_layer) {
      for (double& v : layer.shares) v /= static_cast<double>(profile.used);
    }
  }
  return profile;
}

void write_profile_csv(std::ostream& out, const AttentionProfile& profile) {
  out << "layer,sys,img,ins,res\n";
  out << std::setprecision(17);
  for (const auto& l : profile.mean_by_layer) {
    out << l.layer << ',' << l.sys() << ',' << l.img() << ',' << l.ins() << ',' << l.res() << '\n';
  }
}

std::string to_string(RowRule rule) { return rule == RowRule::last ? "last" : "tenth_generated"; }

RowRule parse_row_rule(const std::string& s) {
  if (s == "tenth_generated") return RowRule::tenth_generated;
  if (s == "last") return RowRule::last;
  throw ConfigError("unknown row rule '" + s + "' (expected tenth_generated or last)");
}

}  // namespace rbd

#pragma once

// A small seeded decoder-only transformer that takes a projected visual prefix
// plus text tokens. It exposes every attention map and accepts an additive
// pre-softmax bias on the image columns, which is all the contrastive decoders
// need from a vision-language model.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rbd/tensor.hpp"

namespace rbd {

using TokenId = std::int32_t;

struct ModelConfig {
  int d_model = 8;
  int n_heads = 2;
  int n_layers = 2;
  int vocab_size = 32;
  int n_visual_tokens = 4;
  int max_seq_len = 64;
  int feature_dim = 4;
  int d_ff = 16;
  TokenId eos_token = 0;
  std::uint64_t seed = 7;
  double init_std = 0.02;

  // Throws ConfigError naming the first violated constraint.
  void validate() const;
  int head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return end == begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const IndexRange&) const = default;
};

enum class SpanKind { sys, img, ins, res };

// One inference context laid out as sys | img | ins | res. Spans are derived
// from the segment lengths, so they are always disjoint, ordered and covering.
class TokenSequence {
 public:
  TokenSequence() = default;
  TokenSequence(std::vector<TokenId> sys, Matrix visual_features, std::vector<TokenId> ins,
                std::vector<TokenId> res = {});

  IndexRange span(SpanKind kind) const;
  IndexRange sys_span() const { return span(SpanKind::sys); }
  IndexRange img_span() const { return span(SpanKind::img); }
  IndexRange ins_span() const { return span(SpanKind::ins); }
  IndexRange res_span() const { return span(SpanKind::res); }
  std::size_t length() const;

  // Token id at a text position; nullopt inside the image span.
  std::optional<TokenId> token_at(std::size_t pos) const;

  const std::vector<TokenId>& sys_tokens() const { return sys_; }
  const std::vector<TokenId>& ins_tokens() const { return ins_; }
  const std::vector<TokenId>& res_tokens() const { return res_; }
  const Matrix& visual_features() const { return visual_features_; }

  void append_response(TokenId token) { res_.push_back(token); }

 private:
  std::vector<TokenId> sys_;
  Matrix visual_features_;
  std::vector<TokenId> ins_;
  std::vector<TokenId> res_;
};

struct LayerWeights {
  std::vector<double> ln1_gain, ln1_bias;
  Matrix w_q, w_k, w_v, w_o;  // d_model x d_model
  std::vector<double> b_q, b_k, b_v, b_o;
  std::vector<double> ln2_gain, ln2_bias;
  Matrix w_fc;    // d_model x d_ff
  Matrix w_down;  // d_ff x d_model
  std::vector<double> b_fc, b_down;
};

struct ModelWeights {
  Matrix token_embedding;     // vocab x d_model
  Matrix position_embedding;  // max_seq_len x d_model
  Matrix projector;           // feature_dim x d_model
  std::vector<double> projector_bias;
  std::vector<LayerWeights> layers;
  std::vector<double> lnf_gain, lnf_bias;
  Matrix head;  // d_model x vocab
  std::vector<double> head_bias;

  // Normal(0, init_std) matrices drawn from config.seed in a fixed order; unit
  // norm gains; zero biases.
  static ModelWeights seeded(const ModelConfig& config);
  // Every parameter zero, norm gains one.
  static ModelWeights zeros(const ModelConfig& config);
};

class ToyModel {
 public:
  // Validates the config and every weight shape.
  ToyModel(ModelConfig config, ModelWeights weights);

  const ModelConfig& config() const { return config_; }
  const ModelWeights& weights() const { return weights_; }

 private:
  ModelConfig config_;
  ModelWeights weights_;
};

ToyModel build_model(const ModelConfig& config);

enum class BranchTag { standard, textual, visual };
std::string to_string(BranchTag tag);

struct StepLogits {
  std::vector<double> scores;
  BranchTag branch = BranchTag::standard;
};

class AttentionTrace {
 public:
  AttentionTrace() = default;
  AttentionTrace(int n_layers, int n_heads, std::size_t seq_len);

  int n_layers() const { return n_layers_; }
  int n_heads() const { return n_heads_; }
  std::size_t seq_len() const { return seq_len_; }

  Matrix& map(int layer, int head) { return maps_[static_cast<std::size_t>(layer * n_heads_ + head)]; }
  const Matrix& map(int layer, int head) const {
    return maps_[static_cast<std::size_t>(layer * n_heads_ + head)];
  }

 private:
  int n_layers_ = 0;
  int n_heads_ = 0;
  std::size_t seq_len_ = 0;
  std::vector<Matrix> maps_;
};

// Additive pre-softmax bias on a contiguous run of key columns, applied to
// every row, head and layer.
struct ColumnBias {
  IndexRange columns;
  std::vector<double> values;
};

struct ForwardOptions {
  const ColumnBias* bias = nullptr;
  // Already-projected visual embeddings to use instead of projecting the
  // sequence's raw features (the textual branch perturbs in this space).
  const Matrix* visual_embeddings = nullptr;
};

struct ForwardResult {
  StepLogits logits;  // next-token scores at the final position
  AttentionTrace trace;
};

Matrix project_visual(const ToyModel& model, const Matrix& features);

ForwardResult forward(const ToyModel& model, const TokenSequence& seq,
                      const ForwardOptions& options = {});

}  // namespace rbd

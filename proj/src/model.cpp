#include "rbd/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace rbd {
namespace {

constexpr double kLayerNormEps = 1e-5;

Matrix normal_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std_dev) {
  Matrix m(rows, cols);
  for (double& v : m.flat()) v = std_dev * rng.normal();
  return m;
}

void require_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    throw ShapeError(std::string("weight '") + name + "' has shape " + std::to_string(m.rows()) +
                     "x" + std::to_string(m.cols()) + ", expected " + std::to_string(rows) + "x" +
                     std::to_string(cols));
  }
}

void require_len(const std::vector<double>& v, std::size_t n, const char* name) {
  if (v.size() != n) {
    throw ShapeError(std::string("weight '") + name + "' has length " + std::to_string(v.size()) +
                     ", expected " + std::to_string(n));
  }
}

Matrix layer_norm_rows(const Matrix& x, const std::vector<double>& gain,
                       const std::vector<double>& bias) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) layer_norm(x.row(i), gain, bias, kLayerNormEps, out.row(i));
  return out;
}

Matrix affine(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix out = matmul(x, w);
  add_row_vector(out, b);
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v <= 0) throw ConfigError(std::string("model.") + name + " must be positive, got " + std::to_string(v));
  };
  positive(d_model, "d_model");
  positive(n_heads, "n_heads");
  positive(n_layers, "n_layers");
  positive(vocab_size, "vocab_size");
  positive(n_visual_tokens, "n_visual_tokens");
  positive(max_seq_len, "max_seq_len");
  positive(feature_dim, "feature_dim");
  positive(d_ff, "d_ff");
  if (d_model % n_heads != 0) {
    throw ConfigError("model.d_model (" + std::to_string(d_model) + ") is not divisible by model.n_heads (" +
                      std::to_string(n_heads) + ")");
  }
  if (n_visual_tokens >= max_seq_len) {
    throw ConfigError("model.n_visual_tokens must leave room for text within model.max_seq_len");
  }
  if (eos_token < 0 || eos_token >= vocab_size) {
    throw ConfigError("model.eos_token is outside the vocabulary");
  }
  if (!(init_std >= 0.0) || !std::isfinite(init_std)) {
    throw ConfigError("model.init_std must be finite and non-negative");
  }
}

TokenSequence::TokenSequence(std::vector<TokenId> sys, Matrix visual_features,
                             std::vector<TokenId> ins, std::vector<TokenId> res)
    : sys_(std::move(sys)),
      visual_features_(std::move(visual_features)),
      ins_(std::move(ins)),
      res_(std::move(res)) {}

IndexRange TokenSequence::span(SpanKind kind) const {
  const std::size_t a = sys_.size();
  const std::size_t b = a + visual_features_.rows();
  const std::size_t c = b + ins_.size();
  const std::size_t d = c + res_.size();
  switch (kind) {
    case SpanKind::sys: return {0, a};
    case SpanKind::img: return {a, b};
    case SpanKind::ins: return {b, c};
    case SpanKind::res: return {c, d};
  }
  return {};
}

std::size_t TokenSequence::length() const {
  return sys_.size() + visual_features_.rows() + ins_.size() + res_.size();
}

std::optional<TokenId> TokenSequence::token_at(std::size_t pos) const {
  if (pos < sys_.size()) return sys_[pos];
  pos -= sys_.size();
  if (pos < visual_features_.rows()) return std::nullopt;
  pos -= visual_features_.rows();
  if (pos < ins_.size()) return ins_[pos];
  pos -= ins_.size();
  if (pos < res_.size()) return res_[pos];
  throw DomainError("token_at: position beyond sequence length");
}

ModelWeights ModelWeights::seeded(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const double s = config.init_std;
  Rng rng(config.seed);

  ModelWeights w = zeros(config);
  w.token_embedding = normal_matrix(rng, static_cast<std::size_t>(config.vocab_size), d, s);
  w.position_embedding = normal_matrix(rng, static_cast<std::size_t>(config.max_seq_len), d, s);
  w.projector = normal_matrix(rng, static_cast<std::size_t>(config.feature_dim), d, s);
  for (auto& layer : w.layers) {
    layer.w_q = normal_matrix(rng, d, d, s);
    layer.w_k = normal_matrix(rng, d, d, s);
    layer.w_v = normal_matrix(rng, d, d, s);
    layer.w_o = normal_matrix(rng, d, d, s);
    layer.w_fc = normal_matrix(rng, d, ff, s);
    layer.w_down = normal_matrix(rng, ff, d, s);
  }
  w.head = normal_matrix(rng, d, static_cast<std::size_t>(config.vocab_size), s);
  return w;
}

ModelWeights ModelWeights::zeros(const ModelConfig& config) {
  config.validate();
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ff = static_cast<std::size_t>(config.d_ff);
  const auto vocab = static_cast<std::size_t>(config.vocab_size);

  ModelWeights w;
  w.token_embedding = Matrix(vocab, d);
  w.position_embedding = Matrix(static_cast<std::size_t>(config.max_seq_len), d);
  w.projector = Matrix(static_cast<std::size_t>(config.feature_dim), d);
  w.projector_bias.assign(d, 0.0);
  w.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& layer : w.layers) {
    layer.ln1_gain.assign(d, 1.0);
    layer.ln1_bias.assign(d, 0.0);
    layer.w_q = layer.w_k = layer.w_v = layer.w_o = Matrix(d, d);
    layer.b_q.assign(d, 0.0);
    layer.b_k.assign(d, 0.0);
    layer.b_v.assign(d, 0.0);
    layer.b_o.assign(d, 0.0);
    layer.ln2_gain.assign(d, 1.0);
    layer.ln2_bias.assign(d, 0.0);
    layer.w_fc = Matrix(d, ff);
    layer.b_fc.assign(ff, 0.0);
    layer.w_down = Matrix(ff, d);
    layer.b_down.assign(d, 0.0);
  }
  w.lnf_gain.assign(d, 1.0);
  w.lnf_bias.assign(d, 0.0);
  w.head = Matrix(d, vocab);
  w.head_bias.assign(vocab, 0.0);
  return w;
}

ToyModel::ToyModel(ModelConfig config, ModelWeights weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto ff = static_cast<std::size_t>(config_.d_ff);
  const auto vocab = static_cast<std::size_t>(config_.vocab_size);
  require_shape(weights_.token_embedding, vocab, d, "token_embedding");
  require_shape(weights_.position_embedding, static_cast<std::size_t>(config_.max_seq_len), d,
                "position_embedding");
  require_shape(weights_.projector, static_cast<std::size_t>(config_.feature_dim), d, "projector");
  require_len(weights_.projector_bias, d, "projector_bias");
  if (weights_.layers.size() != static_cast<std::size_t>(config_.n_layers)) {
    throw ShapeError("layer count does not match model.n_layers");
  }
  for (const auto& l : weights_.layers) {
    require_len(l.ln1_gain, d, "ln1_gain");
    require_len(l.ln1_bias, d, "ln1_bias");
    require_shape(l.w_q, d, d, "w_q");
    require_shape(l.w_k, d, d, "w_k");
    require_shape(l.w_v, d, d, "w_v");
    require_shape(l.w_o, d, d, "w_o");
    require_len(l.b_q, d, "b_q");
    require_len(l.b_k, d, "b_k");
    require_len(l.b_v, d, "b_v");
    require_len(l.b_o, d, "b_o");
    require_len(l.ln2_gain, d, "ln2_gain");
    require_len(l.ln2_bias, d, "ln2_bias");
    require_shape(l.w_fc, d, ff, "w_fc");
    require_len(l.b_fc, ff, "b_fc");
    require_shape(l.w_down, ff, d, "w_down");
    require_len(l.b_down, d, "b_down");
  }
  require_len(weights_.lnf_gain, d, "lnf_gain");
  require_len(weights_.lnf_bias, d, "lnf_bias");
  require_shape(weights_.head, d, vocab, "head");
  require_len(weights_.head_bias, vocab, "head_bias");
}

ToyModel build_model(const ModelConfig& config) {
  return ToyModel(config, ModelWeights::seeded(config));
}

std::string to_string(BranchTag tag) {
  switch (tag) {
    case BranchTag::standard: return "standard";
    case BranchTag::textual: return "textual";
    case BranchTag::visual: return "visual";
  }
  return "unknown";
}

AttentionTrace::AttentionTrace(int n_layers, int n_heads, std::size_t seq_len)
    : n_layers_(n_layers), n_heads_(n_heads), seq_len_(seq_len) {
  maps_.assign(static_cast<std::size_t>(n_layers * n_heads), Matrix(seq_len, seq_len));
}

Matrix project_visual(const ToyModel& model, const Matrix& features) {
  const auto& cfg = model.config();
  if (features.rows() != static_cast<std::size_t>(cfg.n_visual_tokens)) {
    throw ShapeError("project_visual: expected " + std::to_string(cfg.n_visual_tokens) +
                     " feature rows, got " + std::to_string(features.rows()));
  }
  if (features.cols() != static_cast<std::size_t>(cfg.feature_dim)) {
    throw ShapeError("project_visual: expected feature width " + std::to_string(cfg.feature_dim) +
                     ", got " + std::to_string(features.cols()));
  }
  return affine(features, model.weights().projector, model.weights().projector_bias);
}

ForwardResult forward(const ToyModel& model, const TokenSequence& seq, const ForwardOptions& options) {
  const auto& cfg = model.config();
  const auto& w = model.weights();
  const std::size_t n = seq.length();
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto n_heads = static_cast<std::size_t>(cfg.n_heads);
  const auto dh = static_cast<std::size_t>(cfg.head_dim());

  if (n == 0) throw DomainError("forward: empty sequence");
  if (n > static_cast<std::size_t>(cfg.max_seq_len)) {
    throw CapacityError("forward: sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  }
  const IndexRange img = seq.img_span();
  if (img.size() != static_cast<std::size_t>(cfg.n_visual_tokens)) {
    throw ShapeError("forward: image span holds " + std::to_string(img.size()) + " tokens, model expects " +
                     std::to_string(cfg.n_visual_tokens));
  }
  if (options.bias != nullptr) {
    if (options.bias->columns != img) {
      throw DomainError("forward: attention bias must address exactly the image columns");
    }
    if (options.bias->values.size() != img.size()) {
      throw ShapeError("forward: attention bias length differs from image span");
    }
    for (double v : options.bias->values) {
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity()) {
        throw DomainError("forward: attention bias entries must be finite or -inf");
      }
    }
  }

  Matrix visual;
  if (options.visual_embeddings != nullptr) {
    visual = *options.visual_embeddings;
    if (visual.rows() != img.size() || visual.cols() != d) {
      throw ShapeError("forward: visual embedding override has the wrong shape");
    }
  } else {
    visual = project_visual(model, seq.visual_features());
  }

  Matrix x(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = x.row(i);
    auto pos = w.position_embedding.row(i);
    if (img.contains(i)) {
      auto src = visual.row(i - img.begin);
      for (std::size_t c = 0; c < d; ++c) dst[c] = src[c] + pos[c];
    } else {
      const TokenId tok = *seq.token_at(i);
      if (tok < 0 || tok >= cfg.vocab_size) {
        throw DomainError("forward: token id " + std::to_string(tok) + " outside vocabulary");
      }
      auto src = w.token_embedding.row(static_cast<std::size_t>(tok));
      for (std::size_t c = 0; c < d; ++c) dst[c] = src[c] + pos[c];
    }
  }

  ForwardResult result;
  result.trace = AttentionTrace(cfg.n_layers, cfg.n_heads, n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> scores;

  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& lw = w.layers[l];
    const Matrix h = layer_norm_rows(x, lw.ln1_gain, lw.ln1_bias);
    const Matrix q = affine(h, lw.w_q, lw.b_q);
    const Matrix k = affine(h, lw.w_k, lw.b_k);
    const Matrix v = affine(h, lw.w_v, lw.b_v);
    Matrix ctx(n, d);

    for (std::size_t hd = 0; hd < n_heads; ++hd) {
      Matrix& attn = result.trace.map(static_cast<int>(l), static_cast<int>(hd));
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < n; ++i) {
        scores.assign(i + 1, 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += q(i, off + c) * k(j, off + c);
          double s = dot * scale;
          if (options.bias != nullptr && img.contains(j)) s += options.bias->values[j - img.begin];
          scores[j] = s;
        }
        if (*std::max_element(scores.begin(), scores.end()) == -std::numeric_limits<double>::infinity()) {
          throw DomainError("forward: the attention bias discards every position row " + std::to_string(i) +
                            " may attend to");
        }
        const std::vector<double> p = softmax(scores);
        for (std::size_t j = 0; j <= i; ++j) {
          attn(i, j) = p[j];
          if (p[j] == 0.0) continue;
          for (std::size_t c = 0; c < dh; ++c) ctx(i, off + c) += p[j] * v(j, off + c);
        }
      }
    }

    const Matrix attn_out = affine(ctx, lw.w_o, lw.b_o);
    for (std::size_t i = 0; i < n; ++i) {
      auto xr = x.row(i);
      auto ar = attn_out.row(i);
      for (std::size_t c = 0; c < d; ++c) xr[c] += ar[c];
    }

    const Matrix h2 = layer_norm_rows(x, lw.ln2_gain, lw.ln2_bias);
    Matrix hidden = affine(h2, lw.w_fc, lw.b_fc);
    for (double& val : hidden.flat()) val = std::max(val, 0.0);
    const Matrix mlp_out = affine(hidden, lw.w_down, lw.b_down);
    for (std::size_t i = 0; i < n; ++i) {
      auto xr = x.row(i);
      auto mr = mlp_out.row(i);
      for (std::size_t c = 0; c < d; ++c) xr[c] += mr[c];
    }
  }

  std::vector<double> last(d);
  layer_norm(x.row(n - 1), w.lnf_gain, w.lnf_bias, kLayerNormEps, last);
  const auto vocab = static_cast<std::size_t>(cfg.vocab_size);
  result.logits.scores = w.head_bias;
  for (std::size_t c = 0; c < d; ++c) {
    if (last[c] == 0.0) continue;
    auto hr = w.head.row(c);
    for (std::size_t t = 0; t < vocab; ++t) result.logits.scores[t] += last[c] * hr[t];
  }
  result.logits.branch = BranchTag::standard;
  return result;
}

}  // namespace rbd

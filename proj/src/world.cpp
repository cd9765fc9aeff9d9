#include "rbd/world.hpp"

#include <cmath>
#include <set>

namespace rbd {
namespace {

// Residual-stream layout of the planted circuit.
struct Layout {
  int n = 0;  // objects
  int c = 0;  // contexts

  int obj_q(int o) const { return o; }
  int vis_obj(int o) const { return n + o; }
  int qobj(int o) const { return 2 * n + o; }
  int att_obj(int o) const { return 3 * n + o; }
  int mention(int o) const { return 4 * n + o; }
  int cap_obj(int o) const { return 5 * n + o; }
  int ctx(int k) const { return 6 * n + k; }
  int att_ctx(int k) const { return 6 * n + c + k; }
  int cap_ctx(int k) const { return 6 * n + 2 * c + k; }
  int flag(int i) const { return 6 * n + 3 * c + i; }

  int sysf() const { return flag(0); }
  int visf() const { return flag(1); }
  int bgf() const { return flag(2); }
  int ctxf() const { return flag(3); }
  int askf() const { return flag(4); }
  int descf() const { return flag(5); }
  int tobjf() const { return flag(6); }
  int mode_q() const { return flag(7); }
  int mode_c() const { return flag(8); }
  int seen() const { return flag(9); }
  int yes_evid() const { return flag(10); }
  int no_evid() const { return flag(11); }
  int yesf() const { return flag(12); }
  int nof() const { return flag(13); }
  int eosf() const { return flag(14); }
  // Never written, so after layer norm it holds exactly the mean offset.
  int ref() const { return flag(15); }
  int used() const { return flag(16); }
};

int round_up(int v, int m) { return (v + m - 1) / m * m; }

// Normalized magnitude of each component of a token carrying two unit flags.
const double kTwoFlag = 1.0 / std::sqrt(2.0);
// Nominal norm of the residual at the final positions, used to express
// readout gains in raw units.
constexpr double kResidualNorm = 2.5;
// Raw mention value for a caption holding one object token.
constexpr double kMentionScale = 1.0;
// Per-object visual mass is small in captions; it is stored amplified.
constexpr double kCaptionScale = 4.0;

}  // namespace

double BiasTable::strength(const std::string& context, int object) const {
  const auto it = prior.find(context);
  if (it == prior.end()) return 0.0;
  const auto jt = it->second.find(object);
  return jt == it->second.end() ? 0.0 : jt->second;
}

int WorldSpec::context_index(const std::string& label) const {
  for (int i = 0; i < n_contexts(); ++i) {
    if (contexts[static_cast<std::size_t>(i)].label == label) return i;
  }
  throw ConfigError("unknown context label '" + label + "'");
}

void WorldSpec::validate() const {
  if (object_names.empty()) throw ConfigError("world: object vocabulary is empty");
  if (contexts.empty()) throw ConfigError("world: no contexts");
  if (n_visual_tokens < 2) throw ConfigError("world: need at least two visual tokens");
  if (max_objects_per_scene < 1 || max_objects_per_scene > n_visual_tokens) {
    throw ConfigError("world: max_objects_per_scene must lie in [1, n_visual_tokens]");
  }
  if (!(typical_presence > 0.0 && typical_presence <= 1.0)) {
    throw ConfigError("world: typical_presence must lie in (0, 1]");
  }
  if (!(outsider_rate >= 0.0 && outsider_rate <= 1.0)) throw ConfigError("world: outsider_rate must lie in [0, 1]");
  if (!(feature_jitter >= 0.0)) throw ConfigError("world: feature_jitter must be >= 0");
  std::set<std::string> labels;
  for (const auto& ctx : contexts) {
    if (!labels.insert(ctx.label).second) throw ConfigError("world: duplicate context '" + ctx.label + "'");
    if (ctx.typical_objects.empty()) throw ConfigError("world: context '" + ctx.label + "' has no objects");
    for (int o : ctx.typical_objects) {
      if (o < 0 || o >= n_objects()) throw ConfigError("world: context '" + ctx.label + "' names an unknown object");
    }
  }
  for (const auto& [label, row] : bias.prior) {
    if (!labels.count(label)) throw ConfigError("bias table names unknown context '" + label + "'");
    for (const auto& [o, s] : row) {
      if (o < 0 || o >= n_objects()) throw ConfigError("bias table names an unknown object id");
      if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("bias strengths must be finite and >= 0");
    }
  }
}

WorldSpec WorldSpec::standard(int n_objects) {
  static const std::vector<std::string> kNames = {
      "apple", "banana", "orange", "grapes",  "cup",    "knife",   "bowl",  "oven",
      "car",   "bicycle", "person", "traffic-light", "dog", "bench", "frisbee", "tree"};
  if (n_objects < 8) throw ConfigError("standard world needs at least 8 objects");

  WorldSpec w;
  for (int i = 0; i < n_objects; ++i) {
    w.object_names.push_back(i < static_cast<int>(kNames.size()) ? kNames[static_cast<std::size_t>(i)]
                                                                  : "object-" + std::to_string(i));
  }
  const std::vector<std::string> labels = {"fruit-shop", "kitchen", "street", "park"};
  for (std::size_t k = 0; k < labels.size(); ++k) w.contexts.push_back({labels[k], {}});
  for (int o = 0; o < n_objects; ++o) {
    w.contexts[static_cast<std::size_t>(o / 4 % 4)].typical_objects.push_back(o);
  }
  // The first typical object of each context is the planted one.
  for (const auto& ctx : w.contexts) {
    for (std::size_t i = 0; i < ctx.typical_objects.size(); ++i) {
      w.bias.prior[ctx.label][ctx.typical_objects[i]] = i == 0 ? 1.0 : 0.35;
    }
  }
  return w;
}

Lexicon::Lexicon(const WorldSpec& world) : n_contexts_(world.n_contexts()), n_objects_(world.n_objects()) {}

std::optional<int> Lexicon::object_of(TokenId token) const {
  const int o = token - 6 - n_contexts_;
  if (o >= 0 && o < n_objects_) return o;
  return std::nullopt;
}

ModelConfig world_model_config(const WorldSpec& world, std::uint64_t seed) {
  world.validate();
  const Layout lay{world.n_objects(), world.n_contexts()};
  ModelConfig cfg;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.d_model = round_up(lay.used(), 16);
  cfg.d_ff = round_up(3 * lay.n + lay.c * lay.n + lay.c + 3, 8);
  cfg.vocab_size = Lexicon(world).vocab_size();
  cfg.n_visual_tokens = world.n_visual_tokens;
  cfg.feature_dim = world.feature_dim();
  cfg.max_seq_len = world.n_visual_tokens + 8 + 40;
  cfg.eos_token = Lexicon::eos;
  cfg.seed = seed;
  cfg.init_std = 0.002;
  return cfg;
}

ToyModel build_world_model(const WorldSpec& world, const ModelConfig& config) {
  world.validate();
  const ModelConfig expected = world_model_config(world, config.seed);
  if (config.d_model != expected.d_model || config.n_heads != expected.n_heads ||
      config.n_layers != expected.n_layers || config.d_ff != expected.d_ff ||
      config.vocab_size != expected.vocab_size || config.n_visual_tokens != expected.n_visual_tokens ||
      config.feature_dim != expected.feature_dim || config.eos_token != expected.eos_token ||
      config.max_seq_len < expected.max_seq_len) {
    throw ConfigError("model config does not fit the world (use world_model_config)");
  }

  const Layout L{world.n_objects(), world.n_contexts()};
  const Lexicon lex(world);
  const CircuitGains& g = world.gains;
  const int n = L.n;
  const int nc = L.c;
  const int dh = config.head_dim();
  const double sqrt_dh = std::sqrt(static_cast<double>(dh));
  const double ln_gain = 1.0 / std::sqrt(static_cast<double>(config.d_model));

  ModelWeights w = ModelWeights::seeded(config);
  auto put = [](Matrix& m, int r, int c, double v) { m(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) += v; };
  auto bump = [](std::vector<double>& v, int i, double x) { v[static_cast<std::size_t>(i)] += x; };
  // Circuit units fire with O(1) activations, so their random outgoing
  // weights would spray noise over the whole residual. Clear them.
  auto clear_unit = [&](LayerWeights& lw, int u) {
    for (int c = 0; c < config.d_model; ++c) {
      lw.w_fc(static_cast<std::size_t>(c), static_cast<std::size_t>(u)) = 0.0;
      lw.w_down(static_cast<std::size_t>(u), static_cast<std::size_t>(c)) = 0.0;
    }
  };

  // Embeddings and projector.
  put(w.token_embedding, Lexicon::sys, L.sysf(), 1.0);
  put(w.token_embedding, Lexicon::ask, L.askf(), 1.0);
  put(w.token_embedding, Lexicon::describe, L.descf(), 1.0);
  put(w.token_embedding, Lexicon::yes, L.yesf(), 1.0);
  put(w.token_embedding, Lexicon::no, L.nof(), 1.0);
  put(w.token_embedding, Lexicon::eos, L.eosf(), 1.0);
  for (int k = 0; k < nc; ++k) {
    put(w.token_embedding, lex.context_token(k), L.ctx(k), 1.0);
    put(w.token_embedding, lex.context_token(k), L.ctxf(), 1.0);
  }
  for (int o = 0; o < n; ++o) {
    put(w.token_embedding, lex.object_token(o), L.obj_q(o), 1.0);
    put(w.token_embedding, lex.object_token(o), L.tobjf(), 1.0);
    put(w.projector, o, L.vis_obj(o), 1.0);
    put(w.projector, o, L.visf(), 1.0);
  }
  put(w.projector, n, L.bgf(), 1.0);
  put(w.projector, n, L.visf(), 1.0);

  for (auto& layer : w.layers) {
    layer.ln1_gain.assign(layer.ln1_gain.size(), ln_gain);
    layer.ln2_gain.assign(layer.ln2_gain.size(), ln_gain);
  }
  w.lnf_gain.assign(w.lnf_gain.size(), ln_gain);

  // Layer 0, head 0: task mode.
  {
    auto& l0 = w.layers[0];
    bump(l0.b_q, 0, 1.0);
    put(l0.w_k, L.askf(), 0, g.instr_score * sqrt_dh);
    put(l0.w_k, L.descf(), 0, g.instr_score * sqrt_dh);
    put(l0.w_k, L.sysf(), 0, g.sink_score * sqrt_dh);
    put(l0.w_v, L.askf(), 1, 1.0);
    put(l0.w_v, L.descf(), 2, 1.0);
    put(l0.w_o, 1, L.mode_q(), 1.0);
    put(l0.w_o, 2, L.mode_c(), 1.0);

    // Layer 0, head 1: mentions.
    bump(l0.b_q, dh, 1.0);
    put(l0.w_k, L.tobjf(), dh, g.mention_score * sqrt_dh / kTwoFlag);
    put(l0.w_k, L.sysf(), dh, g.sink_score * sqrt_dh);
    for (int o = 0; o < n; ++o) {
      put(l0.w_v, L.obj_q(o), dh + 1 + o, kMentionScale / kTwoFlag);
      put(l0.w_o, dh + 1 + o, L.mention(o), 1.0);
    }

    // Layer 0 mlp: query = object token AND ask mode. Both inputs sit near
    // 0.5 after normalization at the question position.
    const double gate_scale = g.query_gain;
    for (int o = 0; o < n; ++o) {
      clear_unit(l0, o);
      put(l0.w_fc, L.obj_q(o), o, gate_scale);
      put(l0.w_fc, L.mode_q(), o, gate_scale);
      bump(l0.b_fc, o, -gate_scale * g.query_threshold);
      put(l0.w_down, o, L.qobj(o), 1.0 / (gate_scale * (1.0 - g.query_threshold)));
    }
  }

  // Layer 1, head 1 parks every row on the system token so that it adds no
  // positional trend to visual importance.
  {
    auto& l1 = w.layers[1];
    bump(l1.b_q, dh, 1.0);
    put(l1.w_k, L.sysf(), dh, g.visual_row_sink * sqrt_dh);
  }

  // Layer 1, head 0: look at the image.
  {
    auto& l1 = w.layers[1];
    const int base = 0;
    const int sink = n + 1;
    const double qobj_nominal = 1.0 / kResidualNorm;
    bump(l1.b_q, base, 1.0);
    put(l1.w_k, L.visf(), base, g.visual_score * sqrt_dh / kTwoFlag);
    put(l1.w_k, L.ctxf(), base, g.context_score * sqrt_dh / kTwoFlag);
    put(l1.w_q, L.visf(), sink, 1.0 / kTwoFlag);
    put(l1.w_k, L.sysf(), sink, g.visual_row_sink * sqrt_dh);
    for (int o = 0; o < n; ++o) {
      put(l1.w_k, L.vis_obj(o), base, g.salience_score * sqrt_dh / kTwoFlag);
      put(l1.w_q, L.qobj(o), 1 + o, 1.0 / qobj_nominal);
      put(l1.w_k, L.vis_obj(o), 1 + o, g.match_score * sqrt_dh / kTwoFlag);
      put(l1.w_v, L.vis_obj(o), o, 1.0 / kTwoFlag);
      put(l1.w_o, o, L.att_obj(o), 1.0);
    }
    put(l1.w_v, L.visf(), n, 1.0 / kTwoFlag);
    put(l1.w_o, n, L.seen(), 1.0);
    for (int k = 0; k < nc; ++k) {
      put(l1.w_v, L.ctx(k), n + 1 + k, 1.0 / kTwoFlag);
      put(l1.w_o, n + 1 + k, L.att_ctx(k), 1.0);
    }

    // Layer 1 mlp. Each gated product is a pair of units
    //   relu(G (sig + s*gate - t)) - relu(G (s*gate - t)) = G * sig   when the gate is open
    // and zero when it is closed, for sig < t.
    const double G = g.match_gain;
    const double s = 4.0;
    const double t = g.match_threshold;
    const double to_raw = kResidualNorm / G;
    int unit = 0;
    auto gated = [&](int sig, int gate, int out, double weight) {
      clear_unit(l1, unit);
      put(l1.w_fc, sig, unit, G);
      put(l1.w_fc, gate, unit, G * s);
      bump(l1.b_fc, unit, -G * t);
      put(l1.w_down, unit, out, weight * to_raw);
      ++unit;
    };
    auto baseline = [&]() {
      clear_unit(l1, unit);
      return unit++;
    };

    for (int o = 0; o < n; ++o) {
      // Evidence is kept in units of match mass; the head applies yes_match.
      gated(L.att_obj(o), L.qobj(o), L.yes_evid(), 1.0);
      double prior_weight = 0.0;
      for (int k = 0; k < nc; ++k) {
        const double p = world.bias.strength(world.contexts[static_cast<std::size_t>(k)].label, o);
        const double wk = g.yes_prior / g.yes_match * p;
        gated(L.att_ctx(k), L.qobj(o), L.yes_evid(), wk);
        prior_weight += wk;
      }
      const int b = baseline();
      put(l1.w_fc, L.qobj(o), b, G * s);
      bump(l1.b_fc, b, -G * t);
      put(l1.w_down, b, L.yes_evid(), -(1.0 + prior_weight) * to_raw);
    }
    for (int o = 0; o < n; ++o) gated(L.att_obj(o), L.mode_c(), L.cap_obj(o), kCaptionScale);
    for (int k = 0; k < nc; ++k) gated(L.att_ctx(k), L.mode_c(), L.cap_ctx(k), 1.0);
    {
      const int b = baseline();
      put(l1.w_fc, L.mode_c(), b, G * s);
      bump(l1.b_fc, b, -G * t);
      for (int o = 0; o < n; ++o) put(l1.w_down, b, L.cap_obj(o), -kCaptionScale * to_raw);
      for (int k = 0; k < nc; ++k) put(l1.w_down, b, L.cap_ctx(k), -to_raw);
    }
    gated(L.seen(), L.mode_q(), L.no_evid(), 1.0);
    {
      const int b = baseline();
      put(l1.w_fc, L.mode_q(), b, G * s);
      bump(l1.b_fc, b, -G * t);
      put(l1.w_down, b, L.no_evid(), -to_raw);
    }
  }

  // Output head.
  const double r = kResidualNorm;
  for (int tok = 0; tok < config.vocab_size; ++tok) bump(w.head_bias, tok, -20.0);
  bump(w.head_bias, Lexicon::eos, 20.0 + g.eos_bias);
  bump(w.head_bias, Lexicon::yes, 20.0);
  bump(w.head_bias, Lexicon::no, 20.0 + g.no_bias);
  put(w.head, L.yes_evid(), Lexicon::yes, g.yes_match * r);
  put(w.head, L.no_evid(), Lexicon::no, g.no_seen * r);
  for (TokenId answer : {Lexicon::yes, Lexicon::no}) {
    put(w.head, L.mode_q(), answer, g.mode_boost * r);
    put(w.head, L.mode_c(), answer, -g.mode_boost * r);
  }
  for (int o = 0; o < n; ++o) {
    const TokenId tok = lex.object_token(o);
    bump(w.head_bias, tok, 20.0);
    put(w.head, L.cap_obj(o), tok, g.caption_object / kCaptionScale * r);
    put(w.head, L.mention(o), tok, -g.caption_mention / kMentionScale * r);
    put(w.head, L.mode_q(), tok, -g.mode_boost * r);
    for (int k = 0; k < nc; ++k) {
      const double p = world.bias.strength(world.contexts[static_cast<std::size_t>(k)].label, o);
      put(w.head, L.cap_ctx(k), tok, g.caption_prior * p * r);
    }
  }

  // Every readout gets zero column sum through the ref dimension, which makes
  // it blind to the mean that layer norm subtracts.
  const auto ref = static_cast<std::size_t>(L.ref());
  auto clear_col = [&](Matrix& m) {
    for (std::size_t r0 = 0; r0 < m.rows(); ++r0) m(r0, ref) = 0.0;
  };
  auto balance = [&](Matrix& m) {
    for (std::size_t c0 = 0; c0 < m.cols(); ++c0) {
      double sum = 0.0;
      for (std::size_t r0 = 0; r0 < m.rows(); ++r0) {
        if (r0 != ref) sum += m(r0, c0);
      }
      m(ref, c0) = -sum;
    }
  };
  clear_col(w.token_embedding);
  clear_col(w.position_embedding);
  clear_col(w.projector);
  w.projector_bias[ref] = 0.0;
  for (auto& lw : w.layers) {
    clear_col(lw.w_o);
    clear_col(lw.w_down);
    lw.b_o[ref] = 0.0;
    lw.b_down[ref] = 0.0;
    balance(lw.w_q);
    balance(lw.w_k);
    balance(lw.w_v);
    balance(lw.w_fc);
  }
  balance(w.head);

  return ToyModel(config, std::move(w));
}

}  // namespace rbd

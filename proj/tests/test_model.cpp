#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "rbd/model.hpp"
#include "test_util.hpp"

namespace rbd {
namespace {

using testing::Real;

TEST(ModelConfig, RejectsIndivisibleHeads) {
  ModelConfig c = testing::seed7_config();
  c.d_model = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(build_model(c), ConfigError);
}

TEST(ModelConfig, RejectsEosOutsideVocabulary) {
  ModelConfig c = testing::seed7_config();
  c.eos_token = c.vocab_size;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TokenSequence, SpansAreOrderedAndCovering) {
  const ModelConfig c = testing::seed7_config();
  const TokenSequence seq = testing::seed7_probe(c);
  EXPECT_EQ(seq.length(), 12u);
  EXPECT_EQ(seq.sys_span(), (IndexRange{0, 2}));
  EXPECT_EQ(seq.img_span(), (IndexRange{2, 6}));
  EXPECT_EQ(seq.ins_span(), (IndexRange{6, 9}));
  EXPECT_EQ(seq.res_span(), (IndexRange{9, 12}));
  EXPECT_FALSE(seq.token_at(3).has_value());
  EXPECT_EQ(seq.token_at(6), 3);
  EXPECT_THROW(seq.token_at(12), DomainError);
}

TEST(Model, SameSeedSameLogits) {
  const ModelConfig c = testing::seed7_config();
  const TokenSequence seq = testing::seed7_probe(c);
  EXPECT_EQ(forward(build_model(c), seq).logits.scores, forward(build_model(c), seq).logits.scores);
}

TEST(Model, DifferentSeedDifferentLogits) {
  ModelConfig a = testing::seed7_config();
  ModelConfig b = a;
  b.seed = 8;
  const TokenSequence seq = testing::seed7_probe(a);
  EXPECT_NE(forward(build_model(a), seq).logits.scores, forward(build_model(b), seq).logits.scores);
}

TEST(Model, ZeroWeightsGiveUniformLogits) {
  const ModelConfig c = testing::seed7_config();
  const ToyModel m(c, ModelWeights::zeros(c));
  const auto logits = forward(m, testing::seed7_probe(c)).logits.scores;
  for (double v : logits) EXPECT_EQ(v, logits.front());
}

TEST(Model, RejectsMisshapenWeights) {
  const ModelConfig c = testing::seed7_config();
  ModelWeights w = ModelWeights::seeded(c);
  w.layers[1].w_fc = Matrix(3, 3);
  EXPECT_THROW(ToyModel(c, w), ShapeError);
}

TEST(Projector, ZeroFeaturesGiveZeroEmbeddings) {
  const ModelConfig c = testing::seed7_config();
  const ToyModel m = build_model(c);
  const Matrix e = project_visual(m, Matrix(4, 4));
  for (double v : e.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Projector, IsLinearWithZeroBias) {
  const ModelConfig c = testing::seed7_config();
  const ToyModel m = build_model(c);
  Rng rng(3);
  Matrix f = testing::random_features(c, rng);
  Matrix f2 = f;
  for (double& v : f2.flat()) v *= 2.0;
  const Matrix a = project_visual(m, f);
  const Matrix b = project_visual(m, f2);
  for (std::size_t i = 0; i < a.flat().size(); ++i) EXPECT_DOUBLE_EQ(b.flat()[i], 2.0 * a.flat()[i]);
}

TEST(Projector, MatchesLongDoubleMatmul) {
  const ModelConfig c = testing::seed7_config();
  const ToyModel m = build_model(c);
  Matrix f(4, 4);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 4; ++j) f(i, j) = static_cast<double>(i + 1) - 0.5 * static_cast<double>(j);
  }
  const Matrix got = project_visual(m, f);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t col = 0; col < 8; ++col) {
      Real want = 0.0L;
      for (std::size_t k = 0; k < 4; ++k) want += static_cast<Real>(f(i, k)) * m.weights().projector(k, col);
      EXPECT_NEAR(got(i, col), static_cast<double>(want), 1e-15);
    }
  }
}

TEST(Projector, RowCountMismatchIsShapeError) {
  const ToyModel m = build_model(testing::seed7_config());
  EXPECT_THROW(project_visual(m, Matrix(3, 4)), ShapeError);
}

TEST(Forward, MatchesReferenceOnSeed7Fixture) {
  for (double init_std : {0.02, 0.5}) {
    ModelConfig c = testing::seed7_config();
    c.init_std = init_std;
    const ToyModel m = build_model(c);
    const TokenSequence seq = testing::seed7_probe(c);
    const ForwardResult got = forward(m, seq);
    const auto ref = testing::reference_forward(m, seq);
    EXPECT_LT(testing::max_relative_error(got.logits.scores, ref.logits), 1e-9) << "init_std " << init_std;
    for (int l = 0; l < c.n_layers; ++l) {
      for (int h = 0; h < c.n_heads; ++h) {
        for (std::size_t i = 0; i < seq.length(); ++i) {
          for (std::size_t j = 0; j < seq.length(); ++j) {
            EXPECT_NEAR(got.trace.map(l, h)(i, j), static_cast<double>(ref.attention[l][h][i][j]), 1e-12);
          }
        }
      }
    }
  }
}

TEST(Forward, TraceIsCausal) {
  const ModelConfig c = testing::seed7_config();
  const ForwardResult r = forward(build_model(c), testing::seed7_probe(c));
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      const Matrix& a = r.trace.map(l, h);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = i + 1; j < a.cols(); ++j) EXPECT_EQ(a(i, j), 0.0);
      }
    }
  }
}

TEST(Forward, OverlengthIsCapacityError) {
  ModelConfig c = testing::seed7_config();
  c.max_seq_len = 10;
  EXPECT_THROW(forward(build_model(c), testing::seed7_probe(c)), CapacityError);
}

TEST(Forward, BiasOffImageColumnsIsDomainError) {
  const ModelConfig c = testing::seed7_config();
  const TokenSequence seq = testing::seed7_probe(c);
  const ColumnBias bias{IndexRange{0, 4}, {0.0, 0.0, 0.0, 0.0}};
  ForwardOptions opts;
  opts.bias = &bias;
  EXPECT_THROW(forward(build_model(c), seq, opts), DomainError);
}

TEST(Forward, TokenOutsideVocabularyIsDomainError) {
  const ModelConfig c = testing::seed7_config();
  TokenSequence seq = testing::seed7_probe(c);
  seq.append_response(static_cast<TokenId>(c.vocab_size));
  EXPECT_THROW(forward(build_model(c), seq), DomainError);
}

TEST(Forward, DiscardingEveryColumnARowSeesIsDomainError) {
  // A sequence that starts with the image leaves its first row nothing else.
  const ModelConfig c = testing::seed7_config();
  Rng rng(1);
  const TokenSequence seq({}, testing::random_features(c, rng), {3});
  const double inf = std::numeric_limits<double>::infinity();
  const ColumnBias bias{seq.img_span(), {-inf, 0.0, 0.0, 0.0}};
  ForwardOptions opts;
  opts.bias = &bias;
  EXPECT_THROW(forward(build_model(c), seq, opts), DomainError);
}

TEST(Forward, BiasedRowsStaySimplexRows) {
  const ModelConfig c = testing::seed7_config();
  const TokenSequence seq = testing::seed7_probe(c);
  const double inf = std::numeric_limits<double>::infinity();
  const ColumnBias bias{seq.img_span(), {std::log(2.0), -inf, -std::log(2.0), 3.0}};
  ForwardOptions opts;
  opts.bias = &bias;
  const ForwardResult r = forward(build_model(c), seq, opts);
  for (int l = 0; l < c.n_layers; ++l) {
    for (int h = 0; h < c.n_heads; ++h) {
      const Matrix& a = r.trace.map(l, h);
      for (std::size_t i = 0; i < a.rows(); ++i) {
        double total = 0.0;
        for (double v : a.row(i)) total += v;
        EXPECT_NEAR(total, 1.0, 1e-12);
        if (i >= 3) {
          EXPECT_EQ(a(i, 3), 0.0);
        }
      }
    }
  }
}

}  // namespace
}  // namespace rbd

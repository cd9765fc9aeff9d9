#include <gtest/gtest.h>

#include <sstream>

#include "rbd/attention_analysis.hpp"
#include "rbd/eval.hpp"
#include "golden.hpp"
#include "test_util.hpp"

namespace rbd {
namespace {

TEST(TypeShares, UniformRowIsProportionalToSpanSize) {
  // Spans (2, 4, 3, 1) over 10 positions; the last row attends to all 10.
  ModelConfig c = testing::seed7_config();
  Rng rng(1);
  const TokenSequence seq({1, 2}, testing::random_features(c, rng), {3, 4, 5}, {6});
  AttentionTrace t(1, 2, 10);
  for (int h = 0; h < 2; ++h) {
    for (std::size_t j = 0; j < 10; ++j) t.map(0, h)(9, j) = 0.1;
  }
  const AttentionShares s = type_shares(t, seq, 0, 9);
  EXPECT_NEAR(s.sys(), 0.2, 1e-15);
  EXPECT_NEAR(s.img(), 0.4, 1e-15);
  EXPECT_NEAR(s.ins(), 0.3, 1e-15);
  EXPECT_NEAR(s.res(), 0.1, 1e-15);
}

TEST(TypeShares, RowBeyondSequenceIsDomainError) {
  const ModelConfig c = testing::seed7_config();
  const TokenSequence seq = testing::seed7_probe(c);
  const ForwardResult r = forward(build_model(c), seq);
  EXPECT_THROW(type_shares(r.trace, seq, 0, seq.length()), DomainError);
}

TEST(TypeShares, MatchesHandSummedSpans) {
  ModelConfig c = testing::seed7_config();
  c.init_std = 0.5;
  const ToyModel m = build_model(c);
  const TokenSequence seq = testing::seed7_probe(c);
  const ForwardResult r = forward(m, seq);
  const std::size_t row = seq.length() - 1;
  for (int l = 0; l < c.n_layers; ++l) {
    const AttentionShares s = type_shares(r.trace, seq, l, row);
    double sys = 0, img = 0, ins = 0, res = 0;
    for (int h = 0; h < c.n_heads; ++h) {
      const Matrix& a = r.trace.map(l, h);
      sys += (a(row, 0) + a(row, 1)) / 2.0;
      img += (a(row, 2) + a(row, 3) + a(row, 4) + a(row, 5)) / 2.0;
      ins += (a(row, 6) + a(row, 7) + a(row, 8)) / 2.0;
      res += (a(row, 9) + a(row, 10) + a(row, 11)) / 2.0;
    }
    EXPECT_NEAR(s.sys(), sys, 1e-14);
    EXPECT_NEAR(s.img(), img, 1e-14);
    EXPECT_NEAR(s.ins(), ins, 1e-14);
    EXPECT_NEAR(s.res(), res, 1e-14);
  }
}

TEST(TypeShares, PartitionSumsToOneOnEveryRow) {
  ModelConfig c = testing::seed7_config();
  c.init_std = 0.5;
  const ToyModel m = build_model(c);
  Rng rng(17);
  for (int p = 0; p < 10; ++p) {
    const TokenSequence seq = testing::random_sequence(c, rng, 2, 3, 4);
    const ForwardResult r = forward(m, seq);
    for (int l = 0; l < c.n_layers; ++l) {
      for (std::size_t row = 0; row < seq.length(); ++row) {
        const AttentionShares s = type_shares(r.trace, seq, l, row);
        EXPECT_NEAR(s.sys() + s.img() + s.ins() + s.res(), 1.0, 1e-12);
      }
    }
  }
}

std::vector<TokenSequence> world_probes(const WorldSpec& world, std::size_t n) {
  const Dataset data = generate_dataset(static_cast<int>(n), world, 11);
  std::vector<TokenSequence> probes;
  for (const auto& s : data.scenes) probes.push_back(caption_prompt(world, s));
  return probes;
}

TEST(Profile, SingleProbeEqualsItsShares) {
  const WorldSpec world = WorldSpec::standard();
  const ToyModel m = build_world_model(world, world_model_config(world, 7));
  const auto probes = world_probes(world, 1);
  ProfileOptions opts;
  opts.row_rule = RowRule::last;
  opts.generated_tokens = 4;
  const AttentionProfile prof = corpus_attention_profile(m, probes, opts);
  ASSERT_EQ(prof.used, 1u);

  DecodeParams greedy;
  greedy.max_new_tokens = 4;
  TokenSequence seq = probes[0];
  for (TokenId t : generate(m, probes[0], greedy, {}, nullptr).token_ids) seq.append_response(t);
  const ForwardResult r = forward(m, seq);
  for (int l = 0; l < 2; ++l) {
    const AttentionShares s = type_shares(r.trace, seq, l, seq.length() - 1);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_DOUBLE_EQ(prof.mean_by_layer[l].shares[k], s.shares[k]);
  }
}

TEST(Profile, DuplicatedProbeGivesSameTable) {
  const WorldSpec world = WorldSpec::standard();
  const ToyModel m = build_world_model(world, world_model_config(world, 7));
  auto probes = world_probes(world, 1);
  ProfileOptions opts;
  opts.row_rule = RowRule::last;
  const auto once = corpus_attention_profile(m, probes, opts);
  probes.push_back(probes[0]);
  const auto twice = corpus_attention_profile(m, probes, opts);
  for (int l = 0; l < 2; ++l) {
    for (std::size_t k = 0; k < 4; ++k) {
      EXPECT_NEAR(once.mean_by_layer[l].shares[k], twice.mean_by_layer[l].shares[k], 1e-15);
    }
  }
}

TEST(Profile, ShortProbesAreSkippedWithWarning) {
  const WorldSpec world = WorldSpec::standard();
  const ToyModel m = build_world_model(world, world_model_config(world, 7));
  const auto probes = world_probes(world, 5);
  ProfileOptions opts;  // tenth generated token; captions here are shorter
  const auto prof = corpus_attention_profile(m, probes, opts);
  EXPECT_EQ(prof.used + prof.skipped, probes.size());
  EXPECT_EQ(prof.warnings.size(), prof.skipped);
  EXPECT_GT(prof.skipped, 0u);
}

TEST(Profile, TwentyProbeTableIsFrozen) {
  const WorldSpec world = WorldSpec::standard();
  const ToyModel m = build_world_model(world, world_model_config(world, 7));
  ProfileOptions opts;
  opts.row_rule = RowRule::last;
  std::ostringstream csv;
  write_profile_csv(csv, corpus_attention_profile(m, world_probes(world, 20), opts));
  testing::expect_golden("attention_profile_seed7.csv", csv.str());
}

TEST(Profile, TenthGeneratedRowOnRandomModel) {
  // A random model rarely emits EOS early, so the tenth token exists.
  ModelConfig c = testing::seed7_config();
  c.init_std = 0.3;
  const ToyModel m = build_model(c);
  Rng rng(3);
  std::vector<TokenSequence> probes;
  for (int i = 0; i < 5; ++i) probes.push_back(testing::random_sequence(c, rng, 1, 2, 0));
  ProfileOptions opts;
  opts.generated_tokens = 12;
  const auto prof = corpus_attention_profile(m, probes, opts);
  for (const auto& layer : prof.mean_by_layer) {
    if (prof.used > 0) {
      EXPECT_NEAR(layer.sys() + layer.img() + layer.ins() + layer.res(), 1.0, 1e-12);
    }
  }
}

}  // namespace
}  // namespace rbd

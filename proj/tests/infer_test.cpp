#include <gtest/gtest.h>

#include <random>

#include "mdn/infer.hpp"
#include "toy_scorer.hpp"

using mdn::BeamConfig;
using mdn::ModelConfig;
using mdn::Transformer;

namespace {

ModelConfig small_model(std::size_t vocab = 40) {
  ModelConfig c;
  c.hidden = 16;
  c.ffn_dim = 32;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.enc_heads = 2;
  c.dec_heads = 2;
  c.dec_head_dim = 8;
  c.src_vocab = vocab;
  c.tgt_vocab = vocab;
  return c;
}

std::vector<std::vector<int>> random_sentences(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> len(1, 9);
  std::uniform_int_distribution<int> tok(4, static_cast<int>(vocab) - 1);
  std::vector<std::vector<int>> out(n);
  for (auto& s : out) {
    s.resize(len(rng));
    for (auto& t : s) t = tok(rng);
  }
  return out;
}

}  // namespace

TEST(LengthNormalize, Examples) {
  EXPECT_DOUBLE_EQ(mdn::length_normalize(-2.0, 4, 1.0), -0.5);
  EXPECT_DOUBLE_EQ(mdn::length_normalize(-2.0, 4, 0.0), -2.0);
  EXPECT_DOUBLE_EQ(mdn::length_normalize(-3.5, 1, 0.7), -3.5);
  EXPECT_THROW(mdn::length_normalize(-1.0, 0, 1.0), mdn::ShapeError);
}

TEST(BeamConfig, DefaultLimit) {
  BeamConfig c;
  EXPECT_EQ(c.beam, 4u);
  EXPECT_EQ(c.limit(10), 25u);
  EXPECT_EQ(c.limit(3), 14u);
  c.max_len = 4;
  EXPECT_EQ(c.limit(100), 4u);
}

TEST(BeamSearch, MatchesExhaustiveSearchOnToyTables) {
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    mdn::testing::TableScorer s(6, 4, seed, 8.0);
    BeamConfig cfg;
    cfg.max_len = 4;
    const auto oracle = mdn::testing::exhaustive_best(s, 4, cfg);
    const auto got = mdn::beam_search(s, {{5}}, cfg);
    ASSERT_EQ(got.size(), 1u);
    EXPECT_EQ(got[0].tokens, oracle.tokens) << "seed " << seed;
    EXPECT_NEAR(got[0].normalized, oracle.normalized, 1e-12);
  }
}

TEST(BeamSearch, WideBeamIsExactOnArbitraryTables) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    mdn::testing::TableScorer s(5, 4, seed, 0.0);
    for (double alpha : {0.0, 1.0}) {
      BeamConfig cfg;
      cfg.max_len = 4;
      cfg.beam = 625;
      cfg.length_alpha = alpha;
      const auto oracle = mdn::testing::exhaustive_best(s, 4, cfg);
      const auto got = mdn::beam_search(s, {{4}}, cfg);
      EXPECT_EQ(got[0].tokens, oracle.tokens) << "seed " << seed << " alpha " << alpha;
      EXPECT_EQ(got[0].finished_with_eos, oracle.finished_with_eos);
    }
  }
}

TEST(BeamSearch, BeamOneEqualsGreedy) {
  const auto cfg = small_model();
  Transformer<float> m(cfg, 3);
  mdn::TransformerScorer<float> scorer(m);
  BeamConfig bc;
  bc.beam = 1;
  for (const auto& s : random_sentences(30, cfg.src_vocab, 5)) {
    const auto greedy = mdn::greedy_decode(scorer, s, bc);
    const auto beam = mdn::beam_search(scorer, {s}, bc);
    EXPECT_EQ(beam[0].tokens, greedy);
  }
}

TEST(BeamSearch, GreedyOnTablesStopsAtEos) {
  mdn::testing::TableScorer s(6, 4, 11, 8.0);
  BeamConfig cfg;
  cfg.beam = 1;
  cfg.max_len = 4;
  const auto greedy = mdn::greedy_decode(s, {4}, cfg);
  EXPECT_EQ(mdn::beam_search(s, {{4}}, cfg)[0].tokens, greedy);
  EXPECT_LE(greedy.size(), 4u);
}

TEST(BeamSearch, WiderBeamNeverScoresWorse) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    mdn::testing::TableScorer s(6, 5, seed, 1.0);
    BeamConfig narrow, wide;
    narrow.max_len = wide.max_len = 5;
    narrow.length_alpha = wide.length_alpha = 0.0;
    narrow.beam = 1;
    wide.beam = 4;
    EXPECT_GE(mdn::beam_search(s, {{4}}, wide)[0].score, mdn::beam_search(s, {{4}}, narrow)[0].score - 1e-12);
  }
}

TEST(BeamSearch, RejectsZeroBeamAndAcceptsEmptyBatch) {
  mdn::testing::TableScorer s(4, 3, 1, 0.0);
  BeamConfig cfg;
  EXPECT_TRUE(mdn::beam_search(s, {}, cfg).empty());
  cfg.beam = 0;
  EXPECT_THROW(mdn::beam_search(s, {{4}}, cfg), mdn::ShapeError);
}

TEST(TranslateBatch, BatchInvariance) {
  const auto cfg = small_model();
  Transformer<float> m(cfg, 9);
  const auto src = random_sentences(13, cfg.src_vocab, 2);
  mdn::TranslateOptions together;
  together.batch = 64;
  together.beam.max_len = 12;
  const auto all = mdn::translate_batch(m, src, together);
  ASSERT_EQ(all.size(), src.size());
  auto alone = together;
  alone.batch = 1;
  const auto one = mdn::translate_batch(m, src, alone);
  auto mid = together;
  mid.batch = 5;
  const auto five = mdn::translate_batch(m, src, mid);
  for (std::size_t i = 0; i < src.size(); ++i) {
    EXPECT_EQ(all[i].tokens, one[i].tokens);
    EXPECT_EQ(all[i].tokens, five[i].tokens);
    EXPECT_EQ(all[i].score, one[i].score);
  }
}

TEST(TranslateBatch, ThreadsPreserveOrderAndOutput) {
  const auto cfg = small_model();
  Transformer<float> m(cfg, 4);
  const auto src = random_sentences(17, cfg.src_vocab, 8);
  mdn::TranslateOptions o;
  o.batch = 2;
  o.beam.max_len = 10;
  const auto serial = mdn::translate_batch(m, src, o);
  o.threads = 4;
  const auto parallel = mdn::translate_batch(m, src, o);
  for (std::size_t i = 0; i < src.size(); ++i) EXPECT_EQ(serial[i].tokens, parallel[i].tokens);
}

TEST(TranslateBatch, EmptyInputs) {
  const auto cfg = small_model();
  Transformer<float> m(cfg, 4);
  mdn::TranslateOptions o;
  EXPECT_TRUE(mdn::translate_batch(m, {}, o).empty());
  const auto out = mdn::translate_batch(m, {{}, {5, 6}}, o);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_TRUE(out[0].tokens.empty());
  o.batch = 0;
  EXPECT_THROW(mdn::translate_batch(m, {{5}}, o), mdn::ShapeError);
}

TEST(TranslateBatch, OutputsRespectLengthLimitAndNeverEmitSpecials) {
  const auto cfg = small_model();
  Transformer<float> m(cfg, 12);
  const auto src = random_sentences(6, cfg.src_vocab, 3);
  mdn::TranslateOptions o;
  const auto out = mdn::translate_batch(m, src, o);
  for (std::size_t i = 0; i < src.size(); ++i) {
    EXPECT_LE(out[i].tokens.size(), o.beam.limit(src[i].size()));
    for (int t : out[i].tokens) EXPECT_NE(t, mdn::bpe::kEosId);
    EXPECT_LE(out[i].score, 0.0);
  }
}

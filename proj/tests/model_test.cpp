// Copyright 2026 The TriForce-CPU Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "triforce/kv_policies.hpp"
#include "triforce/model.hpp"
#include "triforce/sampling.hpp"
#include "triforce/tokenizer.hpp"
#include "triforce/weights_io.hpp"

namespace triforce {
namespace {

std::vector<Token> random_tokens(std::size_t n, std::uint32_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Token> t(n);
  for (auto& v : t) v = static_cast<Token>(rng.uniform_int(0, vocab - 1));
  return t;
}

class ModelTest : public ::testing::Test {
 protected:
  const ModelWeights w = generate_weights(presets::toy_target(), 11, false);
  const ModelWeights tied = generate_weights(presets::toy_target(), 12, true);
};

TEST(ModelConfigTest, ValidationRejectsBadShapes) {
  ModelConfig c = presets::toy_target();
  c.n_kv_heads = 3;
  EXPECT_THROW(c.validate(), ContractError);
  c = presets::toy_target();
  c.head_dim = 7;
  EXPECT_THROW(c.validate(), ContractError);
  c = presets::toy_target();
  c.vocab_size = 1;
  EXPECT_THROW(c.validate(), ContractError);
  for (const char* p : {"target", "draft", "toy-target", "toy-draft"}) EXPECT_NO_THROW(presets::by_name(p).validate());
  EXPECT_THROW(presets::by_name("huge"), ContractError);
}

TEST(WeightsTest, SeededGenerationIsDeterministic) {
  const auto c = presets::draft();
  EXPECT_EQ(generate_weights(c, 7).checksum(), generate_weights(c, 7).checksum());
  EXPECT_NE(generate_weights(c, 7).checksum(), generate_weights(c, 8).checksum());
  EXPECT_TRUE(generate_weights(c, 7).all_finite());
}

TEST(WeightsTest, ShapesFollowConfig) {
  const auto c = presets::toy_target();
  const auto w = generate_weights(c, 1, false);
  const auto expected = expected_shapes(c, false);
  const auto named = w.named_tensors();
  ASSERT_EQ(named.size(), expected.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    EXPECT_EQ(named[i].first, expected[i].first);
    EXPECT_EQ(named[i].second->shape(), expected[i].second);
  }
}

class WeightFileTest : public ::testing::Test {
 protected:
  void TearDown() override { std::filesystem::remove(path); }
  std::string path = (std::filesystem::temp_directory_path() / ("tf_weights_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + ".bin")).string();
};

TEST_F(WeightFileTest, RoundTripPreservesChecksum) {
  for (bool tied : {false, true}) {
    const auto w = generate_weights(presets::toy_target(), 3, tied);
    save_weights(w, path);
    const auto back = load_weights(path);
    EXPECT_EQ(back.checksum(), w.checksum());
    EXPECT_EQ(back.config, w.config);
    EXPECT_EQ(back.tied_head, tied);
  }
}

TEST_F(WeightFileTest, BadMagicAndTruncationAreReported) {
  save_weights(generate_weights(presets::toy_target(), 3), path);
  std::vector<char> bytes;
  {
    std::ifstream f(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(f), {});
  }
  auto bad = bytes;
  bad[0] = 'X';
  try {
    deserialize_weights(bad);
    FAIL() << "expected bad magic";
  } catch (const WeightFormatError& e) {
    EXPECT_EQ(e.kind(), WeightFormatError::Kind::BadMagic);
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
  auto cut = bytes;
  cut.resize(bytes.size() / 2);
  try {
    deserialize_weights(cut);
    FAIL() << "expected truncation";
  } catch (const WeightFormatError& e) {
    EXPECT_EQ(e.kind(), WeightFormatError::Kind::Truncated);
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
  EXPECT_THROW(load_weights(path + ".missing"), WeightFormatError);
}

TEST_F(ModelTest, FullCacheMatchesBatchReference) {
  for (const ModelWeights* m : {&w, &tied}) {
    const auto tokens = random_tokens(37, m->config.vocab_size, 5);
    FullCache cache(m->config);
    const Logits got = prefill(*m, tokens, cache);
    const auto ref = oracle::forward(*m, tokens);
    for (std::size_t r = 0; r < tokens.size(); ++r) {
      for (std::size_t v = 0; v < m->config.vocab_size; ++v) ASSERT_NEAR(got.row(r)[v], ref.logits[r][v], 1e-4);
    }
  }
}

TEST_F(ModelTest, PrefillValidatesInput) {
  FullCache cache(w.config);
  EXPECT_THROW(prefill(w, std::vector<Token>{}, cache), ContractError);
  EXPECT_THROW(prefill(w, std::vector<Token>{99}, cache), ContractError);
  FullCache cache2(w.config);
  EXPECT_THROW(prefill(w, random_tokens(w.config.max_seq + 1, 16, 1), cache2), CapacityError);
  FullCache empty(w.config);
  EXPECT_THROW(decode_step(w, 1, empty), ContractError);
  EXPECT_THROW(decode_chunk(w, std::vector<Token>{1}, empty), ContractError);
}

TEST_F(ModelTest, PrefillFillsCacheWithEveryPosition) {
  const auto tokens = random_tokens(23, 16, 6);
  FullCache cache(w.config);
  prefill(w, tokens, cache);
  EXPECT_EQ(cache.length(), 23u);
  for (std::size_t l = 0; l < cache.n_layers(); ++l) {
    std::vector<Position> expect(23);
    std::iota(expect.begin(), expect.end(), 0);
    EXPECT_EQ(cache.layer(l).positions, expect);
  }
}

TEST_F(ModelTest, IncrementalDecodeMatchesBatch) {
  const auto tokens = random_tokens(30, 16, 7);
  FullCache a(w.config), b(w.config);
  prefill(w, std::span<const Token>(tokens).first(29), a);
  const Logits step = decode_step(w, tokens[29], a);
  const Logits batch = prefill(w, tokens, b);
  for (std::size_t v = 0; v < 16; ++v) EXPECT_NEAR(step.last()[v], batch.last()[v], 1e-4);
}

TEST_F(ModelTest, ChunkedDecodeIsBitIdenticalToSteps) {
  const auto tokens = random_tokens(20, 16, 8);
  FullCache a(w.config), b(w.config);
  prefill(w, std::span<const Token>(tokens).first(12), a);
  prefill(w, std::span<const Token>(tokens).first(12), b);
  const Logits chunk = decode_chunk(w, std::span<const Token>(tokens).subspan(12), a);
  for (std::size_t i = 12; i < 20; ++i) {
    const Logits s = decode_step(w, tokens[i], b);
    ASSERT_TRUE(std::equal(s.last().begin(), s.last().end(), chunk.row(i - 12).begin()));
  }
  // a one-token chunk is a decode step
  const Logits c1 = decode_chunk(w, std::vector<Token>{3}, a);
  const Logits s1 = decode_step(w, 3, b);
  EXPECT_TRUE(std::equal(c1.last().begin(), c1.last().end(), s1.last().begin()));
}

TEST_F(ModelTest, SaturatedTopKEqualsFullCache) {
  const auto tokens = random_tokens(25, 16, 9);
  FullCache f(w.config);
  TopKCache t(w.config, 25);
  const Logits a = prefill(w, tokens, f), b = prefill(w, tokens, t);
  for (std::size_t r = 0; r < 25; ++r) EXPECT_TRUE(std::equal(a.row(r).begin(), a.row(r).end(), b.row(r).begin()));
}

TEST_F(ModelTest, StreamingMasksEvictedPositions) {
  const auto tokens = random_tokens(40, 16, 10);
  StreamingCache s(w.config, StreamingConfig{2, 8});
  prefill(w, tokens, s);
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    for (std::size_t h = 0; h < w.config.n_heads; ++h) {
      const auto p = attention_probe(w, s, l, h);
      ASSERT_EQ(p.weights.size(), 40u);
      for (std::size_t i = 2; i < 34; ++i) EXPECT_EQ(p.weights[i], 0.0f) << i;
      EXPECT_NEAR(std::accumulate(p.weights.begin(), p.weights.end(), 0.0), 1.0, 1e-5);
    }
  }
}

TEST_F(ModelTest, AttentionProbeMatchesReference) {
  const auto tokens = random_tokens(19, 16, 13);
  FullCache cache(w.config);
  prefill(w, tokens, cache);
  const auto ref = oracle::forward(w, tokens);
  for (std::size_t l = 0; l < w.config.n_layers; ++l) {
    for (std::size_t h = 0; h < w.config.n_heads; ++h) {
      const auto p = attention_probe(w, cache, l, h);
      EXPECT_EQ(p.query_pos, 18);
      EXPECT_NEAR(std::accumulate(p.weights.begin(), p.weights.end(), 0.0), 1.0, 1e-5);
      for (std::size_t i = 0; i < p.weights.size(); ++i) EXPECT_NEAR(p.weights[i], ref.attention[l][h][i], 1e-5);
    }
  }
  EXPECT_THROW(attention_probe(w, cache, 9, 0), ContractError);
  FullCache fresh(w.config);
  EXPECT_THROW(attention_probe(w, fresh, 0, 0), ContractError);
}

TEST_F(ModelTest, SinglePositionProbeIsOne) {
  FullCache cache(w.config);
  prefill(w, std::vector<Token>{5}, cache);
  const auto p = attention_probe(w, cache, 1, 2);
  ASSERT_EQ(p.weights.size(), 1u);
  EXPECT_FLOAT_EQ(p.weights[0], 1.0f);
}

TEST(TokenizerTest, EmptyTextIsJustBos) {
  ByteTokenizer tok;
  EXPECT_EQ(tok.tokenize(""), std::vector<Token>{ByteTokenizer::kBos});
}

TEST(TokenizerTest, ArbitraryBytesRoundTrip) {
  ByteTokenizer tok;
  std::string s;
  for (int i = 0; i < 256; ++i) s.push_back(static_cast<char>(i));
  const auto t = tok.tokenize(s);
  EXPECT_EQ(tok.detokenize(t), s);
  for (std::size_t i = 1; i < t.size(); ++i) EXPECT_FALSE(ByteTokenizer::is_special(t[i]));
  EXPECT_THROW(ByteTokenizer(100), ContractError);
}

TEST(SamplingTest, GreedyTiesGoToLowestIndex) {
  Rng rng(1);
  const std::vector<float> flat(10, 0.5f);
  EXPECT_EQ(sample(flat, 0.0, rng), 0);
}

TEST(SamplingTest, GreedyIsArgmaxAndDoesNotConsumeRandomness) {
  Rng gen(3), a(9), b(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<float> l(12);
    for (auto& v : l) v = static_cast<float>(gen.normal(0, 2));
    const auto best = static_cast<Token>(std::max_element(l.begin(), l.end()) - l.begin());
    EXPECT_EQ(sample(l, 0.0, a), best);
  }
  EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(SamplingTest, DominantLogitWinsAtUnitTemperature) {
  Rng rng(4);
  std::vector<float> l(16, 0.0f);
  l[7] = 20.0f;
  int hits = 0;
  for (int i = 0; i < 10000; ++i) hits += sample(l, 1.0, rng) == 7;
  EXPECT_GE(hits, 9900);
}

TEST(SamplingTest, ProbabilitiesAreNormalized) {
  const std::vector<float> l{1.0f, -2.0f, 0.5f, 3.0f};
  for (double t : {0.0, 0.3, 1.0, 5.0}) {
    const auto p = to_probs(l, t);
    EXPECT_NEAR(std::accumulate(p.p.begin(), p.p.end(), 0.0), 1.0, 1e-12);
  }
  EXPECT_THROW(to_probs(l, -1.0), ContractError);
}

}  // namespace
}  // namespace triforce

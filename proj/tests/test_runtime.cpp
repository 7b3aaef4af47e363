#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "memlong/errors.hpp"
#include "memlong/runtime.hpp"
#include "reference_model.hpp"

using namespace memlong;
using memlong::testing::tiny_config;

namespace {

std::vector<int32_t> random_tokens(int64_t n, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int32_t> tok(0, 255);
  std::vector<int32_t> t(static_cast<size_t>(n));
  for (auto& x : t) x = tok(rng);
  return t;
}

Model tiny_model(uint64_t gate_seed) {
  Model m(tiny_config());
  for (NamedTensor& nt : m.parameters()) {
    if (nt.name.ends_with("norm") || nt.name.ends_with(".gate")) continue;
    for (float& w : nt.tensor.data()) w *= 10.0f;
  }
  if (gate_seed != 0) {
    std::mt19937_64 rng(gate_seed);
    std::normal_distribution<float> g(0.0f, 1.0f);
    for (int64_t l : m.config().retrieval_layers)
      for (float& x : m.layer(l).gate.data()) x = g(rng);
  }
  return m;
}

BankConfig bank_of(int64_t capacity) {
  BankConfig b;
  b.capacity = capacity;
  return b;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  EXPECT_EQ(a.size(), b.size());
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST(Session, StreamingMatchesDocumentForward) {
  const Model m = tiny_model(3);
  const auto toks = random_tokens(80, 1);
  const DocumentForward doc = m.forward_document(toks, bank_of(64));

  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> piece(1, 13);
  InferenceSession s(m, bank_of(64));
  std::vector<float> streamed;
  size_t done = 0;
  while (done < toks.size()) {
    const size_t n = std::min<size_t>(static_cast<size_t>(piece(rng)), toks.size() - done);
    const Tensor out = s.feed(std::span(toks).subspan(done, n));
    streamed.insert(streamed.end(), out.data().begin(), out.data().end());
    done += n;
  }
  EXPECT_LT(max_abs_diff(streamed, doc.logits.data()), 1e-5);
  EXPECT_EQ(s.position(), 80);
}

TEST(Session, OneRetrievalPerCompletedChunk) {
  const Model m = tiny_model(1);
  const int64_t tau = m.config().chunk_size;
  InferenceSession s(m, bank_of(64));
  s.feed(random_tokens(10 * tau, 2));
  EXPECT_EQ(s.stats().chunks_completed, 10);
  EXPECT_EQ(s.stats().retrieval_events, 10);
  EXPECT_EQ(s.bank().size(), 10);

  InferenceSession off(m, bank_of(0));
  off.feed(random_tokens(10 * tau, 2));
  EXPECT_EQ(off.stats().chunks_completed, 10);
  EXPECT_EQ(off.stats().retrieval_events, 0);
  EXPECT_EQ(off.bank().size(), 0);
}

TEST(Session, AttentionWidthIsBounded) {
  const Model m = tiny_model(1);
  const ModelConfig& c = m.config();
  InferenceSession s(m, bank_of(64));
  s.feed(random_tokens(200, 3));
  EXPECT_LE(s.stats().max_row_width, c.local_window + c.retrieval_k * c.chunk_size);
  EXPECT_EQ(s.stats().max_row_width, c.local_window + c.retrieval_k * c.chunk_size);
  EXPECT_LE(s.stats().max_cache_rows, c.local_window);
}

TEST(Session, RetrievalStaysOutsideLocalWindow) {
  const Model m = tiny_model(2);
  for (uint64_t seed = 0; seed < 20; ++seed) {
    InferenceSession s(m, bank_of(6));
    int64_t violations = 0, calls = 0;
    s.set_retrieval_observer([&](int64_t chunk, const std::vector<int64_t>& ids) {
      ++calls;
      for (int64_t id : ids)
        if (id >= m.window_first_chunk(chunk)) ++violations;
    });
    s.feed(random_tokens(96 + 8 * static_cast<int64_t>(seed), seed));
    EXPECT_EQ(violations, 0);
    EXPECT_GT(calls, 0);
    EXPECT_LE(s.bank().size(), 6);
  }
}

TEST(Session, GenerationIsDeterministic) {
  const Model m = tiny_model(4);
  const auto prompt = random_tokens(21, 4);
  InferenceSession a(m, bank_of(64)), b(m, bank_of(64));
  a.feed(prompt);
  b.feed(prompt);
  const TokenSeq ga = a.generate(30), gb = b.generate(30);
  EXPECT_EQ(ga.tokens, gb.tokens);
  EXPECT_EQ(ga.size(), 30);
  EXPECT_EQ(a.position(), 51);
}

TEST(Session, ZeroGateGenerationMatchesBaseline) {
  const Model m = tiny_model(0);
  auto seq = random_tokens(19, 6);
  InferenceSession s(m, bank_of(64));
  s.feed(seq);
  const TokenSeq gen = s.generate(20);
  for (int32_t expected : gen.tokens) {
    const Tensor logits = m.forward_baseline(seq);
    const auto last = logits.data().subspan(logits.data().size() - static_cast<size_t>(m.config().vocab_size));
    const auto best = std::max_element(last.begin(), last.end()) - last.begin();
    EXPECT_EQ(best, expected);
    seq.push_back(expected);
  }
}

TEST(Session, GenerateNeedsPrompt) {
  const Model m = tiny_model(0);
  InferenceSession s(m, bank_of(64));
  EXPECT_THROW(s.generate(3), ConfigError);
  EXPECT_TRUE(s.generate(0).empty());
}

TEST(Session, PeakLiveMemoryCountsBankAndWindow) {
  const Model m = tiny_model(1);
  const ModelConfig& c = m.config();
  InferenceSession s(m, bank_of(4));
  s.feed(random_tokens(160, 8));
  const int64_t d = c.d_model, tau = c.chunk_size;
  const int64_t bound = (c.local_window + c.retrieval_k * tau) * d * 2 + 4 * tau * d * 2;
  EXPECT_LE(s.stats().peak_live_kv_floats, bound);
  EXPECT_GT(s.stats().peak_live_kv_floats, 4 * tau * d * 2);
}

TEST(TokenNll, MatchesDirectLogSoftmax) {
  const std::vector<float> logits{1.0f, 2.0f, 3.0f, 0.0f, 0.0f, 0.0f};
  const std::vector<int32_t> targets{2, 1};
  const auto nll = token_nll(logits, 3, targets);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(nll[0], std::log(z) - 3.0, 1e-12);
  EXPECT_NEAR(nll[1], std::log(3.0), 1e-12);
  EXPECT_THROW(token_nll(logits, 4, targets), ShapeError);
}

TEST(EvalPerplexity, UntrainedModelIsNearUniform) {
  ModelConfig c;
  Model m(c);
  std::vector<TokenSeq> docs(2);
  docs[0].tokens = random_tokens(1024, 1);
  docs[1].tokens = random_tokens(1024, 2);
  const EvalReport r = eval_perplexity(m, docs, {1024}, 32, 256);
  ASSERT_EQ(r.lengths.size(), 1u);
  EXPECT_EQ(r.lengths[0].documents, 2);
  EXPECT_EQ(r.lengths[0].scored_tokens, 512);
  EXPECT_GE(r.lengths[0].perplexity, 200.0);
  EXPECT_LE(r.lengths[0].perplexity, 320.0);
}

TEST(EvalPerplexity, DisabledMemoryEqualsZeroGate) {
  const Model m = tiny_model(0);
  std::vector<TokenSeq> docs(3);
  for (size_t i = 0; i < docs.size(); ++i) docs[i].tokens = random_tokens(120, 10 + i);
  const EvalReport off = eval_perplexity(m, docs, {96, 120}, 0, 24);
  const EvalReport on = eval_perplexity(m, docs, {96, 120}, 32, 24);
  for (size_t i = 0; i < 2; ++i) {
    EXPECT_NEAR(off.lengths[i].perplexity, on.lengths[i].perplexity, 1e-4);
    EXPECT_EQ(off.lengths[i].retrieval_events, 0);
    EXPECT_GT(on.lengths[i].retrieval_events, 0);
  }
}

TEST(EvalPerplexity, ShortDocumentsAreSkippedWithWarning) {
  const Model m = tiny_model(1);
  std::vector<TokenSeq> docs(2);
  docs[0].tokens = random_tokens(100, 1);
  docs[0].source_doc = "long";
  docs[1].tokens = random_tokens(40, 2);
  docs[1].source_doc = "short";
  const EvalReport r = eval_perplexity(m, docs, {64}, 8, 16);
  EXPECT_EQ(r.lengths[0].documents, 1);
  EXPECT_EQ(r.lengths[0].skipped, 1);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("short"), std::string::npos);
  EXPECT_EQ(r.to_csv().substr(0, r.to_csv().find('\n')),
            "length,memory_size,eval_window,documents,skipped,scored_tokens,mean_nll,perplexity");
  EXPECT_THROW(eval_perplexity(m, docs, {16}, 8, 16), ConfigError);
  EXPECT_THROW(eval_perplexity(m, docs, {64}, -1, 16), ConfigError);
}

TEST(EvalPerplexity, ScoresOnlyTheEvalWindow) {
  const Model m = tiny_model(2);
  std::vector<TokenSeq> docs(1);
  docs[0].tokens = random_tokens(64, 3);
  const EvalReport r = eval_perplexity(m, docs, {64}, 16, 20);
  const DocumentForward fwd = m.forward_document(std::span(docs[0].tokens).first(63), bank_of(16));
  const auto nll = token_nll(fwd.logits.data().subspan(43 * 260), 260, std::span(docs[0].tokens).subspan(44));
  double mean = 0.0;
  for (double x : nll) mean += x / 20.0;
  EXPECT_EQ(r.lengths[0].scored_tokens, 20);
  EXPECT_NEAR(r.lengths[0].mean_nll, mean, 1e-5);
}

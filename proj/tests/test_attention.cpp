#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "memlong/errors.hpp"
#include "memlong/model.hpp"
#include "memlong/ops.hpp"
#include "reference_model.hpp"

using namespace memlong;

namespace {

constexpr int64_t kHeads = 2, kHeadDim = 4, kWidth = kHeads * kHeadDim, kTau = 4;

Tensor random_rows(int64_t rows, uint64_t seed, float sd = 1.0f) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, sd);
  std::vector<float> v(static_cast<size_t>(rows * kWidth));
  for (float& x : v) x = n(rng);
  return Tensor::from({rows, kWidth}, std::move(v));
}

ops::AttentionLayout layout(int64_t query_start, int64_t key_start, int64_t window_chunks) {
  ops::AttentionLayout l;
  l.n_heads = kHeads;
  l.head_dim = kHeadDim;
  l.query_start = query_start;
  l.key_start = key_start;
  l.chunk_size = kTau;
  l.window_chunks = window_chunks;
  l.scale = 1.0f / std::sqrt(static_cast<float>(kHeadDim));
  return l;
}

std::vector<double> softmax(std::vector<double> s) {
  double mx = s[0];
  for (double v : s) mx = std::max(mx, v);
  double z = 0.0;
  for (double& v : s) z += (v = std::exp(v - mx));
  for (double& v : s) v /= z;
  return s;
}

// Dense per-row assembly of [g * S_m ; S_a] x [V_mem ; V].
std::vector<double> dense_oracle(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor* qm,
                                 const std::vector<ops::MemoryBlock>& mem, const std::vector<float>& gate,
                                 const ops::AttentionLayout& l) {
  const int64_t n = q.rows();
  std::vector<double> out(static_cast<size_t>(n * kWidth), 0.0);
  const int64_t first_chunk = l.query_start / l.chunk_size;
  auto dot = [](const float* a, const float* b) {
    double s = 0.0;
    for (int64_t t = 0; t < kHeadDim; ++t) s += static_cast<double>(a[t]) * b[t];
    return s;
  };
  for (int64_t i = 0; i < n; ++i) {
    const int64_t pos = l.query_start + i, c = pos / l.chunk_size;
    const int64_t lo = std::max<int64_t>(0, c - l.window_chunks + 1) * l.chunk_size;
    for (int64_t h = 0; h < kHeads; ++h) {
      const float* qi = q.data().data() + i * kWidth + h * kHeadDim;
      std::vector<double> s;
      for (int64_t p = lo; p <= pos; ++p) s.push_back(dot(qi, k.data().data() + (p - l.key_start) * kWidth + h * kHeadDim) * l.scale);
      s = softmax(s);
      double* o = out.data() + i * kWidth + h * kHeadDim;
      for (size_t j = 0; j < s.size(); ++j)
        for (int64_t t = 0; t < kHeadDim; ++t)
          o[t] += s[j] * v.data()[(lo - l.key_start + static_cast<int64_t>(j)) * kWidth + h * kHeadDim + t];
      if (mem.empty()) continue;
      const ops::MemoryBlock& b = mem[static_cast<size_t>(c - first_chunk)];
      const float* qmi = qm->data().data() + i * kWidth + h * kHeadDim;
      for (int64_t b0 = 0; b0 < b.rows(); b0 += b.block_rows) {
        std::vector<double> sm;
        for (int64_t r = b0; r < b0 + b.block_rows; ++r)
          sm.push_back(dot(qmi, b.keys.data().data() + r * kWidth + h * kHeadDim) * l.scale);
        sm = softmax(sm);
        for (int64_t r = 0; r < b.block_rows; ++r)
          for (int64_t t = 0; t < kHeadDim; ++t)
            o[t] += gate[static_cast<size_t>(h)] * sm[static_cast<size_t>(r)] *
                    b.values.data()[(b0 + r) * kWidth + h * kHeadDim + t];
      }
    }
  }
  return out;
}

double max_diff(std::span<const float> a, const std::vector<double>& b) {
  double m = 0.0;
  for (size_t i = 0; i < b.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(RetrievalAttention, SingleRowSingleChunkMatchesDenseOracle) {
  const Tensor q = random_rows(1, 1), k = random_rows(7, 2), v = random_rows(7, 3), qm = random_rows(1, 4);
  std::vector<ops::MemoryBlock> mem{{random_rows(kTau, 5), random_rows(kTau, 6), kTau}};
  const Tensor gate = Tensor::from({kHeads}, {1.0f, 1.0f});
  const auto l = layout(6, 0, 2);
  const Tensor out = ops::retrieval_causal_attention(q, k, v, &qm, mem, &gate, l);
  EXPECT_LT(max_diff(out.data(), dense_oracle(q, k, v, &qm, mem, {1.0f, 1.0f}, l)), 1e-6);
}

TEST(RetrievalAttention, MultiChunkRowsMatchDenseOracle) {
  // Rows 5..14 cover chunks 1, 2 and 3; chunk 3's window starts at 8.
  const auto l = layout(5, 0, 2);
  const Tensor q = random_rows(10, 11), k = random_rows(15, 12), v = random_rows(15, 13), qm = random_rows(10, 14);
  std::vector<ops::MemoryBlock> mem{{random_rows(kTau, 15), random_rows(kTau, 16), kTau},
                                    {},
                                    {random_rows(3 * kTau, 17), random_rows(3 * kTau, 18), kTau}};
  const std::vector<float> g{0.7f, -1.3f};
  const Tensor gate = Tensor::from({kHeads}, g);
  ops::AttentionTrace trace;
  const Tensor out = ops::retrieval_causal_attention(q, k, v, &qm, mem, &gate, l, nullptr, &trace);
  EXPECT_LT(max_diff(out.data(), dense_oracle(q, k, v, &qm, mem, g, l)), 1e-6);
  EXPECT_EQ(trace.max_local_width, 2 * kTau);
  EXPECT_EQ(trace.max_row_width, 7 + 3 * kTau);
}

TEST(RetrievalAttention, ZeroGateIsPlainLocalAttention) {
  const auto l = layout(8, 0, 2);
  const Tensor q = random_rows(8, 21), k = random_rows(16, 22), v = random_rows(16, 23), qm = random_rows(8, 24);
  std::vector<ops::MemoryBlock> mem{{random_rows(2 * kTau, 25, 5.0f), random_rows(2 * kTau, 26, 5.0f), kTau},
                                    {random_rows(kTau, 27, 5.0f), random_rows(kTau, 28, 5.0f), kTau}};
  const Tensor zero = Tensor::zeros({kHeads});
  const Tensor with = ops::retrieval_causal_attention(q, k, v, &qm, mem, &zero, l);
  const Tensor without = ops::retrieval_causal_attention(q, k, v, nullptr, {}, nullptr, l);
  double m = 0.0;
  for (int64_t i = 0; i < with.numel(); ++i) m = std::max(m, static_cast<double>(std::abs(with.at(i) - without.at(i))));
  EXPECT_LT(m, 1e-6);
}

TEST(RetrievalAttention, EachBranchNormalizesSeparately) {
  // With all-ones values in one branch and zeros in the other, the output
  // reads back the total weight of that branch.
  const auto l = layout(4, 0, 2);
  const Tensor q = random_rows(4, 31, 3.0f), k = random_rows(8, 32, 3.0f), qm = random_rows(4, 33, 3.0f);
  const Tensor mem_keys = random_rows(3 * kTau, 34, 3.0f);
  const Tensor ones_local = Tensor::full({8, kWidth}, 1.0f), zeros_local = Tensor::zeros({8, kWidth});
  const Tensor ones_mem = Tensor::full({3 * kTau, kWidth}, 1.0f), zeros_mem = Tensor::zeros({3 * kTau, kWidth});
  const Tensor gate = Tensor::full({kHeads}, 1.0f);

  std::vector<ops::MemoryBlock> mem{{mem_keys, ones_mem, kTau}};
  const Tensor memory_mass = ops::retrieval_causal_attention(q, k, zeros_local, &qm, mem, &gate, l);
  for (float x : memory_mass.data()) EXPECT_NEAR(x, 3.0f, 1e-6);

  mem[0].values = zeros_mem;
  const Tensor local_mass = ops::retrieval_causal_attention(q, k, ones_local, &qm, mem, &gate, l);
  for (float x : local_mass.data()) EXPECT_NEAR(x, 1.0f, 1e-6);
}

TEST(RetrievalAttention, RejectsInconsistentInputs) {
  const auto l = layout(8, 4, 2);
  const Tensor q = random_rows(4, 1), k = random_rows(8, 2), v = random_rows(8, 3);
  // The window of chunk 2 starts at 4 = key_start; fine. Chunk 2 at key_start 5 is not.
  EXPECT_NO_THROW(ops::retrieval_causal_attention(q, k, v, nullptr, {}, nullptr, l));
  EXPECT_THROW(ops::retrieval_causal_attention(q, random_rows(7, 2), random_rows(7, 3), nullptr, {}, nullptr,
                                               layout(8, 5, 2)),
               ShapeError);
  const Tensor gate = Tensor::zeros({kHeads});
  std::vector<ops::MemoryBlock> none;
  std::vector<ops::MemoryBlock> one{{random_rows(kTau, 4), random_rows(kTau, 5), kTau}};
  EXPECT_THROW(ops::retrieval_causal_attention(q, k, v, nullptr, one, &gate, l), ShapeError);
  const Tensor q2 = random_rows(8, 6), k2 = random_rows(12, 7), v2 = random_rows(12, 8);
  EXPECT_THROW(ops::retrieval_causal_attention(q2, k2, v2, &q2, one, &gate, l), ShapeError);
}

TEST(PositionRemap, PositionZeroRotationIsIdentity) {
  const Tensor x = random_rows(6, 41).view({6, kHeads, kHeadDim});
  const Tensor y = ops::apply_rope(x, std::vector<int64_t>(6, 0), kHeadDim);
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_LT(std::abs(x.at(i) - y.at(i)), 1e-7);
}

TEST(PositionRemap, RetrievedScoresIgnoreWindowOffset) {
  // A one-chunk window makes the first upper layer's input fully determined
  // by the activation rows, so the same rows at chunk 2 and chunk 5 must
  // produce the same retrieved-branch scores.
  ModelConfig c = memlong::testing::tiny_config();
  c.local_window = c.chunk_size;
  c.retrieval_layers = {3};
  Model m(c);
  for (NamedTensor& nt : m.parameters())
    if (!nt.name.ends_with("norm")) for (float& w : nt.tensor.data()) w *= 20.0f;
  m.set_gates(0.5f);
  const int64_t tau = c.chunk_size, d = c.d_model;

  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::vector<float> hidden(static_cast<size_t>(tau * d));
  for (float& x : hidden) x = n(rng);
  RetrievedContext ctx;
  ctx.chunk_indices = {0, 1};
  std::vector<float> kv(static_cast<size_t>(2 * tau * d));
  for (float& x : kv) x = n(rng);
  ctx.keys = Tensor::from({2 * tau, c.n_heads, c.head_dim()}, kv);
  for (float& x : kv) x = n(rng);
  ctx.values = Tensor::from({2 * tau, c.n_heads, c.head_dim()}, kv);
  const std::vector<RetrievedContext> contexts{ctx};

  auto scores_at = [&](int64_t chunk) {
    LayerActivation act;
    act.hidden = Tensor::from({tau, d}, hidden);
    act.start_pos = chunk * tau;
    std::vector<float> scores;
    ops::AttentionTrace trace;
    trace.memory_scores = &scores;
    m.run_upper(act, &contexts, nullptr, nullptr, &trace);
    return scores;
  };
  const std::vector<float> near = scores_at(2), far = scores_at(5), farther = scores_at(400);
  ASSERT_EQ(near.size(), static_cast<size_t>(c.n_heads * tau * 2 * tau));
  double worst = 0.0, spread = 0.0;
  for (size_t i = 0; i < near.size(); ++i) {
    worst = std::max({worst, static_cast<double>(std::abs(near[i] - far[i])),
                      static_cast<double>(std::abs(near[i] - farther[i]))});
    spread = std::max(spread, static_cast<double>(std::abs(near[i])));
  }
  EXPECT_LT(worst, 1e-6);
  EXPECT_EQ(near, far);
  EXPECT_GT(spread, 0.1);
}

#pragma once

// Differentiable tensor operations. Each op computes its forward result
// eagerly; when `tape` is non-null and an input requires gradients, it also
// records a closure that back-propagates into those inputs.

#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "memlong/tensor.hpp"

namespace memlong::ops {

inline constexpr float kMaskedOut = -std::numeric_limits<float>::infinity();

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor add(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape = nullptr);
Tensor scale(const Tensor& a, float factor, Tape* tape = nullptr);
Tensor sum(const Tensor& a, Tape* tape = nullptr);
Tensor concat_rows(const Tensor& a, const Tensor& b, Tape* tape = nullptr);

// Row-wise softmax over x[r, c]. `mask` entries must be 0 or -inf; masked
// outputs are exactly 0. Throws NumericalError on a fully masked row.
Tensor softmax_rows(const Tensor& x, const Tensor* mask = nullptr, Tape* tape = nullptr);

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps, Tape* tape = nullptr);
// silu(gate) * up, elementwise.
Tensor swiglu(const Tensor& gate, const Tensor& up, Tape* tape = nullptr);
Tensor embedding(const Tensor& table, std::span<const int32_t> ids, Tape* tape = nullptr);
// Mean token negative log-likelihood of `targets` under row-softmax(logits).
Tensor cross_entropy(const Tensor& logits, std::span<const int32_t> targets, Tape* tape = nullptr);

// Precomputed rotary angles for a list of positions.
class RopeTable {
 public:
  RopeTable(std::span<const int64_t> positions, int64_t head_dim, double base = 10000.0);
  int64_t size() const { return rows_; }
  int64_t head_dim() const { return head_dim_; }
  float cos_at(int64_t row, int64_t pair) const { return cos_[static_cast<size_t>(row * half_ + pair)]; }
  float sin_at(int64_t row, int64_t pair) const { return sin_[static_cast<size_t>(row * half_ + pair)]; }

 private:
  int64_t rows_ = 0;
  int64_t head_dim_ = 0;
  int64_t half_ = 0;
  std::vector<float> cos_;
  std::vector<float> sin_;
};

// Rotates each (2j, 2j+1) pair of every head vector in x[seq, heads*head_dim]
// (or x[seq, heads, head_dim]) by position * base^(-2j/head_dim).
Tensor apply_rope(const Tensor& x, const RopeTable& table, Tape* tape = nullptr);
Tensor apply_rope(const Tensor& x, std::span<const int64_t> positions, int64_t head_dim, Tape* tape = nullptr);

// Retrieved keys/values attended by one query chunk: rows are grouped into
// consecutive blocks of `block_rows`, one per retrieved chunk; each block is
// normalized by its own softmax.
struct MemoryBlock {
  Tensor keys;    // [R, heads*head_dim], rotary position 0
  Tensor values;  // [R, heads*head_dim]
  int64_t block_rows = 0;

  int64_t rows() const { return keys.defined() ? keys.rows() : 0; }
};

struct AttentionLayout {
  int64_t n_heads = 1;
  int64_t head_dim = 1;
  int64_t query_start = 0;  // absolute position of query row 0
  int64_t key_start = 0;    // absolute position of key row 0
  int64_t chunk_size = 1;   // tau
  int64_t window_chunks = 1;  // local window in chunks, including the query's own chunk
  float scale = 1.0f;
};

struct AttentionTrace {
  int64_t max_row_width = 0;  // local keys + retrieved keys seen by one query row
  int64_t max_local_width = 0;
  // When set, receives the scaled retrieved-branch scores (before softmax) of
  // every chunk group and head, in evaluation order.
  std::vector<float>* memory_scores = nullptr;
};

// Retrieval causal attention. A query at absolute position p in chunk c sees
// the local keys at positions [max(0, c-W+1)*tau, p] through one softmax, and
// each retrieved chunk of memory[c - first_chunk] through its own softmax
// whose weights are multiplied by gate[head]:
//   out = gate * concat_i(softmax(q_mem K_i^T * scale)) [V_i] + softmax(q K^T * scale) V
// `memory` is either empty or holds one block per query chunk touched by the
// rows of `q`, in chunk order. Memory keys and values receive no gradient.
Tensor retrieval_causal_attention(const Tensor& q, const Tensor& keys, const Tensor& values,
                                  const Tensor* q_memory, std::span<const MemoryBlock> memory,
                                  const Tensor* gate, const AttentionLayout& layout, Tape* tape = nullptr,
                                  AttentionTrace* trace = nullptr);

}  // namespace memlong::ops

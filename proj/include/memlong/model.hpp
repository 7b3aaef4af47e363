#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "memlong/config.hpp"
#include "memlong/memory_bank.hpp"
#include "memlong/ops.hpp"
#include "memlong/retriever.hpp"
#include "memlong/tensor.hpp"

namespace memlong {

// Weights of one pre-norm block. Linear weights are stored [in, out].
struct LayerParams {
  Tensor attn_norm;  // [d]
  Tensor wq, wk, wv, wo;  // [d, d]
  Tensor ffn_norm;   // [d]
  Tensor w_gate, w_up;  // [d, ffn]
  Tensor w_down;     // [ffn, d]
  Tensor gate;       // [heads], retrieval layers only
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Rolling attention cache of one layer: rotary-encoded keys and values for
// absolute positions [start, start + length).
struct LayerKV {
  std::vector<float> keys;
  std::vector<float> values;
  int64_t start = 0;
  int64_t length = 0;
};

struct KVCacheSet {
  std::vector<LayerKV> layers;
  int64_t next_position = 0;

  // Drops cached rows before absolute position `pos` in every layer.
  void trim_before(int64_t pos, int64_t width);
  int64_t max_rows() const;
};

// Output of the frozen lower stack: hidden states after the memory layer and
// that layer's key projections (before rotary encoding) and values.
struct LayerActivation {
  Tensor hidden;         // [n, d]
  Tensor memory_keys;    // [n, d]
  Tensor memory_values;  // [n, d]
  int64_t start_pos = 0;

  int64_t rows() const { return hidden.rows(); }
};

// Result of a teacher-forced pass over one document with the in-document
// memory simulated chunk by chunk.
struct DocumentForward {
  Tensor logits;  // [n, vocab]
  std::vector<RetrievedContext> retrieved;  // one per chunk touched
  std::vector<ChunkEmbedding> embeddings;   // one per full chunk
  LayerActivation lower;
  int64_t retrieval_events = 0;
  int64_t retrieved_chunks = 0;
  ops::AttentionTrace trace;
};

class Model {
 public:
  explicit Model(const ModelConfig& config);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  const ChunkEmbedder& embedder() const { return embedder_; }

  // Every parameter in a fixed order: embedding, layers bottom-up, final
  // norm, output head. Gate tensors follow the weights of their layer.
  std::vector<NamedTensor> parameters() const;
  std::vector<NamedTensor> trainable_parameters() const;
  // Layer numbers are 1-based; layer <= memory_layer is the lower stack.
  bool is_lower_layer(int64_t layer) const { return layer <= config_.memory_layer; }

  // Sets requires_grad per group. Disabling clears gradient buffers.
  void set_trainable(bool lower, bool upper, bool gates);
  void set_gates(float value);
  // Copies every tensor present in both models with the same name and shape
  // (gates included only when both models carry them). Throws ConfigError on
  // an architecture mismatch.
  void copy_weights_from(const Model& other);
  Model clone() const;

  Tensor& embedding_table() { return embed_; }
  LayerParams& layer(int64_t one_based) { return layers_[static_cast<size_t>(one_based - 1)]; }
  const LayerParams& layer(int64_t one_based) const { return layers_[static_cast<size_t>(one_based - 1)]; }

  // Lower stack over `tokens` at absolute positions starting at
  // cache->next_position (or 0 without a cache). Cached keys feed the local
  // window; new keys are appended to the cache. Throws ConfigError when more
  // than local_window tokens are passed at once.
  LayerActivation run_lower(std::span<const int32_t> tokens, KVCacheSet* cache = nullptr, Tape* tape = nullptr,
                            ops::AttentionTrace* trace = nullptr) const;

  // Upper stack and output head. `retrieved` holds one context per chunk
  // touched by the activation rows, in chunk order, or is null to run without
  // memory. Throws ConfigError if retrieval layers exist and the context count
  // is wrong, and LeakageError if a context names a chunk inside or after the
  // query chunk's local window.
  Tensor run_upper(const LayerActivation& act, const std::vector<RetrievedContext>* retrieved,
                   KVCacheSet* cache = nullptr, Tape* tape = nullptr, ops::AttentionTrace* trace = nullptr) const;

  // Plain windowed-causal forward of the whole stack, no memory.
  Tensor forward_baseline(std::span<const int32_t> tokens, Tape* tape = nullptr) const;

  // Teacher-forced pass over one document. Lower stack over the whole
  // document, then for chunk i: retrieve with the embedding of chunk i-1 from
  // a bank holding chunks < i (excluding the local window), then append chunk
  // i. A bank capacity of 0 disables memory.
  DocumentForward forward_document(std::span<const int32_t> tokens, const BankConfig& bank, Tape* tape = nullptr) const;

  // Embedding of each full chunk of the memory-layer hidden states.
  std::vector<ChunkEmbedding> chunk_embeddings(const LayerActivation& act) const;
  ChunkEmbedding chunk_embedding(const LayerActivation& act, int64_t first_row) const;
  MemoryEntry make_entry(const LayerActivation& act, int64_t first_row, int64_t chunk_id) const;

  KVCacheSet make_cache() const;
  // First chunk of the local window of chunk `c`.
  int64_t window_first_chunk(int64_t c) const { return std::max<int64_t>(0, c - config_.window_chunks() + 1); }

 private:
  LayerActivation lower_impl(std::span<const int32_t> tokens, KVCacheSet* cache, Tape* tape,
                             ops::AttentionTrace* trace) const;
  Tensor block_forward(int64_t layer, const Tensor& x, int64_t start_pos, LayerKV* cache,
                       std::span<const ops::MemoryBlock> memory, Tensor* capture_k, Tensor* capture_v, Tape* tape,
                       ops::AttentionTrace* trace) const;
  Tensor embed_tokens(std::span<const int32_t> tokens, Tape* tape) const;

  ModelConfig config_;
  Tensor embed_;
  std::vector<LayerParams> layers_;
  Tensor final_norm_;
  Tensor lm_head_;
  ChunkEmbedder embedder_;
};

}  // namespace memlong

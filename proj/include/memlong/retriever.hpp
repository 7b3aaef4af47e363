#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "memlong/tensor.hpp"

namespace memlong {

// Unit-norm retrieval representation of one chunk.
struct ChunkEmbedding {
  std::vector<float> vector;

  int64_t dim() const { return static_cast<int64_t>(vector.size()); }
};

// Frozen chunk embedder: mean-pool the memory-layer hidden states of a chunk,
// project with a fixed Gaussian matrix drawn from `seed`, L2-normalize. The
// projection is regenerated from the seed, so only the seed is persisted.
class ChunkEmbedder {
 public:
  ChunkEmbedder(int64_t d_model, int64_t d_ret, uint64_t seed);

  // `hidden` holds exactly `chunk_rows` rows of d_model floats. Throws
  // ShapeError on a row-count mismatch and NumericalError when the projected
  // vector is zero.
  ChunkEmbedding embed(std::span<const float> hidden, int64_t chunk_rows) const;
  ChunkEmbedding embed(const Tensor& hidden, int64_t chunk_rows) const;

  int64_t d_model() const { return d_model_; }
  int64_t d_ret() const { return d_ret_; }
  uint64_t seed() const { return seed_; }

 private:
  int64_t d_model_;
  int64_t d_ret_;
  uint64_t seed_;
  std::vector<float> projection_;  // [d_model, d_ret]
};

float cosine(const ChunkEmbedding& a, std::span<const float> b);

struct SearchHit {
  int64_t chunk_id = 0;
  float score = 0.0f;

  bool operator==(const SearchHit&) const = default;
};

// Embedding matrix keyed by chunk id. Rows stay in insertion order, which is
// ascending chunk id because ids are appended monotonically.
class EmbeddingIndex {
 public:
  explicit EmbeddingIndex(int64_t dim) : dim_(dim) {}

  void add(int64_t chunk_id, const ChunkEmbedding& embedding);
  // Keeps the rows whose position is flagged in `keep` (size() entries).
  void retain(const std::vector<bool>& keep);
  void clear();

  int64_t dim() const { return dim_; }
  int64_t size() const { return static_cast<int64_t>(ids_.size()); }
  int64_t id_at(int64_t row) const { return ids_[static_cast<size_t>(row)]; }
  std::span<const float> row(int64_t r) const {
    return {matrix_.data() + r * dim_, static_cast<size_t>(dim_)};
  }
  const std::vector<int64_t>& ids() const { return ids_; }
  const std::vector<float>& matrix() const { return matrix_; }

 private:
  int64_t dim_;
  std::vector<int64_t> ids_;
  std::vector<float> matrix_;
};

// The k highest-cosine entries with chunk id < exclude_from, best first;
// equal scores rank the smaller chunk id first. Returns fewer than k hits when
// fewer entries are eligible. Throws std::invalid_argument when k < 1.
std::vector<SearchHit> top_k_search(const ChunkEmbedding& query, const EmbeddingIndex& index, int64_t k,
                                    int64_t exclude_from);

}  // namespace memlong

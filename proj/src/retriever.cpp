#include "memlong/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

#include "memlong/errors.hpp"

namespace memlong {

ChunkEmbedder::ChunkEmbedder(int64_t d_model, int64_t d_ret, uint64_t seed)
    : d_model_(d_model), d_ret_(d_ret), seed_(seed) {
  if (d_model < 1 || d_ret < 1) throw ConfigError("embedder dimensions must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f / std::sqrt(static_cast<float>(d_ret)));
  projection_.resize(static_cast<size_t>(d_model * d_ret));
  for (float& w : projection_) w = normal(rng);
}

ChunkEmbedding ChunkEmbedder::embed(std::span<const float> hidden, int64_t chunk_rows) const {
  if (chunk_rows < 1 || static_cast<int64_t>(hidden.size()) != chunk_rows * d_model_) {
    throw ShapeError("embed_chunk: expected " + std::to_string(chunk_rows) + " rows of " + std::to_string(d_model_) +
                     " values, got " + std::to_string(hidden.size()) + " values");
  }
  std::vector<float> pooled(static_cast<size_t>(d_model_), 0.0f);
  for (int64_t r = 0; r < chunk_rows; ++r)
    for (int64_t j = 0; j < d_model_; ++j) pooled[j] += hidden[static_cast<size_t>(r * d_model_ + j)];
  const float inv_rows = 1.0f / static_cast<float>(chunk_rows);
  for (float& v : pooled) v *= inv_rows;

  ChunkEmbedding out;
  out.vector.assign(static_cast<size_t>(d_ret_), 0.0f);
  for (int64_t i = 0; i < d_model_; ++i) {
    const float p = pooled[i];
    const float* w = projection_.data() + i * d_ret_;
    for (int64_t j = 0; j < d_ret_; ++j) out.vector[j] += p * w[j];
  }
  float norm2 = 0.0f;
  for (float v : out.vector) norm2 += v * v;
  if (!(norm2 > 0.0f) || !std::isfinite(norm2)) {
    throw NumericalError("embed_chunk: projected vector has zero or non-finite norm");
  }
  const float inv = 1.0f / std::sqrt(norm2);
  for (float& v : out.vector) v *= inv;
  return out;
}

ChunkEmbedding ChunkEmbedder::embed(const Tensor& hidden, int64_t chunk_rows) const {
  if (hidden.rows() != chunk_rows) {
    throw ShapeError("embed_chunk: expected " + std::to_string(chunk_rows) + " rows, got " +
                     std::to_string(hidden.rows()));
  }
  return embed(hidden.data(), chunk_rows);
}

float cosine(const ChunkEmbedding& a, std::span<const float> b) {
  if (static_cast<size_t>(a.dim()) != b.size()) throw ShapeError("cosine: dimension mismatch");
  float dot = 0.0f;
  for (size_t i = 0; i < b.size(); ++i) dot += a.vector[i] * b[i];
  return dot;
}

void EmbeddingIndex::add(int64_t chunk_id, const ChunkEmbedding& embedding) {
  if (embedding.dim() != dim_) {
    throw ShapeError("embedding index: dimension " + std::to_string(embedding.dim()) + " != " + std::to_string(dim_));
  }
  if (!ids_.empty() && chunk_id <= ids_.back()) {
    throw std::invalid_argument("embedding index: chunk ids must increase");
  }
  ids_.push_back(chunk_id);
  matrix_.insert(matrix_.end(), embedding.vector.begin(), embedding.vector.end());
}

void EmbeddingIndex::retain(const std::vector<bool>& keep) {
  if (keep.size() != ids_.size()) throw std::invalid_argument("embedding index: keep mask size mismatch");
  size_t out = 0;
  for (size_t r = 0; r < ids_.size(); ++r) {
    if (!keep[r]) continue;
    if (out != r) {
      ids_[out] = ids_[r];
      std::copy_n(matrix_.begin() + static_cast<int64_t>(r) * dim_, dim_,
                  matrix_.begin() + static_cast<int64_t>(out) * dim_);
    }
    ++out;
  }
  ids_.resize(out);
  matrix_.resize(out * static_cast<size_t>(dim_));
}

void EmbeddingIndex::clear() {
  ids_.clear();
  matrix_.clear();
}

std::vector<SearchHit> top_k_search(const ChunkEmbedding& query, const EmbeddingIndex& index, int64_t k,
                                    int64_t exclude_from) {
  if (k < 1) throw std::invalid_argument("top_k_search: k must be >= 1");
  std::vector<SearchHit> hits;
  for (int64_t r = 0; r < index.size(); ++r) {
    const int64_t id = index.id_at(r);
    if (id >= exclude_from) break;  // ids ascend with row order
    hits.push_back({id, cosine(query, index.row(r))});
  }
  const auto better = [](const SearchHit& a, const SearchHit& b) {
    return a.score != b.score ? a.score > b.score : a.chunk_id < b.chunk_id;
  };
  const size_t keep = std::min(hits.size(), static_cast<size_t>(k));
  std::partial_sort(hits.begin(), hits.begin() + static_cast<int64_t>(keep), hits.end(), better);
  hits.resize(keep);
  return hits;
}

}  // namespace memlong

#pragma once

#include <cstdint>
#include <functional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "memlong/config.hpp"
#include "memlong/retriever.hpp"
#include "memlong/tensor.hpp"

namespace memlong {

// One cached chunk: memory-layer keys (before rotary encoding) and values,
// the chunk's retrieval embedding, and its retrieval counter.
struct MemoryEntry {
  int64_t chunk_id = 0;
  uint64_t seq_no = 0;
  Tensor keys;    // [tau, heads, head_dim]
  Tensor values;  // [tau, heads, head_dim]
  ChunkEmbedding embedding;
  uint64_t counter = 0;
};

// K-V of the retrieved chunks, concatenated in ascending chunk order.
struct RetrievedContext {
  std::vector<int64_t> chunk_indices;
  Tensor keys;    // [hits*tau, heads, head_dim]
  Tensor values;  // [hits*tau, heads, head_dim]

  bool empty() const { return chunk_indices.empty(); }
  int64_t rows() const { return keys.defined() ? keys.rows() : 0; }
};

struct EvictionReport {
  bool triggered = false;
  int64_t size_before = 0;
  int64_t size_after = 0;
  std::vector<int64_t> kept_newest;
  std::vector<int64_t> dropped_oldest;
  std::vector<int64_t> evicted_middle;  // in eviction order
  std::vector<int64_t> kept_middle;

  std::string to_json_line() const;
};

// The ret-mem store. Entries and embedding-index rows are kept in insertion
// order and always change together.
//
// Thread safety: retrieve_kv() may run concurrently with itself (counters are
// bumped atomically); append_entry(), dynamic_update() and the mutators need
// exclusive access and take the writer lock.
class MemoryBank {
 public:
  MemoryBank(BankConfig config, int64_t chunk_size, int64_t n_heads, int64_t head_dim, int64_t d_ret);

  MemoryBank(const MemoryBank&) = delete;
  MemoryBank& operator=(const MemoryBank&) = delete;
  MemoryBank(MemoryBank&& other) noexcept;
  MemoryBank& operator=(MemoryBank&& other) noexcept;

  // Stores the entry with the next seq_no and a zero counter. Runs
  // dynamic_update() when the bank grows past capacity. Throws on shape
  // mismatch or a chunk id not above every stored id. A zero-capacity bank
  // is disabled and stores nothing.
  void append_entry(MemoryEntry entry);

  // top_k_search over entries with chunk id < exclude_from; bumps each hit's
  // counter once and returns the hits' K-V in ascending chunk order.
  RetrievedContext retrieve_kv(const ChunkEmbedding& query, int64_t k, int64_t exclude_from);

  // Overflow eviction: keep the newest ceil(10%), drop the oldest floor(10%),
  // then evict the lowest-counter middle entries (older first on ties) until
  // ceil(50% of capacity) remain. No-op report when size <= capacity.
  EvictionReport dynamic_update();

  void reset();
  // Restores a serialized entry verbatim (seq_no and counter included).
  void restore_entry(MemoryEntry entry, uint64_t next_seq_no);

  int64_t size() const;
  bool empty() const { return size() == 0; }
  const BankConfig& config() const { return config_; }
  int64_t chunk_size() const { return chunk_size_; }
  int64_t n_heads() const { return n_heads_; }
  int64_t head_dim() const { return head_dim_; }
  int64_t d_ret() const { return index_.dim(); }
  uint64_t next_seq_no() const { return next_seq_; }
  uint64_t counter_total() const;

  // Snapshot accessors for tests, inspection and serialization; not for use
  // concurrently with writers.
  const std::vector<MemoryEntry>& entries() const { return entries_; }
  const EmbeddingIndex& index() const { return index_; }
  const std::vector<EvictionReport>& eviction_log() const { return log_; }
  void set_eviction_listener(std::function<void(const EvictionReport&)> fn) { listener_ = std::move(fn); }

 private:
  void check_entry(const MemoryEntry& e) const;
  EvictionReport dynamic_update_locked();

  BankConfig config_;
  int64_t chunk_size_;
  int64_t n_heads_;
  int64_t head_dim_;
  std::vector<MemoryEntry> entries_;
  EmbeddingIndex index_;
  uint64_t next_seq_ = 0;
  std::vector<EvictionReport> log_;
  std::function<void(const EvictionReport&)> listener_;
  mutable std::shared_mutex mutex_;
};

}  // namespace memlong

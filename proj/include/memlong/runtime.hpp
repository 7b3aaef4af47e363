#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "memlong/config.hpp"
#include "memlong/corpus.hpp"
#include "memlong/memory_bank.hpp"
#include "memlong/model.hpp"

namespace memlong {

struct SessionStats {
  int64_t tokens_fed = 0;
  int64_t chunks_completed = 0;
  int64_t retrieval_events = 0;
  int64_t retrieved_chunks = 0;
  int64_t max_row_width = 0;         // widest attention row (local + retrieved keys)
  int64_t max_cache_rows = 0;        // longest per-layer local cache
  int64_t peak_live_kv_floats = 0;   // one layer's cache + retrieved K-V + the whole bank
};

// Streaming inference over one token stream. Tokens are processed in pieces
// that never cross a chunk boundary. When a chunk completes, its memory-layer
// K-V and embedding are appended to the bank, the local caches are trimmed to
// the next chunk's window, and retrieval is re-run with the completed chunk's
// embedding for the next chunk. The model must outlive the session; each
// session owns its bank.
class InferenceSession {
 public:
  InferenceSession(const Model& model, const BankConfig& bank);

  // Teacher-forced feed; returns logits [n, vocab] for the fed tokens.
  Tensor feed(std::span<const int32_t> tokens);
  // feed() without keeping logits other than the last row.
  void encode_prefix(std::span<const int32_t> prefix);
  void encode_prefix(const TokenSeq& prefix) { encode_prefix(std::span<const int32_t>(prefix.tokens)); }

  // Greedy decoding from the current state; ties go to the smaller id.
  // Needs at least one fed token.
  TokenSeq generate(int64_t max_new_tokens);

  int64_t position() const { return cache_.next_position; }
  const std::vector<float>& last_logits() const { return last_logits_; }
  const RetrievedContext& current_context() const { return context_; }
  const MemoryBank& bank() const { return bank_; }
  MemoryBank& bank() { return bank_; }
  const SessionStats& stats() const { return stats_; }
  const KVCacheSet& cache() const { return cache_; }
  // Called after every retrieval with (query chunk, retrieved chunk ids).
  void set_retrieval_observer(std::function<void(int64_t, const std::vector<int64_t>&)> fn) {
    observer_ = std::move(fn);
  }

 private:
  Tensor feed_piece(std::span<const int32_t> piece);
  void complete_chunk();

  const Model& model_;
  MemoryBank bank_;
  bool memory_enabled_;
  KVCacheSet cache_;
  RetrievedContext context_;
  std::vector<float> pending_hidden_;
  std::vector<float> pending_keys_;
  std::vector<float> pending_values_;
  std::vector<float> last_logits_;
  SessionStats stats_;
  std::function<void(int64_t, const std::vector<int64_t>&)> observer_;
};

struct LengthResult {
  int64_t length = 0;
  int64_t documents = 0;
  int64_t skipped = 0;
  int64_t scored_tokens = 0;
  double mean_nll = 0.0;
  double perplexity = 0.0;
  int64_t retrieval_events = 0;
  int64_t peak_live_kv_floats = 0;
  int64_t max_row_width = 0;
};

struct EvalReport {
  int64_t memory_size = 0;
  int64_t eval_window = 0;
  std::vector<LengthResult> lengths;
  std::vector<std::string> warnings;
  double seconds = 0.0;

  std::string to_csv() const;
};

// For each length l: each document is cut to its first l tokens, all but the
// last eval_window are encoded as prefix, and the last eval_window tokens are
// scored teacher-forced. PPL = exp(mean NLL) over the scored tokens only.
// Documents shorter than l are skipped with a warning. memory_size 0
// disables memory.
EvalReport eval_perplexity(const Model& model, const std::vector<TokenSeq>& docs,
                           const std::vector<int64_t>& eval_lengths, int64_t memory_size, int64_t eval_window,
                           const BankConfig& bank_template = {});

// Negative log-likelihood of each target under row-softmax(logits), in
// double precision.
std::vector<double> token_nll(std::span<const float> logits, int64_t vocab, std::span<const int32_t> targets);

}  // namespace memlong

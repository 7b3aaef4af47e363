#include "memlong/runtime.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "memlong/errors.hpp"

namespace memlong {

InferenceSession::InferenceSession(const Model& model, const BankConfig& bank)
    : model_(model),
      bank_(bank, model.config().chunk_size, model.config().n_heads, model.config().head_dim(),
            model.config().d_ret),
      memory_enabled_(bank.capacity > 0),
      cache_(model.make_cache()) {}

Tensor InferenceSession::feed(std::span<const int32_t> tokens) {
  const int64_t tau = model_.config().chunk_size;
  const int64_t V = model_.config().vocab_size;
  const int64_t n = static_cast<int64_t>(tokens.size());
  Tensor out = Tensor::zeros({n, V});
  int64_t done = 0;
  while (done < n) {
    const int64_t room = tau - position() % tau;
    const int64_t len = std::min(room, n - done);
    Tensor logits = feed_piece(tokens.subspan(static_cast<size_t>(done), static_cast<size_t>(len)));
    std::copy(logits.data().begin(), logits.data().end(), out.data().begin() + done * V);
    done += len;
  }
  return out;
}

void InferenceSession::encode_prefix(std::span<const int32_t> prefix) {
  const int64_t tau = model_.config().chunk_size;
  size_t done = 0;
  while (done < prefix.size()) {
    const int64_t room = tau - position() % tau;
    const size_t len = std::min(static_cast<size_t>(room), prefix.size() - done);
    feed_piece(prefix.subspan(done, len));
    done += len;
  }
}

Tensor InferenceSession::feed_piece(std::span<const int32_t> piece) {
  const ModelConfig& cfg = model_.config();
  const int64_t d = cfg.d_model, V = cfg.vocab_size, tau = cfg.chunk_size;
  const int64_t n = static_cast<int64_t>(piece.size());

  ops::AttentionTrace trace;
  const LayerActivation act = model_.run_lower(piece, &cache_, nullptr, &trace);
  pending_hidden_.insert(pending_hidden_.end(), act.hidden.data().begin(), act.hidden.data().end());
  pending_keys_.insert(pending_keys_.end(), act.memory_keys.data().begin(), act.memory_keys.data().end());
  pending_values_.insert(pending_values_.end(), act.memory_values.data().begin(), act.memory_values.data().end());

  const std::vector<RetrievedContext> contexts{context_};
  Tensor logits = model_.run_upper(act, &contexts, &cache_, nullptr, &trace);
  last_logits_.assign(logits.data().end() - V, logits.data().end());

  stats_.tokens_fed += n;
  stats_.max_row_width = std::max(stats_.max_row_width, trace.max_row_width);
  stats_.max_cache_rows = std::max(stats_.max_cache_rows, cache_.max_rows());
  const int64_t live = (cache_.max_rows() + context_.rows()) * d * 2 + bank_.size() * tau * d * 2;
  stats_.peak_live_kv_floats = std::max(stats_.peak_live_kv_floats, live);

  if (position() % tau == 0) complete_chunk();
  return logits;
}

void InferenceSession::complete_chunk() {
  const ModelConfig& cfg = model_.config();
  const int64_t tau = cfg.chunk_size, d = cfg.d_model;
  const int64_t chunk = position() / tau - 1;

  LayerActivation act;
  act.hidden = Tensor::from({tau, d}, std::move(pending_hidden_));
  act.memory_keys = Tensor::from({tau, d}, std::move(pending_keys_));
  act.memory_values = Tensor::from({tau, d}, std::move(pending_values_));
  act.start_pos = chunk * tau;
  pending_hidden_.clear();
  pending_keys_.clear();
  pending_values_.clear();
  ++stats_.chunks_completed;

  const int64_t next_chunk = chunk + 1;
  const int64_t window_start = model_.window_first_chunk(next_chunk);
  cache_.trim_before(window_start * tau, d);

  if (!memory_enabled_) return;
  MemoryEntry entry = model_.make_entry(act, 0, chunk);
  const ChunkEmbedding query = entry.embedding;
  bank_.append_entry(std::move(entry));
  context_ = bank_.retrieve_kv(query, cfg.retrieval_k, window_start);
  ++stats_.retrieval_events;
  stats_.retrieved_chunks += static_cast<int64_t>(context_.chunk_indices.size());
  if (observer_) observer_(next_chunk, context_.chunk_indices);
}

TokenSeq InferenceSession::generate(int64_t max_new_tokens) {
  TokenSeq out;
  if (max_new_tokens <= 0) return out;
  if (last_logits_.empty()) throw ConfigError("generate: feed a prompt before generating");
  out.tokens.reserve(static_cast<size_t>(max_new_tokens));
  for (int64_t i = 0; i < max_new_tokens; ++i) {
    int32_t best = 0;
    for (size_t j = 1; j < last_logits_.size(); ++j)
      if (last_logits_[j] > last_logits_[static_cast<size_t>(best)]) best = static_cast<int32_t>(j);
    out.tokens.push_back(best);
    const int32_t tok[1] = {best};
    feed_piece(tok);
  }
  return out;
}

std::vector<double> token_nll(std::span<const float> logits, int64_t vocab, std::span<const int32_t> targets) {
  if (static_cast<int64_t>(logits.size()) != vocab * static_cast<int64_t>(targets.size())) {
    throw ShapeError("token_nll: logits do not match the target count");
  }
  std::vector<double> out(targets.size());
  for (size_t i = 0; i < targets.size(); ++i) {
    const float* row = logits.data() + static_cast<int64_t>(i) * vocab;
    const int32_t t = targets[i];
    if (t < 0 || t >= vocab) throw std::out_of_range("token_nll: target out of range");
    double mx = row[0];
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double s = 0.0;
    for (int64_t j = 0; j < vocab; ++j) s += std::exp(static_cast<double>(row[j]) - mx);
    out[i] = std::log(s) + mx - static_cast<double>(row[t]);
  }
  return out;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os << "length,memory_size,eval_window,documents,skipped,scored_tokens,mean_nll,perplexity\n";
  for (const LengthResult& r : lengths) {
    os << r.length << ',' << memory_size << ',' << eval_window << ',' << r.documents << ',' << r.skipped << ','
       << r.scored_tokens << ',' << r.mean_nll << ',' << r.perplexity << '\n';
  }
  return os.str();
}

EvalReport eval_perplexity(const Model& model, const std::vector<TokenSeq>& docs,
                           const std::vector<int64_t>& eval_lengths, int64_t memory_size, int64_t eval_window,
                           const BankConfig& bank_template) {
  if (eval_window < 1) throw ConfigError("eval window must be >= 1");
  if (memory_size < 0) throw ConfigError("memory size must be >= 0");
  const auto t0 = std::chrono::steady_clock::now();
  EvalReport report;
  report.memory_size = memory_size;
  report.eval_window = eval_window;
  BankConfig bank = bank_template;
  bank.capacity = memory_size;
  const int64_t V = model.config().vocab_size;

  for (int64_t len : eval_lengths) {
    if (len <= eval_window) {
      throw ConfigError("eval length " + std::to_string(len) + " must exceed the eval window " +
                        std::to_string(eval_window));
    }
    LengthResult r;
    r.length = len;
    double nll_sum = 0.0;
    for (const TokenSeq& doc : docs) {
      if (doc.size() < len) {
        ++r.skipped;
        report.warnings.push_back("document '" + doc.source_doc + "' has " + std::to_string(doc.size()) +
                                  " tokens, fewer than eval length " + std::to_string(len) + "; skipped");
        continue;
      }
      const std::span<const int32_t> toks(doc.tokens.data(), static_cast<size_t>(len));
      const int64_t prefix_len = len - eval_window;
      InferenceSession session(model, bank);
      session.encode_prefix(toks.first(static_cast<size_t>(prefix_len)));
      std::vector<float> logits(session.last_logits());
      Tensor rest = session.feed(toks.subspan(static_cast<size_t>(prefix_len), static_cast<size_t>(eval_window - 1)));
      logits.insert(logits.end(), rest.data().begin(), rest.data().end());
      const std::vector<double> nll = token_nll(logits, V, toks.subspan(static_cast<size_t>(prefix_len)));
      for (double x : nll) nll_sum += x;
      r.scored_tokens += static_cast<int64_t>(nll.size());
      ++r.documents;
      r.retrieval_events += session.stats().retrieval_events;
      r.peak_live_kv_floats = std::max(r.peak_live_kv_floats, session.stats().peak_live_kv_floats);
      r.max_row_width = std::max(r.max_row_width, session.stats().max_row_width);
    }
    if (r.scored_tokens > 0) {
      r.mean_nll = nll_sum / static_cast<double>(r.scored_tokens);
      r.perplexity = std::exp(r.mean_nll);
    } else {
      r.mean_nll = std::nan("");
      r.perplexity = std::nan("");
    }
    report.lengths.push_back(r);
  }
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace memlong

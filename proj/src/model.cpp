#include "memlong/model.hpp"

#include <cmath>
#include <map>
#include <random>

#include "memlong/errors.hpp"

namespace memlong {

void KVCacheSet::trim_before(int64_t pos, int64_t width) {
  for (LayerKV& l : layers) {
    const int64_t drop = std::clamp<int64_t>(pos - l.start, 0, l.length);
    if (drop == 0) continue;
    l.keys.erase(l.keys.begin(), l.keys.begin() + drop * width);
    l.values.erase(l.values.begin(), l.values.begin() + drop * width);
    l.start += drop;
    l.length -= drop;
  }
}

int64_t KVCacheSet::max_rows() const {
  int64_t rows = 0;
  for (const LayerKV& l : layers) rows = std::max(rows, l.length);
  return rows;
}

Model::Model(const ModelConfig& config)
    : config_(config), embedder_(config.d_model, config.d_ret, config.embedder_seed) {
  config_.validate();
  const int64_t d = config_.d_model, f = config_.ffn_hidden(), V = config_.vocab_size, H = config_.n_heads;
  embed_ = Tensor::zeros({V, d});
  layers_.resize(static_cast<size_t>(config_.n_layers));
  for (int64_t l = 1; l <= config_.n_layers; ++l) {
    LayerParams& p = layer(l);
    p.attn_norm = Tensor::full({d}, 1.0f);
    p.wq = Tensor::zeros({d, d});
    p.wk = Tensor::zeros({d, d});
    p.wv = Tensor::zeros({d, d});
    p.wo = Tensor::zeros({d, d});
    p.ffn_norm = Tensor::full({d}, 1.0f);
    p.w_gate = Tensor::zeros({d, f});
    p.w_up = Tensor::zeros({d, f});
    p.w_down = Tensor::zeros({f, d});
    if (config_.is_retrieval_layer(l)) p.gate = Tensor::zeros({H});
  }
  final_norm_ = Tensor::full({d}, 1.0f);
  lm_head_ = Tensor::zeros({d, V});

  std::mt19937_64 rng(config_.init_seed);
  const float std_in = 0.02f;
  const float std_out = 0.02f / std::sqrt(2.0f * static_cast<float>(config_.n_layers));
  for (NamedTensor& nt : parameters()) {
    const std::string& name = nt.name;
    const bool is_norm = name.ends_with("norm");
    const bool is_gate = name.ends_with(".gate");
    if (is_norm || is_gate) continue;
    const bool is_out = name.ends_with(".wo") || name.ends_with(".w_down");
    std::normal_distribution<float> normal(0.0f, is_out ? std_out : std_in);
    for (float& w : nt.tensor.data()) w = normal(rng);
  }
  set_trainable(true, true, false);
}

std::vector<NamedTensor> Model::parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"tok_embed", embed_});
  for (int64_t l = 1; l <= config_.n_layers; ++l) {
    const LayerParams& p = layer(l);
    const std::string pre = "layers." + std::to_string(l) + ".";
    out.push_back({pre + "attn_norm", p.attn_norm});
    out.push_back({pre + "wq", p.wq});
    out.push_back({pre + "wk", p.wk});
    out.push_back({pre + "wv", p.wv});
    out.push_back({pre + "wo", p.wo});
    out.push_back({pre + "ffn_norm", p.ffn_norm});
    out.push_back({pre + "w_gate", p.w_gate});
    out.push_back({pre + "w_up", p.w_up});
    out.push_back({pre + "w_down", p.w_down});
    if (p.gate.defined()) out.push_back({pre + "gate", p.gate});
  }
  out.push_back({"final_norm", final_norm_});
  out.push_back({"lm_head", lm_head_});
  return out;
}

std::vector<NamedTensor> Model::trainable_parameters() const {
  std::vector<NamedTensor> out;
  for (NamedTensor& nt : parameters())
    if (nt.tensor.requires_grad()) out.push_back(std::move(nt));
  return out;
}

void Model::set_trainable(bool lower, bool upper, bool gates) {
  embed_.set_requires_grad(lower);
  for (int64_t l = 1; l <= config_.n_layers; ++l) {
    LayerParams& p = layer(l);
    const bool on = is_lower_layer(l) ? lower : upper;
    for (Tensor* t : {&p.attn_norm, &p.wq, &p.wk, &p.wv, &p.wo, &p.ffn_norm, &p.w_gate, &p.w_up, &p.w_down})
      t->set_requires_grad(on);
    if (p.gate.defined()) p.gate.set_requires_grad(gates);
  }
  final_norm_.set_requires_grad(upper);
  lm_head_.set_requires_grad(upper);
}

void Model::set_gates(float value) {
  for (LayerParams& p : layers_)
    if (p.gate.defined())
      for (float& g : p.gate.data()) g = value;
}

void Model::copy_weights_from(const Model& other) {
  const ModelConfig& a = config_;
  const ModelConfig& b = other.config_;
  if (a.n_layers != b.n_layers || a.n_heads != b.n_heads || a.d_model != b.d_model || a.vocab_size != b.vocab_size ||
      a.memory_layer != b.memory_layer) {
    throw ConfigError("copy_weights_from: model architectures differ");
  }
  std::map<std::string, Tensor> source;
  for (NamedTensor& nt : other.parameters()) source.emplace(nt.name, nt.tensor);
  for (NamedTensor& nt : parameters()) {
    const auto it = source.find(nt.name);
    const bool is_gate = nt.name.ends_with(".gate");
    if (it == source.end()) {
      if (is_gate) continue;
      throw ConfigError("copy_weights_from: source lacks tensor " + nt.name);
    }
    if (it->second.shape() != nt.tensor.shape()) {
      throw ConfigError("copy_weights_from: shape of " + nt.name + " differs");
    }
    std::copy(it->second.data().begin(), it->second.data().end(), nt.tensor.data().begin());
  }
}

Model Model::clone() const {
  Model m(config_);
  auto dst = m.parameters();
  auto src = parameters();
  for (size_t i = 0; i < src.size(); ++i) {
    std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.data().begin());
    dst[i].tensor.set_requires_grad(src[i].tensor.requires_grad());
  }
  return m;
}

KVCacheSet Model::make_cache() const {
  KVCacheSet cache;
  cache.layers.resize(static_cast<size_t>(config_.n_layers));
  return cache;
}

Tensor Model::embed_tokens(std::span<const int32_t> tokens, Tape* tape) const {
  return ops::embedding(embed_, tokens, tape);
}

Tensor Model::block_forward(int64_t layer_no, const Tensor& x, int64_t start_pos, LayerKV* cache,
                            std::span<const ops::MemoryBlock> memory, Tensor* capture_k, Tensor* capture_v,
                            Tape* tape, ops::AttentionTrace* trace) const {
  const LayerParams& p = layer(layer_no);
  const int64_t n = x.rows(), d = config_.d_model, dh = config_.head_dim(), tau = config_.chunk_size;

  Tensor h = ops::rms_norm(x, p.attn_norm, config_.norm_eps, tape);
  Tensor q = ops::matmul(h, p.wq, tape);
  Tensor k = ops::matmul(h, p.wk, tape);
  Tensor v = ops::matmul(h, p.wv, tape);
  if (capture_k) *capture_k = k;
  if (capture_v) *capture_v = v;

  std::vector<int64_t> positions(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) positions[static_cast<size_t>(i)] = start_pos + i;
  const ops::RopeTable table(positions, dh, config_.rope_base);
  Tensor qr = ops::apply_rope(q, table, tape);
  Tensor kr = ops::apply_rope(k, table, tape);

  Tensor keys = kr, values = v;
  int64_t key_start = start_pos;
  if (cache && cache->length > 0) {
    if (cache->start + cache->length != start_pos) {
      throw ShapeError("attention cache ends at " + std::to_string(cache->start + cache->length) +
                       " but input starts at " + std::to_string(start_pos));
    }
    Tensor ck = Tensor::from({cache->length, d}, cache->keys);
    Tensor cv = Tensor::from({cache->length, d}, cache->values);
    keys = ops::concat_rows(ck, kr, tape);
    values = ops::concat_rows(cv, v, tape);
    key_start = cache->start;
  }

  Tensor q_mem;
  const bool use_memory = !memory.empty();
  if (use_memory) {
    // Window-relative positions; memory keys sit at position 0.
    std::vector<int64_t> rel(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      const int64_t pos = start_pos + i;
      rel[static_cast<size_t>(i)] = pos - window_first_chunk(pos / tau) * tau;
    }
    q_mem = ops::apply_rope(q, ops::RopeTable(rel, dh, config_.rope_base), tape);
  }

  ops::AttentionLayout layout;
  layout.n_heads = config_.n_heads;
  layout.head_dim = dh;
  layout.query_start = start_pos;
  layout.key_start = key_start;
  layout.chunk_size = tau;
  layout.window_chunks = config_.window_chunks();
  layout.scale = config_.attention_scale();
  Tensor attn = ops::retrieval_causal_attention(qr, keys, values, use_memory ? &q_mem : nullptr, memory,
                                                use_memory ? &p.gate : nullptr, layout, tape, trace);

  Tensor x1 = ops::add(x, ops::matmul(attn, p.wo, tape), tape);
  Tensor h2 = ops::rms_norm(x1, p.ffn_norm, config_.norm_eps, tape);
  Tensor ff = ops::swiglu(ops::matmul(h2, p.w_gate, tape), ops::matmul(h2, p.w_up, tape), tape);
  Tensor out = ops::add(x1, ops::matmul(ff, p.w_down, tape), tape);

  if (cache) {
    if (cache->length == 0) cache->start = start_pos;
    cache->keys.insert(cache->keys.end(), kr.data().begin(), kr.data().end());
    cache->values.insert(cache->values.end(), v.data().begin(), v.data().end());
    cache->length += n;
  }
  return out;
}

LayerActivation Model::lower_impl(std::span<const int32_t> tokens, KVCacheSet* cache, Tape* tape,
                                  ops::AttentionTrace* trace) const {
  if (tokens.empty()) throw ShapeError("model forward needs at least one token");
  LayerActivation act;
  act.start_pos = cache ? cache->next_position : 0;
  Tensor x = embed_tokens(tokens, tape);
  for (int64_t l = 1; l <= config_.memory_layer; ++l) {
    const bool is_memory_layer = l == config_.memory_layer;
    x = block_forward(l, x, act.start_pos, cache ? &cache->layers[static_cast<size_t>(l - 1)] : nullptr, {},
                      is_memory_layer ? &act.memory_keys : nullptr, is_memory_layer ? &act.memory_values : nullptr,
                      tape, trace);
  }
  act.hidden = x;
  if (cache) cache->next_position += static_cast<int64_t>(tokens.size());
  return act;
}

LayerActivation Model::run_lower(std::span<const int32_t> tokens, KVCacheSet* cache, Tape* tape,
                                 ops::AttentionTrace* trace) const {
  if (static_cast<int64_t>(tokens.size()) > config_.local_window) {
    throw ConfigError("run_lower: " + std::to_string(tokens.size()) + " tokens exceed the local window of " +
                      std::to_string(config_.local_window));
  }
  return lower_impl(tokens, cache, tape, trace);
}

Tensor Model::run_upper(const LayerActivation& act, const std::vector<RetrievedContext>* retrieved, KVCacheSet* cache,
                        Tape* tape, ops::AttentionTrace* trace) const {
  const int64_t n = act.rows(), tau = config_.chunk_size, d = config_.d_model;
  const int64_t first_chunk = act.start_pos / tau;
  const int64_t touched = (act.start_pos + n - 1) / tau - first_chunk + 1;

  std::vector<ops::MemoryBlock> blocks;
  bool any_memory = false;
  if (retrieved) {
    if (static_cast<int64_t>(retrieved->size()) != touched) {
      throw ConfigError("run_upper: expected " + std::to_string(touched) + " retrieved contexts, got " +
                        std::to_string(retrieved->size()));
    }
    blocks.resize(static_cast<size_t>(touched));
    for (int64_t c = 0; c < touched; ++c) {
      const RetrievedContext& ctx = (*retrieved)[static_cast<size_t>(c)];
      const int64_t window_start = window_first_chunk(first_chunk + c);
      for (int64_t id : ctx.chunk_indices) {
        if (id >= window_start) {
          throw LeakageError("chunk " + std::to_string(first_chunk + c) + " was handed memory chunk " +
                             std::to_string(id) + " at or after its window start " + std::to_string(window_start));
        }
      }
      if (ctx.empty()) continue;
      const int64_t R = static_cast<int64_t>(ctx.chunk_indices.size()) * tau;
      if (ctx.keys.numel() != R * d || ctx.values.numel() != R * d) {
        throw ShapeError("run_upper: retrieved context size does not match its chunk count");
      }
      ops::MemoryBlock& b = blocks[static_cast<size_t>(c)];
      b.keys = ctx.keys.view({R, d});
      b.values = ctx.values.view({R, d});
      b.block_rows = tau;
      any_memory = true;
    }
  }

  Tensor x = act.hidden;
  for (int64_t l = config_.memory_layer + 1; l <= config_.n_layers; ++l) {
    std::span<const ops::MemoryBlock> mem;
    if (any_memory && config_.is_retrieval_layer(l)) mem = blocks;
    x = block_forward(l, x, act.start_pos, cache ? &cache->layers[static_cast<size_t>(l - 1)] : nullptr, mem,
                      nullptr, nullptr, tape, trace);
  }
  x = ops::rms_norm(x, final_norm_, config_.norm_eps, tape);
  return ops::matmul(x, lm_head_, tape);
}

Tensor Model::forward_baseline(std::span<const int32_t> tokens, Tape* tape) const {
  const LayerActivation act = lower_impl(tokens, nullptr, tape, nullptr);
  return run_upper(act, nullptr, nullptr, tape, nullptr);
}

ChunkEmbedding Model::chunk_embedding(const LayerActivation& act, int64_t first_row) const {
  const int64_t tau = config_.chunk_size, d = config_.d_model;
  if (first_row < 0 || first_row + tau > act.rows()) throw ShapeError("chunk_embedding: rows out of range");
  return embedder_.embed(act.hidden.data().subspan(static_cast<size_t>(first_row * d), static_cast<size_t>(tau * d)),
                         tau);
}

std::vector<ChunkEmbedding> Model::chunk_embeddings(const LayerActivation& act) const {
  std::vector<ChunkEmbedding> out;
  const int64_t tau = config_.chunk_size;
  for (int64_t r = 0; r + tau <= act.rows(); r += tau) out.push_back(chunk_embedding(act, r));
  return out;
}

MemoryEntry Model::make_entry(const LayerActivation& act, int64_t first_row, int64_t chunk_id) const {
  const int64_t tau = config_.chunk_size, d = config_.d_model;
  if (first_row < 0 || first_row + tau > act.rows()) throw ShapeError("make_entry: rows out of range");
  MemoryEntry e;
  e.chunk_id = chunk_id;
  const auto k = act.memory_keys.data().subspan(static_cast<size_t>(first_row * d), static_cast<size_t>(tau * d));
  const auto v = act.memory_values.data().subspan(static_cast<size_t>(first_row * d), static_cast<size_t>(tau * d));
  e.keys = Tensor::from({tau, config_.n_heads, config_.head_dim()}, {k.begin(), k.end()});
  e.values = Tensor::from({tau, config_.n_heads, config_.head_dim()}, {v.begin(), v.end()});
  e.embedding = chunk_embedding(act, first_row);
  return e;
}

DocumentForward Model::forward_document(std::span<const int32_t> tokens, const BankConfig& bank_config,
                                        Tape* tape) const {
  DocumentForward out;
  out.lower = lower_impl(tokens, nullptr, tape, &out.trace);
  const int64_t n = out.lower.rows(), tau = config_.chunk_size;
  const int64_t full = n / tau;
  const int64_t touched = (n + tau - 1) / tau;
  for (int64_t c = 0; c < full; ++c) out.embeddings.push_back(chunk_embedding(out.lower, c * tau));

  MemoryBank bank(bank_config, tau, config_.n_heads, config_.head_dim(), config_.d_ret);
  const bool enabled = bank_config.capacity > 0;
  out.retrieved.resize(static_cast<size_t>(touched));
  for (int64_t c = 0; c < touched; ++c) {
    if (enabled && c >= 1) {
      out.retrieved[static_cast<size_t>(c)] =
          bank.retrieve_kv(out.embeddings[static_cast<size_t>(c - 1)], config_.retrieval_k, window_first_chunk(c));
      ++out.retrieval_events;
      out.retrieved_chunks += static_cast<int64_t>(out.retrieved[static_cast<size_t>(c)].chunk_indices.size());
    }
    if (enabled && c < full) {
      MemoryEntry e;
      e.chunk_id = c;
      const int64_t d = config_.d_model;
      const auto k = out.lower.memory_keys.data().subspan(static_cast<size_t>(c * tau * d), static_cast<size_t>(tau * d));
      const auto v =
          out.lower.memory_values.data().subspan(static_cast<size_t>(c * tau * d), static_cast<size_t>(tau * d));
      e.keys = Tensor::from({tau, config_.n_heads, config_.head_dim()}, {k.begin(), k.end()});
      e.values = Tensor::from({tau, config_.n_heads, config_.head_dim()}, {v.begin(), v.end()});
      e.embedding = out.embeddings[static_cast<size_t>(c)];
      bank.append_entry(std::move(e));
    }
  }
  out.logits = run_upper(out.lower, &out.retrieved, nullptr, tape, &out.trace);
  return out;
}

}  // namespace memlong

#include "memlong/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "memlong/errors.hpp"

namespace memlong {

WindowSampler::WindowSampler(std::vector<TokenSeq> docs, int64_t window, uint64_t seed)
    : window_(window), rng_(seed) {
  if (window < 2) throw ConfigError("sampler window must be >= 2 tokens");
  int64_t total = 0;
  for (TokenSeq& d : docs) {
    const int64_t offsets = d.size() - window + 1;
    if (offsets <= 0) continue;
    total += offsets;
    cumulative_.push_back(total);
    docs_.push_back(std::move(d));
  }
  if (docs_.empty()) {
    throw ConfigError("no document holds a full window of " + std::to_string(window) + " tokens");
  }
}

std::vector<int32_t> WindowSampler::next() {
  std::uniform_int_distribution<int64_t> pick(0, cumulative_.back() - 1);
  const int64_t r = pick(rng_);
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), r);
  const size_t doc = static_cast<size_t>(it - cumulative_.begin());
  const int64_t offset = r - (doc == 0 ? 0 : cumulative_[doc - 1]);
  ++draws_;
  const auto& toks = docs_[doc].tokens;
  return {toks.begin() + offset, toks.begin() + offset + window_};
}

std::vector<std::vector<int32_t>> WindowSampler::next_batch(int64_t count) {
  std::vector<std::vector<int32_t>> out;
  out.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) out.push_back(next());
  return out;
}

std::string WindowSampler::state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void WindowSampler::restore(const std::string& state, int64_t draws) {
  std::istringstream is(state);
  std::mt19937_64 rng;
  is >> rng;
  if (is.fail()) throw FormatError("sampler state is not a valid engine state");
  rng_ = rng;
  draws_ = draws;
}

TrainableSet trainable_set(Phase phase, TrainingPreset preset) {
  if (phase == Phase::kPretrain) return {true, true, false};
  return {preset_trains_lower(preset), true, true};
}

Model make_finetune_model(const Model& pretrained, TrainingPreset preset) {
  ModelConfig cfg = pretrained.config();
  cfg.retrieval_layers = preset_retrieval_layers(preset, pretrained.config());
  Model m(cfg);
  m.copy_weights_from(pretrained);
  m.set_gates(0.0f);
  return m;
}

Trainer::Trainer(Model& model, const TrainConfig& config, const BankConfig& bank)
    : model_(model), config_(config), bank_(bank), optimizer_(config) {
  config_.validate(model.config());
  bank_.validate();
  const TrainableSet t = trainable_set(config_.phase, config_.preset);
  model_.set_trainable(t.lower, t.upper, t.gates);
}

namespace {

void clear_grads(const Model& model) {
  for (NamedTensor& p : model.parameters()) p.tensor.clear_grad();
}

void check_loss(const Tensor& loss, int64_t step, const char* phase) {
  const float v = loss.item();
  if (!std::isfinite(v)) {
    throw NumericalError(std::string(phase) + " step " + std::to_string(step) + ": loss is " +
                         (std::isnan(v) ? "NaN" : "infinite"));
  }
}

}  // namespace

StepStats Trainer::apply_update(StepStats stats) {
  const std::vector<NamedTensor> params = model_.trainable_parameters();
  stats.step = step_;
  stats.lr = learning_rate_at(config_, step_);
  stats.grad_norm = AdamOptimizer::clip_grad_norm(params, config_.grad_clip);
  optimizer_.step(params, stats.lr);
  clear_grads(model_);
  ++step_;
  return stats;
}

StepStats Trainer::pretrain_step(const std::vector<std::vector<int32_t>>& batch) {
  if (config_.phase != Phase::kPretrain) throw ConfigError("pretrain_step needs a pretrain-phase trainer");
  if (batch.empty()) throw ConfigError("pretrain_step: empty batch");
  const auto t0 = std::chrono::steady_clock::now();
  clear_grads(model_);
  StepStats stats;
  const float inv_b = 1.0f / static_cast<float>(batch.size());
  for (const auto& seq : batch) {
    if (seq.size() < 2) throw ConfigError("pretrain_step: sequences need at least 2 tokens");
    const std::span<const int32_t> inputs(seq.data(), seq.size() - 1);
    const std::span<const int32_t> targets(seq.data() + 1, seq.size() - 1);
    Tape tape;
    Tensor logits = model_.forward_baseline(inputs, &tape);
    Tensor loss = ops::cross_entropy(logits, targets, &tape);
    check_loss(loss, step_, "pretrain");
    Tensor scaled = ops::scale(loss, inv_b, &tape);
    tape.backward(scaled);
    stats.loss += static_cast<double>(loss.item()) / static_cast<double>(batch.size());
    stats.tokens += static_cast<int64_t>(inputs.size());
  }
  stats = apply_update(stats);
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return stats;
}

StepStats Trainer::finetune_step(const std::vector<std::vector<int32_t>>& docs) {
  if (config_.phase != Phase::kFinetune) throw ConfigError("finetune_step needs a finetune-phase trainer");
  if (docs.empty()) throw ConfigError("finetune_step: empty batch");
  const auto t0 = std::chrono::steady_clock::now();
  clear_grads(model_);
  StepStats stats;
  const float inv_b = 1.0f / static_cast<float>(docs.size());
  for (const auto& doc : docs) {
    if (doc.size() < 2) throw ConfigError("finetune_step: documents need at least 2 tokens");
    const std::span<const int32_t> inputs(doc.data(), doc.size() - 1);
    const std::span<const int32_t> targets(doc.data() + 1, doc.size() - 1);
    Tape tape;
    DocumentForward fwd = model_.forward_document(inputs, bank_, &tape);
    Tensor loss = ops::cross_entropy(fwd.logits, targets, &tape);
    check_loss(loss, step_, "finetune");
    Tensor scaled = ops::scale(loss, inv_b, &tape);
    tape.backward(scaled);
    stats.loss += static_cast<double>(loss.item()) / static_cast<double>(docs.size());
    stats.tokens += static_cast<int64_t>(inputs.size());
    stats.retrieval_events += fwd.retrieval_events;
    stats.retrieved_chunks += fwd.retrieved_chunks;
  }
  stats = apply_update(stats);
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return stats;
}

StepStats Trainer::train_step(WindowSampler& sampler) {
  const auto batch = sampler.next_batch(config_.batch_size);
  return config_.phase == Phase::kPretrain ? pretrain_step(batch) : finetune_step(batch);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'M', 'E', 'M', 'L', 'O', 'N', 'G', '1'};

struct PayloadWriter {
  nlohmann::json manifest = nlohmann::json::array();
  std::vector<std::span<const float>> chunks;
  int64_t offset = 0;

  void add(const std::string& name, const Shape& shape, std::span<const float> values) {
    manifest.push_back({{"name", name}, {"shape", shape}, {"offset", offset}, {"count", values.size()}});
    chunks.push_back(values);
    offset += static_cast<int64_t>(values.size());
  }
};

void write_u64_le(std::ostream& os, uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void write_floats_le(std::ostream& os, std::span<const float> v) {
  static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model, const AdamOptimizer* optimizer,
                     const CheckpointExtras& extras, const MemoryBank* bank) {
  PayloadWriter w;
  const std::vector<NamedTensor> params = model.parameters();
  for (const NamedTensor& p : params) w.add("param." + p.name, p.tensor.shape(), p.tensor.data());

  nlohmann::json header;
  header["format"] = "MEMLONG1";
  header["version"] = kCheckpointVersion;
  header["model_config"] = model.config();
  header["embedder_seed"] = model.config().embedder_seed;
  header["step"] = extras.step;
  header["sampler"] = {{"state", extras.sampler_state}, {"draws", extras.sampler_draws}};
  header["metadata"] = extras.metadata;
  if (extras.train) header["train_config"] = *extras.train;
  if (extras.bank) header["bank_config"] = *extras.bank;

  if (optimizer) {
    header["optimizer"] = {{"kind", "adam"}, {"steps_taken", optimizer->steps_taken()}};
    for (const auto& [name, mo] : optimizer->moments()) {
      const Shape shape{static_cast<int64_t>(mo.m.size())};
      w.add("adam.m." + name, shape, mo.m);
      w.add("adam.v." + name, shape, mo.v);
    }
  }
  if (bank) {
    nlohmann::json entries = nlohmann::json::array();
    for (size_t i = 0; i < bank->entries().size(); ++i) {
      const MemoryEntry& e = bank->entries()[i];
      entries.push_back({{"chunk_id", e.chunk_id}, {"seq_no", e.seq_no}, {"counter", e.counter}});
      const std::string pre = "bank." + std::to_string(i) + ".";
      w.add(pre + "keys", e.keys.shape(), e.keys.data());
      w.add(pre + "values", e.values.shape(), e.values.data());
      w.add(pre + "embedding", {e.embedding.dim()}, e.embedding.vector);
    }
    header["bank"] = {{"config", bank->config()},
                      {"next_seq_no", bank->next_seq_no()},
                      {"chunk_size", bank->chunk_size()},
                      {"n_heads", bank->n_heads()},
                      {"head_dim", bank->head_dim()},
                      {"d_ret", bank->d_ret()},
                      {"entries", entries}};
  }
  header["tensors"] = w.manifest;
  header["payload_floats"] = w.offset;

  const std::string text = header.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("cannot open checkpoint '" + tmp + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    write_u64_le(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& c : w.chunks) write_floats_le(os, c);
    if (!os) throw ConfigError("failed writing checkpoint '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw ConfigError("cannot move checkpoint into place at '" + path + "'");
  }
}

namespace {

struct ManifestItem {
  Shape shape;
  int64_t offset = 0;
  int64_t count = 0;
};

std::string describe_config_mismatch(const nlohmann::json& a, const nlohmann::json& b) {
  for (auto it = a.begin(); it != a.end(); ++it) {
    if (!b.contains(it.key()) || b.at(it.key()) != it.value()) {
      return it.key() + " (file " + it.value().dump() + ", expected " +
             (b.contains(it.key()) ? b.at(it.key()).dump() : "<absent>") + ")";
    }
  }
  return "unknown field";
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expected) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  const std::string bytes = buf.str();
  const auto fail = [&](const std::string& msg) { throw FormatError("checkpoint '" + path + "': " + msg); };

  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) fail("missing MEMLONG1 magic");
  uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  if (header_len > bytes.size() - 16) fail("header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("header is not valid JSON: ") + e.what());
  }
  if (header.value("format", "") != "MEMLONG1") fail("header format tag is not MEMLONG1");
  if (!header.contains("version") || header["version"] != kCheckpointVersion) {
    fail("unsupported version " + (header.contains("version") ? header["version"].dump() : "<none>") +
         " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  }

  const size_t payload_begin = 16 + header_len;
  const int64_t payload_floats = header.value("payload_floats", int64_t{-1});
  if (payload_floats < 0) fail("header lacks payload_floats");
  if (bytes.size() - payload_begin != static_cast<size_t>(payload_floats) * sizeof(float)) {
    fail("payload holds " + std::to_string(bytes.size() - payload_begin) + " bytes, header declares " +
         std::to_string(payload_floats * 4));
  }
  std::map<std::string, ManifestItem> manifest;
  int64_t expected_offset = 0;
  for (const auto& t : header.at("tensors")) {
    ManifestItem item{t.at("shape").get<Shape>(), t.at("offset").get<int64_t>(), t.at("count").get<int64_t>()};
    if (item.offset != expected_offset || shape_numel(item.shape) != item.count) fail("inconsistent tensor manifest");
    expected_offset += item.count;
    manifest.emplace(t.at("name").get<std::string>(), item);
  }
  if (expected_offset != payload_floats) fail("manifest does not cover the payload");
  const auto floats_of = [&](const std::string& name, const Shape* shape) {
    const auto it = manifest.find(name);
    if (it == manifest.end()) fail("missing tensor " + name);
    if (shape && it->second.shape != *shape) {
      fail("tensor " + name + " has shape " + shape_str(it->second.shape) + ", expected " + shape_str(*shape));
    }
    std::vector<float> v(static_cast<size_t>(it->second.count));
    std::memcpy(v.data(), bytes.data() + payload_begin + it->second.offset * sizeof(float), v.size() * sizeof(float));
    return v;
  };

  ModelConfig cfg;
  try {
    cfg = header.at("model_config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("model_config is malformed: ") + e.what());
  }
  if (expected) {
    const nlohmann::json a = cfg, b = *expected;
    if (a != b) throw ConfigError("checkpoint '" + path + "' model config differs: " + describe_config_mismatch(a, b));
  }

  LoadedCheckpoint out{Model(cfg), std::nullopt, {}, std::nullopt};
  for (NamedTensor& p : out.model.parameters()) {
    const std::vector<float> v = floats_of("param." + p.name, &p.tensor.shape());
    std::copy(v.begin(), v.end(), p.tensor.data().begin());
  }

  CheckpointExtras& ex = out.extras;
  ex.step = header.value("step", int64_t{0});
  if (header.contains("sampler")) {
    ex.sampler_state = header["sampler"].value("state", "");
    ex.sampler_draws = header["sampler"].value("draws", int64_t{0});
  }
  ex.metadata = header.value("metadata", nlohmann::json::object());
  if (header.contains("train_config")) ex.train = header["train_config"].get<TrainConfig>();
  if (header.contains("bank_config")) ex.bank = header["bank_config"].get<BankConfig>();

  if (header.contains("optimizer")) {
    AdamOptimizer opt(ex.train.value_or(TrainConfig{}));
    opt.set_steps_taken(header["optimizer"].value("steps_taken", int64_t{0}));
    for (const auto& [name, item] : manifest) {
      if (!name.starts_with("adam.m.")) continue;
      const std::string pname = name.substr(7);
      AdamOptimizer::Moments mo;
      mo.m = floats_of(name, nullptr);
      mo.v = floats_of("adam.v." + pname, &item.shape);
      opt.moments().emplace(pname, std::move(mo));
    }
    out.optimizer = std::move(opt);
  }

  if (header.contains("bank")) {
    const auto& b = header["bank"];
    MemoryBank bank(b.at("config").get<BankConfig>(), b.at("chunk_size").get<int64_t>(), b.at("n_heads").get<int64_t>(),
                    b.at("head_dim").get<int64_t>(), b.at("d_ret").get<int64_t>());
    const uint64_t next_seq = b.at("next_seq_no").get<uint64_t>();
    const Shape kv_shape{bank.chunk_size(), bank.n_heads(), bank.head_dim()};
    const Shape emb_shape{bank.d_ret()};
    size_t i = 0;
    for (const auto& e : b.at("entries")) {
      const std::string pre = "bank." + std::to_string(i++) + ".";
      MemoryEntry entry;
      entry.chunk_id = e.at("chunk_id").get<int64_t>();
      entry.seq_no = e.at("seq_no").get<uint64_t>();
      entry.counter = e.at("counter").get<uint64_t>();
      entry.keys = Tensor::from(kv_shape, floats_of(pre + "keys", &kv_shape));
      entry.values = Tensor::from(kv_shape, floats_of(pre + "values", &kv_shape));
      entry.embedding.vector = floats_of(pre + "embedding", &emb_shape);
      bank.restore_entry(std::move(entry), next_seq);
    }
    out.bank = std::move(bank);
  }
  return out;
}

TrainRunResult run_training(Model& model, const TrainConfig& config, const BankConfig& bank, WindowSampler& sampler,
                            const TrainRunOptions& options) {
  TrainRunResult result;
  result.metadata = options.metadata;
  std::optional<AdamOptimizer> restored;
  const bool resume = !options.checkpoint_path.empty() && std::filesystem::exists(options.checkpoint_path);
  if (resume) {
    LoadedCheckpoint ck = load_checkpoint(options.checkpoint_path, &model.config());
    if (!ck.extras.train || nlohmann::json(*ck.extras.train) != nlohmann::json(config)) {
      throw ConfigError("checkpoint '" + options.checkpoint_path + "' was written with a different train config");
    }
    model.copy_weights_from(ck.model);
    restored = std::move(ck.optimizer);
    sampler.restore(ck.extras.sampler_state, ck.extras.sampler_draws);
    result.first_step = ck.extras.step;
    result.tokens = ck.extras.metadata.value("train_tokens", int64_t{0});
    result.seconds = ck.extras.metadata.value("train_seconds", 0.0);
    result.last_loss = ck.extras.metadata.value("last_loss", 0.0);
    for (auto it = ck.extras.metadata.begin(); it != ck.extras.metadata.end(); ++it) {
      if (!result.metadata.contains(it.key())) result.metadata[it.key()] = it.value();
    }
  }
  Trainer trainer(model, config, bank);
  if (restored) trainer.optimizer() = std::move(*restored);
  trainer.set_step(result.first_step);

  const auto save = [&] {
    if (options.checkpoint_path.empty()) return;
    CheckpointExtras ex;
    ex.train = config;
    ex.bank = bank;
    ex.step = trainer.step();
    ex.sampler_state = sampler.state();
    ex.sampler_draws = sampler.draws();
    ex.metadata = result.metadata;
    ex.metadata["train_tokens"] = result.tokens;
    ex.metadata["train_seconds"] = result.seconds;
    ex.metadata["last_loss"] = result.last_loss;
    save_checkpoint(options.checkpoint_path, model, &trainer.optimizer(), ex);
  };

  while (trainer.step() < config.steps) {
    const StepStats st = trainer.train_step(sampler);
    ++result.steps_run;
    result.tokens += st.tokens;
    result.seconds += st.seconds;
    result.last_loss = st.loss;
    if (options.on_step) options.on_step(st);
    if (options.checkpoint_every > 0 && trainer.step() % options.checkpoint_every == 0 && trainer.step() < config.steps) {
      save();
    }
  }
  if (result.steps_run > 0 || !resume) save();
  result.metadata["train_tokens"] = result.tokens;
  result.metadata["train_seconds"] = result.seconds;
  result.metadata["last_loss"] = result.last_loss;
  return result;
}

}  // namespace memlong

#include "memlong/config.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "memlong/errors.hpp"

namespace memlong {
namespace {

std::string trim(const std::string& s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw) {
  std::istringstream in(raw);
  T value{};
  in >> value;
  if (in.fail() || !in.eof()) {
    std::string rest;
    if (!in.fail()) std::getline(in, rest);
    if (in.fail() || !trim(rest).empty()) throw ConfigError("setting '" + key + "': cannot parse '" + raw + "'");
  }
  return value;
}

}  // namespace

int64_t ModelConfig::ffn_hidden() const {
  const double raw = 8.0 * static_cast<double>(d_model) / 3.0;
  const int64_t rounded = static_cast<int64_t>(std::llround(raw / 8.0)) * 8;
  return std::max<int64_t>(8, rounded);
}

float ModelConfig::attention_scale() const {
  const double dh = static_cast<double>(head_dim());
  return static_cast<float>(attn_scale == AttnScale::kSqrtHeadDim ? 1.0 / std::sqrt(dh) : 1.0 / dh);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
  if (n_layers < 1) fail("n_layers must be >= 1");
  if (n_heads < 1) fail("n_heads must be >= 1");
  if (d_model < 1 || d_model % n_heads != 0) fail("d_model must be a positive multiple of n_heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary encoding");
  if (vocab_size < 1) fail("vocab_size must be positive");
  if (memory_layer < 1 || memory_layer > n_layers) fail("memory_layer must lie in [1, n_layers]");
  for (int64_t l : retrieval_layers) {
    if (l <= memory_layer || l > n_layers) {
      fail("retrieval layer " + std::to_string(l) + " must lie in (memory_layer, n_layers]");
    }
  }
  if (chunk_size < 1) fail("chunk_size must be >= 1");
  if (retrieval_k < 1) fail("retrieval_k must be >= 1");
  if (local_window < chunk_size || local_window % chunk_size != 0) {
    fail("local_window must be a positive multiple of chunk_size");
  }
  if (d_ret < 1) fail("d_ret must be >= 1");
  if (memory_capacity < 0) fail("memory_capacity must be >= 0");
  if (!(rope_base > 1.0)) fail("rope_base must exceed 1");
  if (!(norm_eps > 0.0f)) fail("norm_eps must be positive");
}

void TrainConfig::validate(const ModelConfig& model) const {
  auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
  if (!(lr > 0.0)) fail("lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) fail("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (grad_clip < 0.0) fail("grad_clip must be >= 0 (0 disables clipping)");
  if (steps < 0 || warmup_steps < 0) fail("steps and warmup_steps must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (sequence_length < 1) fail("sequence_length must be >= 1");
  if (phase == Phase::kPretrain && sequence_length > model.local_window) {
    fail("pretrain sequence_length must not exceed local_window");
  }
  if (phase == Phase::kFinetune && sequence_length % model.chunk_size != 0) {
    fail("finetune sequence_length must be a multiple of chunk_size");
  }
}

TrainConfig TrainConfig::defaults_for(Phase phase) {
  TrainConfig c;
  c.phase = phase;
  if (phase == Phase::kFinetune) {
    c.lr = 1e-4;
    c.batch_size = 2;
    c.sequence_length = 1024;
    c.warmup_steps = 20;
  }
  return c;
}

void BankConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("bank config: " + msg); };
  if (capacity < 0) fail("capacity must be >= 0");
  if (!(target_frac > 0.0 && target_frac < 1.0)) fail("target_frac must lie in (0, 1)");
  if (keep_newest_frac < 0.0 || drop_oldest_frac < 0.0 || keep_newest_frac + drop_oldest_frac >= 1.0) {
    fail("keep_newest_frac + drop_oldest_frac must lie in [0, 1)");
  }
}

int64_t BankConfig::target_size() const {
  return static_cast<int64_t>(std::ceil(target_frac * static_cast<double>(capacity) - 1e-9));
}

std::string to_string(AttnScale v) { return v == AttnScale::kSqrtHeadDim ? "sqrt_dhead" : "dhead"; }
std::string to_string(Phase v) { return v == Phase::kPretrain ? "pretrain" : "finetune"; }
std::string to_string(EvictionPolicy v) { return v == EvictionPolicy::kCounter ? "counter" : "fifo"; }

std::string to_string(TrainingPreset v) {
  switch (v) {
    case TrainingPreset::kDefault: return "default";
    case TrainingPreset::kRetrievalAllTrainingAll: return "retrieval_all_training_all";
    case TrainingPreset::kRetrievalAllTrainingHalf: return "retrieval_all_training_half";
    case TrainingPreset::kRetrievalPartialTrainingHalf: return "retrieval_partial_training_half";
    case TrainingPreset::kRetrievalLowerPartialTrainingHalf: return "retrieval_lower_partial_training_half";
  }
  return "default";
}

AttnScale parse_attn_scale(const std::string& s) {
  if (s == "sqrt_dhead") return AttnScale::kSqrtHeadDim;
  if (s == "dhead") return AttnScale::kHeadDim;
  throw ConfigError("attn_scale must be 'sqrt_dhead' or 'dhead', got '" + s + "'");
}

Phase parse_phase(const std::string& s) {
  if (s == "pretrain") return Phase::kPretrain;
  if (s == "finetune") return Phase::kFinetune;
  throw ConfigError("phase must be 'pretrain' or 'finetune', got '" + s + "'");
}

TrainingPreset parse_preset(const std::string& s) {
  for (auto p : {TrainingPreset::kDefault, TrainingPreset::kRetrievalAllTrainingAll,
                 TrainingPreset::kRetrievalAllTrainingHalf, TrainingPreset::kRetrievalPartialTrainingHalf,
                 TrainingPreset::kRetrievalLowerPartialTrainingHalf}) {
    if (to_string(p) == s) return p;
  }
  throw ConfigError("unknown training preset '" + s + "'");
}

EvictionPolicy parse_policy(const std::string& s) {
  if (s == "counter") return EvictionPolicy::kCounter;
  if (s == "fifo") return EvictionPolicy::kFifo;
  throw ConfigError("eviction policy must be 'counter' or 'fifo', got '" + s + "'");
}

std::set<int64_t> preset_retrieval_layers(TrainingPreset preset, const ModelConfig& model) {
  int64_t stride = 0;
  switch (preset) {
    case TrainingPreset::kDefault: return model.retrieval_layers;
    case TrainingPreset::kRetrievalAllTrainingAll:
    case TrainingPreset::kRetrievalAllTrainingHalf: stride = 1; break;
    case TrainingPreset::kRetrievalPartialTrainingHalf: stride = 2; break;
    case TrainingPreset::kRetrievalLowerPartialTrainingHalf: stride = 3; break;
  }
  std::set<int64_t> layers;
  for (int64_t l = model.memory_layer + 1; l <= model.n_layers; l += stride) layers.insert(l);
  return layers;
}

bool preset_trains_lower(TrainingPreset preset) { return preset == TrainingPreset::kRetrievalAllTrainingAll; }

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"d_model", c.d_model},
                     {"vocab_size", c.vocab_size},
                     {"memory_layer", c.memory_layer},
                     {"retrieval_layers", std::vector<int64_t>(c.retrieval_layers.begin(), c.retrieval_layers.end())},
                     {"chunk_size", c.chunk_size},
                     {"retrieval_k", c.retrieval_k},
                     {"local_window", c.local_window},
                     {"d_ret", c.d_ret},
                     {"memory_capacity", c.memory_capacity},
                     {"attn_scale", to_string(c.attn_scale)},
                     {"rope_base", c.rope_base},
                     {"norm_eps", c.norm_eps},
                     {"init_seed", c.init_seed},
                     {"embedder_seed", c.embedder_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_model").get_to(c.d_model);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("memory_layer").get_to(c.memory_layer);
  const auto layers = j.at("retrieval_layers").get<std::vector<int64_t>>();
  c.retrieval_layers = std::set<int64_t>(layers.begin(), layers.end());
  j.at("chunk_size").get_to(c.chunk_size);
  j.at("retrieval_k").get_to(c.retrieval_k);
  j.at("local_window").get_to(c.local_window);
  j.at("d_ret").get_to(c.d_ret);
  j.at("memory_capacity").get_to(c.memory_capacity);
  c.attn_scale = parse_attn_scale(j.at("attn_scale").get<std::string>());
  j.at("rope_base").get_to(c.rope_base);
  j.at("norm_eps").get_to(c.norm_eps);
  j.at("init_seed").get_to(c.init_seed);
  j.at("embedder_seed").get_to(c.embedder_seed);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"phase", to_string(c.phase)},
                     {"preset", to_string(c.preset)},
                     {"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps},
                     {"weight_decay", c.weight_decay},
                     {"grad_clip", c.grad_clip},
                     {"warmup_steps", c.warmup_steps},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"sequence_length", c.sequence_length},
                     {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.phase = parse_phase(j.at("phase").get<std::string>());
  c.preset = parse_preset(j.at("preset").get<std::string>());
  j.at("lr").get_to(c.lr);
  j.at("beta1").get_to(c.beta1);
  j.at("beta2").get_to(c.beta2);
  j.at("adam_eps").get_to(c.adam_eps);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("grad_clip").get_to(c.grad_clip);
  j.at("warmup_steps").get_to(c.warmup_steps);
  j.at("steps").get_to(c.steps);
  j.at("batch_size").get_to(c.batch_size);
  j.at("sequence_length").get_to(c.sequence_length);
  j.at("seed").get_to(c.seed);
}

void to_json(nlohmann::json& j, const BankConfig& c) {
  j = nlohmann::json{{"capacity", c.capacity},
                     {"keep_newest_frac", c.keep_newest_frac},
                     {"drop_oldest_frac", c.drop_oldest_frac},
                     {"target_frac", c.target_frac},
                     {"policy", to_string(c.policy)}};
}

void from_json(const nlohmann::json& j, BankConfig& c) {
  j.at("capacity").get_to(c.capacity);
  j.at("keep_newest_frac").get_to(c.keep_newest_frac);
  j.at("drop_oldest_frac").get_to(c.drop_oldest_frac);
  j.at("target_frac").get_to(c.target_frac);
  c.policy = parse_policy(j.at("policy").get<std::string>());
}

Settings Settings::parse(const std::string& text) {
  Settings s;
  std::istringstream in(text);
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    s.values_[section.empty() ? key : section + "." + key] = unquote(trim(line.substr(eq + 1)));
  }
  return s;
}

Settings Settings::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

void Settings::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  values_[trim(assignment.substr(0, eq))] = unquote(trim(assignment.substr(eq + 1)));
}

std::optional<std::string> Settings::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string Settings::get_or(const std::string& key, const std::string& fallback) const {
  return get(key).value_or(fallback);
}

int64_t Settings::get_int(const std::string& key, int64_t fallback) const {
  auto v = get(key);
  return v ? parse_number<int64_t>(key, *v) : fallback;
}

double Settings::get_double(const std::string& key, double fallback) const {
  auto v = get(key);
  return v ? parse_number<double>(key, *v) : fallback;
}

bool Settings::get_bool(const std::string& key, bool fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1") return true;
  if (*v == "false" || *v == "0") return false;
  throw ConfigError("setting '" + key + "': expected true/false, got '" + *v + "'");
}

std::vector<int64_t> Settings::get_int_list(const std::string& key, const std::vector<int64_t>& fallback) const {
  auto v = get(key);
  if (!v) return fallback;
  std::string body = trim(*v);
  if (!body.empty() && body.front() == '[') {
    if (body.back() != ']') throw ConfigError("setting '" + key + "': unterminated list");
    body = body.substr(1, body.size() - 2);
  }
  std::vector<int64_t> out;
  std::istringstream in(body);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_number<int64_t>(key, item));
  }
  return out;
}

std::vector<std::string> Settings::unknown_keys(const std::string& section, const std::set<std::string>& known) const {
  std::vector<std::string> out;
  const std::string prefix = section + ".";
  for (const auto& [key, value] : values_) {
    if (key.rfind(prefix, 0) == 0 && known.count(key.substr(prefix.size())) == 0) out.push_back(key);
  }
  return out;
}

namespace {

void reject_unknown(const Settings& s, const std::string& section, const std::set<std::string>& known) {
  const auto bad = s.unknown_keys(section, known);
  if (!bad.empty()) throw ConfigError("unknown setting '" + bad.front() + "'");
}

}  // namespace

void apply_settings(const Settings& s, ModelConfig& c) {
  reject_unknown(s, "model",
                 {"n_layers", "n_heads", "d_model", "vocab_size", "memory_layer", "retrieval_layers", "chunk_size",
                  "retrieval_k", "local_window", "d_ret", "memory_capacity", "attn_scale", "rope_base", "norm_eps",
                  "init_seed", "embedder_seed"});
  c.n_layers = s.get_int("model.n_layers", c.n_layers);
  c.n_heads = s.get_int("model.n_heads", c.n_heads);
  c.d_model = s.get_int("model.d_model", c.d_model);
  c.vocab_size = s.get_int("model.vocab_size", c.vocab_size);
  c.memory_layer = s.get_int("model.memory_layer", c.memory_layer);
  if (s.has("model.retrieval_layers")) {
    const auto layers = s.get_int_list("model.retrieval_layers", {});
    c.retrieval_layers = std::set<int64_t>(layers.begin(), layers.end());
  }
  c.chunk_size = s.get_int("model.chunk_size", c.chunk_size);
  c.retrieval_k = s.get_int("model.retrieval_k", c.retrieval_k);
  c.local_window = s.get_int("model.local_window", c.local_window);
  c.d_ret = s.get_int("model.d_ret", c.d_ret);
  c.memory_capacity = s.get_int("model.memory_capacity", c.memory_capacity);
  if (auto v = s.get("model.attn_scale")) c.attn_scale = parse_attn_scale(*v);
  c.rope_base = s.get_double("model.rope_base", c.rope_base);
  c.norm_eps = static_cast<float>(s.get_double("model.norm_eps", c.norm_eps));
  c.init_seed = static_cast<uint64_t>(s.get_int("model.init_seed", static_cast<int64_t>(c.init_seed)));
  c.embedder_seed = static_cast<uint64_t>(s.get_int("model.embedder_seed", static_cast<int64_t>(c.embedder_seed)));
}

void apply_settings(const Settings& s, TrainConfig& c, const std::string& section) {
  reject_unknown(s, section,
                 {"preset", "lr", "beta1", "beta2", "adam_eps", "weight_decay", "grad_clip", "warmup_steps", "steps",
                  "batch_size", "sequence_length", "seed"});
  const std::string p = section + ".";
  if (auto v = s.get(p + "preset")) c.preset = parse_preset(*v);
  c.lr = s.get_double(p + "lr", c.lr);
  c.beta1 = s.get_double(p + "beta1", c.beta1);
  c.beta2 = s.get_double(p + "beta2", c.beta2);
  c.adam_eps = s.get_double(p + "adam_eps", c.adam_eps);
  c.weight_decay = s.get_double(p + "weight_decay", c.weight_decay);
  c.grad_clip = s.get_double(p + "grad_clip", c.grad_clip);
  c.warmup_steps = s.get_int(p + "warmup_steps", c.warmup_steps);
  c.steps = s.get_int(p + "steps", c.steps);
  c.batch_size = s.get_int(p + "batch_size", c.batch_size);
  c.sequence_length = s.get_int(p + "sequence_length", c.sequence_length);
  c.seed = static_cast<uint64_t>(s.get_int(p + "seed", static_cast<int64_t>(c.seed)));
}

void apply_settings(const Settings& s, BankConfig& c) {
  reject_unknown(s, "bank", {"capacity", "keep_newest_frac", "drop_oldest_frac", "target_frac", "policy"});
  c.capacity = s.get_int("bank.capacity", c.capacity);
  c.keep_newest_frac = s.get_double("bank.keep_newest_frac", c.keep_newest_frac);
  c.drop_oldest_frac = s.get_double("bank.drop_oldest_frac", c.drop_oldest_frac);
  c.target_frac = s.get_double("bank.target_frac", c.target_frac);
  if (auto v = s.get("bank.policy")) c.policy = parse_policy(*v);
}

}  // namespace memlong

#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace memlong {

enum class AttnScale { kSqrtHeadDim, kHeadDim };

struct ModelConfig {
  int64_t n_layers = 8;
  int64_t n_heads = 4;
  int64_t d_model = 128;
  int64_t vocab_size = 260;
  int64_t memory_layer = 4;             // 1-based; layers 1..memory_layer are the frozen lower stack
  std::set<int64_t> retrieval_layers{5, 7};  // 1-based, all > memory_layer
  int64_t chunk_size = 64;              // tau
  int64_t retrieval_k = 4;
  int64_t local_window = 512;           // tokens; a multiple of chunk_size
  int64_t d_ret = 64;
  int64_t memory_capacity = 1024;       // bank entries
  AttnScale attn_scale = AttnScale::kSqrtHeadDim;
  double rope_base = 10000.0;
  float norm_eps = 1e-5f;
  uint64_t init_seed = 1234;
  uint64_t embedder_seed = 97;

  int64_t head_dim() const { return d_model / n_heads; }
  // SwiGLU hidden width: 8/3 * d_model rounded to the nearest multiple of 8.
  int64_t ffn_hidden() const;
  int64_t window_chunks() const { return local_window / chunk_size; }
  float attention_scale() const;
  bool is_retrieval_layer(int64_t layer) const { return retrieval_layers.count(layer) != 0; }

  // Throws ConfigError describing the first violated constraint.
  void validate() const;
};

enum class Phase { kPretrain, kFinetune };

// Which parameters phase B updates and where retrieval runs.
enum class TrainingPreset {
  kDefault,                   // model's retrieval layers, upper layers trainable
  kRetrievalAllTrainingAll,   // every upper layer retrieves, every parameter trains
  kRetrievalAllTrainingHalf,  // every upper layer retrieves, upper layers train
  kRetrievalPartialTrainingHalf,       // every 2nd upper layer retrieves
  kRetrievalLowerPartialTrainingHalf,  // every 3rd upper layer retrieves
};

struct TrainConfig {
  Phase phase = Phase::kPretrain;
  TrainingPreset preset = TrainingPreset::kDefault;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  int64_t warmup_steps = 100;
  int64_t steps = 1000;
  int64_t batch_size = 8;
  int64_t sequence_length = 512;
  uint64_t seed = 42;

  void validate(const ModelConfig& model) const;
  static TrainConfig defaults_for(Phase phase);
};

enum class EvictionPolicy { kCounter, kFifo };

struct BankConfig {
  int64_t capacity = 1024;
  double keep_newest_frac = 0.10;
  double drop_oldest_frac = 0.10;
  double target_frac = 0.50;
  EvictionPolicy policy = EvictionPolicy::kCounter;

  void validate() const;
  // Entry count right after an overflow-triggered update.
  int64_t target_size() const;
};

std::string to_string(AttnScale v);
std::string to_string(Phase v);
std::string to_string(TrainingPreset v);
std::string to_string(EvictionPolicy v);
AttnScale parse_attn_scale(const std::string& s);
Phase parse_phase(const std::string& s);
TrainingPreset parse_preset(const std::string& s);
EvictionPolicy parse_policy(const std::string& s);

// Retrieval layers and trainability implied by a preset for this model.
std::set<int64_t> preset_retrieval_layers(TrainingPreset preset, const ModelConfig& model);
bool preset_trains_lower(TrainingPreset preset);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);
void to_json(nlohmann::json& j, const BankConfig& c);
void from_json(const nlohmann::json& j, BankConfig& c);

// Flat `section.key -> value` settings read from a TOML-style file:
//
//   # comment
//   [model]
//   d_model = 128
//   retrieval_layers = [5, 7]
//
// Keys before any section header live at the top level.
class Settings {
 public:
  static Settings parse(const std::string& text);
  static Settings load_file(const std::string& path);

  // Applies `section.key=value`; throws ConfigError on malformed input.
  void set(const std::string& assignment);
  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  std::optional<std::string> get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key, int64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<int64_t> get_int_list(const std::string& key, const std::vector<int64_t>& fallback) const;

  const std::map<std::string, std::string>& values() const { return values_; }
  // Keys in `section` not consumed by apply_*; used to reject typos.
  std::vector<std::string> unknown_keys(const std::string& section, const std::set<std::string>& known) const;

 private:
  std::map<std::string, std::string> values_;
};

void apply_settings(const Settings& s, ModelConfig& c);
void apply_settings(const Settings& s, TrainConfig& c, const std::string& section);
void apply_settings(const Settings& s, BankConfig& c);

}  // namespace memlong

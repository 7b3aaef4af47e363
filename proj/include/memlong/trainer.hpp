#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "memlong/config.hpp"
#include "memlong/corpus.hpp"
#include "memlong/memory_bank.hpp"
#include "memlong/model.hpp"
#include "memlong/optimizer.hpp"

namespace memlong {

// Draws fixed-length token windows from a document set. A window starts at a
// uniformly random offset of a document chosen with probability proportional
// to its number of valid offsets. The state is one mt19937_64 engine, so the
// stream resumes exactly from a serialized state.
class WindowSampler {
 public:
  WindowSampler(std::vector<TokenSeq> docs, int64_t window, uint64_t seed);

  std::vector<int32_t> next();
  std::vector<std::vector<int32_t>> next_batch(int64_t count);

  int64_t draws() const { return draws_; }
  std::string state() const;
  void restore(const std::string& state, int64_t draws);
  int64_t window() const { return window_; }

 private:
  std::vector<TokenSeq> docs_;
  std::vector<int64_t> cumulative_;  // running count of valid offsets
  int64_t window_;
  std::mt19937_64 rng_;
  int64_t draws_ = 0;
};

struct StepStats {
  int64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  int64_t tokens = 0;
  int64_t retrieval_events = 0;
  int64_t retrieved_chunks = 0;
  double seconds = 0.0;
};

// Trainable groups for a phase and preset.
struct TrainableSet {
  bool lower = true;
  bool upper = true;
  bool gates = false;
};
TrainableSet trainable_set(Phase phase, TrainingPreset preset);

// Phase-B model: the pretrained weights with the preset's retrieval layers
// and freshly zeroed gates.
Model make_finetune_model(const Model& pretrained, TrainingPreset preset);

class Trainer {
 public:
  // `model` must outlive the trainer. Applies the phase's trainable set.
  Trainer(Model& model, const TrainConfig& config, const BankConfig& bank = {});

  // Phase A: causal LM loss on each window (inputs are all but the last
  // token), gradients averaged over the batch, one clipped Adam update of all
  // non-gate parameters. Throws NumericalError on a non-finite loss.
  StepStats pretrain_step(const std::vector<std::vector<int32_t>>& batch);

  // Phase B: for each document, a fresh memory bank is filled chunk by chunk
  // while the upper layers attend to retrieved chunks; one update of the
  // trainable set at the end.
  StepStats finetune_step(const std::vector<std::vector<int32_t>>& docs);

  // Samples the next batch from `sampler` and runs the phase's step.
  StepStats train_step(WindowSampler& sampler);

  Model& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  const BankConfig& bank_config() const { return bank_; }
  AdamOptimizer& optimizer() { return optimizer_; }
  int64_t step() const { return step_; }
  void set_step(int64_t s) { step_ = s; }

 private:
  StepStats apply_update(StepStats stats);

  Model& model_;
  TrainConfig config_;
  BankConfig bank_;
  AdamOptimizer optimizer_;
  int64_t step_ = 0;
};

// Checkpoint container: "MEMLONG1", u64 little-endian header length, UTF-8
// JSON header, then float32 payloads in manifest order.
struct CheckpointExtras {
  std::optional<TrainConfig> train;
  std::optional<BankConfig> bank;
  int64_t step = 0;
  std::string sampler_state;
  int64_t sampler_draws = 0;
  nlohmann::json metadata = nlohmann::json::object();
};

inline constexpr int64_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const Model& model, const AdamOptimizer* optimizer,
                     const CheckpointExtras& extras, const MemoryBank* bank = nullptr);

struct LoadedCheckpoint {
  Model model;
  std::optional<AdamOptimizer> optimizer;
  CheckpointExtras extras;
  std::optional<MemoryBank> bank;
};

// Throws FormatError on a damaged or foreign file and ConfigError when
// `expected` is given and differs from the stored model configuration. No
// state is produced unless the whole file validates.
LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr);

struct TrainRunOptions {
  // Written every `checkpoint_every` steps and at the end. When the file
  // exists the run resumes from it; its model and train configs must match.
  std::string checkpoint_path;
  int64_t checkpoint_every = 0;
  std::function<void(const StepStats&)> on_step;
  nlohmann::json metadata = nlohmann::json::object();
};

struct TrainRunResult {
  int64_t first_step = 0;   // step the run started or resumed at
  int64_t steps_run = 0;
  int64_t tokens = 0;       // over the whole run, resumed parts included
  double seconds = 0.0;     // wall time over the whole run, resumed parts included
  double last_loss = 0.0;
  nlohmann::json metadata = nlohmann::json::object();
};

// Runs `config.steps` steps of the config's phase on windows from `sampler`.
// `model` receives the trained weights.
TrainRunResult run_training(Model& model, const TrainConfig& config, const BankConfig& bank, WindowSampler& sampler,
                            const TrainRunOptions& options = {});

}  // namespace memlong

#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "memlong/config.hpp"
#include "memlong/corpus.hpp"
#include "memlong/model.hpp"
#include "memlong/runtime.hpp"
#include "memlong/trainer.hpp"

namespace memlong {

// Appends one JSON object per line. An empty path discards records; the
// optional echo callback sees every record.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::string& path);
  void write(nlohmann::json record);
  void set_echo(std::function<void(const nlohmann::json&)> fn) { echo_ = std::move(fn); }

 private:
  std::ofstream out_;
  std::function<void(const nlohmann::json&)> echo_;
  std::mutex mu_;
};

// Everything a two-phase run plus evaluation needs, read from Settings:
//
//   [data]        corpus, format (files|lines), holdout_frac
//   [experiment]  pretrain_tokens, finetune_tokens, checkpoint_every
//   [model] [bank] [pretrain] [finetune]  as in apply_settings
//   [eval]        lengths, window, memory_sizes
//
// A token budget overrides the phase's `steps` with
// ceil(tokens / (batch_size * sequence_length)).
struct ExperimentConfig {
  std::string corpus = "data/books";
  CorpusFormat format = CorpusFormat::kFilePerDocument;
  double holdout_frac = 0.10;
  int64_t pretrain_tokens = 0;
  int64_t finetune_tokens = 0;
  int64_t checkpoint_every = 200;
  ModelConfig model;
  BankConfig bank;
  TrainConfig pretrain = TrainConfig::defaults_for(Phase::kPretrain);
  TrainConfig finetune = TrainConfig::defaults_for(Phase::kFinetune);
  std::vector<int64_t> eval_lengths{4096};
  int64_t eval_window = 256;
  std::vector<int64_t> memory_sizes{0, 8, 32, 128};

  static ExperimentConfig from_settings(const Settings& s);
  // Throws ConfigError on the first violated constraint.
  void validate() const;
  nlohmann::json to_json() const;
};

int64_t steps_for_tokens(int64_t tokens, const TrainConfig& train);

CorpusSplit load_experiment_data(const ExperimentConfig& cfg);

// Phase A from scratch; resumes from and leaves `checkpoint`.
Model run_pretrain(const ExperimentConfig& cfg, const CorpusSplit& data, const std::string& checkpoint,
                   MetricsLog& log, TrainRunResult* result = nullptr);

// Phase B on top of `pretrained`; resumes from and leaves `checkpoint`.
Model run_finetune(const ExperimentConfig& cfg, const Model& pretrained, const CorpusSplit& data,
                   const std::string& checkpoint, MetricsLog& log, TrainRunResult* result = nullptr);

// Held-out evaluation documents: each held-out part cut into pieces of the
// longest eval length.
std::vector<TokenSeq> eval_documents(const ExperimentConfig& cfg, const CorpusSplit& data);

// One eval_perplexity report per memory size, in the given order.
std::vector<EvalReport> memory_sweep(const Model& model, const std::vector<TokenSeq>& docs,
                                     const std::vector<int64_t>& lengths, const std::vector<int64_t>& memory_sizes,
                                     int64_t eval_window, const BankConfig& bank_template, MetricsLog& log);

nlohmann::json step_record(const std::string& phase, const StepStats& st);
nlohmann::json eval_record(const EvalReport& report);

}  // namespace memlong

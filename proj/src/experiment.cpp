#include "memlong/experiment.hpp"

#include <cmath>

#include "memlong/errors.hpp"

namespace memlong {

MetricsLog::MetricsLog(const std::string& path) {
  if (path.empty()) return;
  out_.open(path, std::ios::app);
  if (!out_) throw ConfigError("cannot open metrics log '" + path + "'");
}

void MetricsLog::write(nlohmann::json record) {
  std::lock_guard<std::mutex> lock(mu_);
  if (out_.is_open()) {
    out_ << record.dump() << '\n';
    out_.flush();
  }
  if (echo_) echo_(record);
}

namespace {

void reject_unknown(const Settings& s, const std::string& section, const std::set<std::string>& known) {
  const auto bad = s.unknown_keys(section, known);
  if (!bad.empty()) throw ConfigError("unknown setting '" + bad.front() + "'");
}

}  // namespace

int64_t steps_for_tokens(int64_t tokens, const TrainConfig& train) {
  const int64_t per_step = train.batch_size * train.sequence_length;
  return (tokens + per_step - 1) / per_step;
}

ExperimentConfig ExperimentConfig::from_settings(const Settings& s) {
  ExperimentConfig c;
  reject_unknown(s, "data", {"corpus", "format", "holdout_frac"});
  reject_unknown(s, "experiment", {"pretrain_tokens", "finetune_tokens", "checkpoint_every"});
  reject_unknown(s, "eval", {"lengths", "window", "memory_sizes"});
  c.corpus = s.get_or("data.corpus", c.corpus);
  if (auto v = s.get("data.format")) c.format = parse_corpus_format(*v);
  c.holdout_frac = s.get_double("data.holdout_frac", c.holdout_frac);
  c.pretrain_tokens = s.get_int("experiment.pretrain_tokens", c.pretrain_tokens);
  c.finetune_tokens = s.get_int("experiment.finetune_tokens", c.finetune_tokens);
  c.checkpoint_every = s.get_int("experiment.checkpoint_every", c.checkpoint_every);
  apply_settings(s, c.model);
  c.bank.capacity = c.model.memory_capacity;
  apply_settings(s, c.bank);
  apply_settings(s, c.pretrain, "pretrain");
  apply_settings(s, c.finetune, "finetune");
  c.pretrain.phase = Phase::kPretrain;
  c.finetune.phase = Phase::kFinetune;
  if (c.pretrain_tokens > 0) c.pretrain.steps = steps_for_tokens(c.pretrain_tokens, c.pretrain);
  if (c.finetune_tokens > 0) c.finetune.steps = steps_for_tokens(c.finetune_tokens, c.finetune);
  c.eval_lengths = s.get_int_list("eval.lengths", c.eval_lengths);
  c.eval_window = s.get_int("eval.window", c.eval_window);
  c.memory_sizes = s.get_int_list("eval.memory_sizes", c.memory_sizes);
  return c;
}

void ExperimentConfig::validate() const {
  model.validate();
  bank.validate();
  pretrain.validate(model);
  ModelConfig upper = model;
  upper.retrieval_layers = preset_retrieval_layers(finetune.preset, model);
  upper.validate();
  finetune.validate(upper);
  if (!(holdout_frac > 0.0 && holdout_frac < 1.0)) throw ConfigError("data.holdout_frac must lie in (0, 1)");
  if (eval_lengths.empty()) throw ConfigError("eval.lengths must not be empty");
  for (int64_t l : eval_lengths)
    if (l <= eval_window) throw ConfigError("every eval length must exceed eval.window");
  if (eval_window < 1) throw ConfigError("eval.window must be >= 1");
  for (int64_t m : memory_sizes)
    if (m < 0) throw ConfigError("eval.memory_sizes must be >= 0");
}

nlohmann::json ExperimentConfig::to_json() const {
  return {{"corpus", corpus},
          {"format", format == CorpusFormat::kFilePerDocument ? "files" : "lines"},
          {"holdout_frac", holdout_frac},
          {"pretrain_tokens", pretrain_tokens},
          {"finetune_tokens", finetune_tokens},
          {"model", model},
          {"bank", bank},
          {"pretrain", pretrain},
          {"finetune", finetune},
          {"eval_lengths", eval_lengths},
          {"eval_window", eval_window},
          {"memory_sizes", memory_sizes}};
}

CorpusSplit load_experiment_data(const ExperimentConfig& cfg) {
  return split_corpus(load_corpus(cfg.corpus, cfg.format), cfg.holdout_frac);
}

nlohmann::json step_record(const std::string& phase, const StepStats& st) {
  return {{"event", "step"},
          {"phase", phase},
          {"step", st.step},
          {"loss", st.loss},
          {"grad_norm", st.grad_norm},
          {"lr", st.lr},
          {"tokens", st.tokens},
          {"retrieval_events", st.retrieval_events},
          {"retrieved_chunks", st.retrieved_chunks},
          {"seconds", st.seconds}};
}

nlohmann::json eval_record(const EvalReport& report) {
  nlohmann::json lengths = nlohmann::json::array();
  for (const LengthResult& r : report.lengths) {
    lengths.push_back({{"length", r.length},
                       {"documents", r.documents},
                       {"skipped", r.skipped},
                       {"scored_tokens", r.scored_tokens},
                       {"mean_nll", r.mean_nll},
                       {"perplexity", r.perplexity},
                       {"retrieval_events", r.retrieval_events},
                       {"peak_live_kv_floats", r.peak_live_kv_floats},
                       {"max_row_width", r.max_row_width}});
  }
  return {{"event", "eval"},
          {"memory_size", report.memory_size},
          {"eval_window", report.eval_window},
          {"lengths", lengths},
          {"warnings", report.warnings},
          {"seconds", report.seconds}};
}

namespace {

Model train_phase(Model model, const TrainConfig& train, const BankConfig& bank, const std::vector<TokenSeq>& docs,
                  const std::string& checkpoint, int64_t checkpoint_every, const std::string& phase,
                  MetricsLog& log, TrainRunResult* result) {
  WindowSampler sampler(docs, train.sequence_length + 1, train.seed);
  TrainRunOptions opts;
  opts.checkpoint_path = checkpoint;
  opts.checkpoint_every = checkpoint_every;
  opts.metadata = {{"phase", phase}};
  opts.on_step = [&](const StepStats& st) { log.write(step_record(phase, st)); };
  TrainRunResult r = run_training(model, train, bank, sampler, opts);
  log.write({{"event", "phase_done"},
             {"phase", phase},
             {"first_step", r.first_step},
             {"steps_run", r.steps_run},
             {"tokens", r.tokens},
             {"seconds", r.seconds},
             {"last_loss", r.last_loss}});
  if (result) *result = r;
  return model;
}

}  // namespace

Model run_pretrain(const ExperimentConfig& cfg, const CorpusSplit& data, const std::string& checkpoint,
                   MetricsLog& log, TrainRunResult* result) {
  return train_phase(Model(cfg.model), cfg.pretrain, cfg.bank, data.train, checkpoint, cfg.checkpoint_every,
                     "pretrain", log, result);
}

Model run_finetune(const ExperimentConfig& cfg, const Model& pretrained, const CorpusSplit& data,
                   const std::string& checkpoint, MetricsLog& log, TrainRunResult* result) {
  return train_phase(make_finetune_model(pretrained, cfg.finetune.preset), cfg.finetune, cfg.bank, data.train,
                     checkpoint, cfg.checkpoint_every, "finetune", log, result);
}

std::vector<TokenSeq> eval_documents(const ExperimentConfig& cfg, const CorpusSplit& data) {
  int64_t longest = 0;
  for (int64_t l : cfg.eval_lengths) longest = std::max(longest, l);
  return cut_documents(data.heldout, longest);
}

std::vector<EvalReport> memory_sweep(const Model& model, const std::vector<TokenSeq>& docs,
                                     const std::vector<int64_t>& lengths, const std::vector<int64_t>& memory_sizes,
                                     int64_t eval_window, const BankConfig& bank_template, MetricsLog& log) {
  std::vector<EvalReport> out;
  for (int64_t m : memory_sizes) {
    out.push_back(eval_perplexity(model, docs, lengths, m, eval_window, bank_template));
    log.write(eval_record(out.back()));
  }
  return out;
}

}  // namespace memlong

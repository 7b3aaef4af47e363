#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "memlong/errors.hpp"
#include "memlong/experiment.hpp"

using namespace memlong;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumerical = 3;

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::string log = "memlong_metrics.jsonl";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "TOML-style config file");
  cmd->add_option("--set", c.overrides, "Override a setting, section.key=value (repeatable)");
  cmd->add_option("--log", c.log, "JSON-lines metrics log (empty disables)");
}

Settings load_settings(const Common& c) {
  Settings s = c.config.empty() ? Settings{} : Settings::load_file(c.config);
  for (const std::string& o : c.overrides) s.set(o);
  return s;
}

// Prints rows as an aligned plain-text table.
class Table {
 public:
  explicit Table(std::vector<std::string> header) { rows_.push_back(std::move(header)); }
  void add(std::vector<std::string> row) { rows_.push_back(std::move(row)); }
  void print(std::ostream& os) const {
    std::vector<size_t> w(rows_[0].size(), 0);
    for (const auto& r : rows_)
      for (size_t i = 0; i < r.size() && i < w.size(); ++i) w[i] = std::max(w[i], r[i].size());
    for (size_t ri = 0; ri < rows_.size(); ++ri) {
      for (size_t i = 0; i < rows_[ri].size(); ++i) os << std::left << std::setw(static_cast<int>(w[i] + 2)) << rows_[ri][i];
      os << '\n';
      if (ri == 0) {
        for (size_t i = 0; i < w.size(); ++i) os << std::string(w[i], '-') << "  ";
        os << '\n';
      }
    }
  }

 private:
  std::vector<std::vector<std::string>> rows_;
};

std::string num(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string printable(std::span<const int32_t> tokens) {
  std::string out;
  for (int32_t t : tokens) {
    if (t >= 0 && t < 256) out.push_back(static_cast<char>(t));
    else if (t == vocab::kPad) out += "<pad>";
    else if (t == vocab::kBos) out += "<bos>";
    else if (t == vocab::kEos) out += "<eos>";
    else out += "<unk>";
  }
  return out;
}

std::string snippet(std::span<const int32_t> tokens, size_t width) {
  std::string s = printable(tokens.first(std::min(tokens.size(), width)));
  for (char& ch : s)
    if (static_cast<unsigned char>(ch) < 32) ch = ' ';
  return s;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void print_step(const std::string& phase, const StepStats& st, int64_t total) {
  const double tps = st.seconds > 0 ? static_cast<double>(st.tokens) / st.seconds : 0.0;
  std::cout << std::left << std::setw(9) << phase << std::setw(12) << (std::to_string(st.step) + "/" + std::to_string(total))
            << "loss " << std::setw(9) << num(st.loss) << "gnorm " << std::setw(9) << num(st.grad_norm) << "lr "
            << std::setw(11) << num(st.lr, 3) << "tok/s " << num(tps, 5) << '\n';
}

ExperimentConfig experiment_from(const Common& c) {
  ExperimentConfig cfg = ExperimentConfig::from_settings(load_settings(c));
  return cfg;
}

// --- pretrain ---------------------------------------------------------------

struct TrainArgs {
  Common common;
  std::string out;
  std::string init;
  int64_t print_every = 50;
};

MetricsLog open_log(const Common& c) { return c.log.empty() ? MetricsLog{} : MetricsLog(c.log); }

void echo_steps(MetricsLog& log, const std::string& phase, int64_t total, int64_t every) {
  log.set_echo([=](const nlohmann::json& r) {
    if (r.value("event", "") != "step") return;
    StepStats st;
    st.step = r.value("step", int64_t{0});
    if (every <= 0 || (st.step % every != 0 && st.step + 1 != total)) return;
    st.loss = r.value("loss", 0.0);
    st.grad_norm = r.value("grad_norm", 0.0);
    st.lr = r.value("lr", 0.0);
    st.tokens = r.value("tokens", int64_t{0});
    st.seconds = r.value("seconds", 0.0);
    print_step(phase, st, total);
  });
}

void print_run(const std::string& phase, const TrainRunResult& r, const std::string& out) {
  Table t({"phase", "resumed_at", "steps_run", "tokens", "minutes", "last_loss", "checkpoint"});
  t.add({phase, std::to_string(r.first_step), std::to_string(r.steps_run), std::to_string(r.tokens), num(r.seconds / 60.0),
         num(r.last_loss), out});
  t.print(std::cout);
}

int cmd_pretrain(const TrainArgs& a) {
  ExperimentConfig cfg = experiment_from(a.common);
  cfg.validate();
  const CorpusSplit data = load_experiment_data(cfg);
  MetricsLog log = open_log(a.common);
  log.write({{"event", "config"}, {"command", "pretrain"}, {"config", cfg.to_json()}});
  echo_steps(log, "pretrain", cfg.pretrain.steps, a.print_every);
  TrainRunResult r;
  run_pretrain(cfg, data, a.out, log, &r);
  print_run("pretrain", r, a.out);
  return 0;
}

int cmd_finetune(const TrainArgs& a) {
  ExperimentConfig cfg = experiment_from(a.common);
  LoadedCheckpoint pre = load_checkpoint(a.init);
  cfg.model = pre.model.config();
  cfg.validate();
  const CorpusSplit data = load_experiment_data(cfg);
  MetricsLog log = open_log(a.common);
  log.write({{"event", "config"}, {"command", "finetune"}, {"init", a.init}, {"config", cfg.to_json()}});
  echo_steps(log, "finetune", cfg.finetune.steps, a.print_every);
  TrainRunResult r;
  run_finetune(cfg, pre.model, data, a.out, log, &r);
  print_run("finetune", r, a.out);
  return 0;
}

// --- evaluation -------------------------------------------------------------

struct EvalArgs {
  Common common;
  std::string checkpoint;
  std::vector<int64_t> lengths;
  std::vector<int64_t> memory_sizes;
  int64_t window = 0;
  std::string corpus;
  std::string split = "heldout";
  std::string csv;
};

struct EvalSetup {
  ExperimentConfig cfg;
  Model model;
  std::vector<TokenSeq> docs;
};

EvalSetup eval_setup(const EvalArgs& a) {
  ExperimentConfig cfg = experiment_from(a.common);
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  cfg.model = ck.model.config();
  if (!a.lengths.empty()) cfg.eval_lengths = a.lengths;
  if (!a.memory_sizes.empty()) cfg.memory_sizes = a.memory_sizes;
  if (a.window > 0) cfg.eval_window = a.window;
  if (!a.corpus.empty()) cfg.corpus = a.corpus;
  for (int64_t l : cfg.eval_lengths)
    if (l <= cfg.eval_window) throw ConfigError("every eval length must exceed the eval window");
  CorpusSplit data = load_experiment_data(cfg);
  if (a.split == "all") {
    data.heldout = load_corpus(cfg.corpus, cfg.format);
  } else if (a.split != "heldout") {
    throw ConfigError("--split must be heldout or all");
  }
  std::vector<TokenSeq> docs = eval_documents(cfg, data);
  return {cfg, std::move(ck.model), std::move(docs)};
}

void write_csv(const std::string& target, const std::vector<EvalReport>& reports) {
  std::string body;
  for (size_t i = 0; i < reports.size(); ++i) {
    std::string csv = reports[i].to_csv();
    if (i > 0) csv = csv.substr(csv.find('\n') + 1);
    body += csv;
  }
  if (target == "-") {
    std::cout << body;
  } else {
    std::ofstream out(target);
    if (!out) throw ConfigError("cannot write '" + target + "'");
    out << body;
  }
}

void print_reports(const std::vector<EvalReport>& reports) {
  Table t({"length", "memory", "docs", "skipped", "scored", "nll", "ppl", "retrievals", "max_row", "peak_kv_floats"});
  for (const EvalReport& r : reports)
    for (const LengthResult& l : r.lengths)
      t.add({std::to_string(l.length), std::to_string(r.memory_size), std::to_string(l.documents),
             std::to_string(l.skipped), std::to_string(l.scored_tokens), num(l.mean_nll), num(l.perplexity),
             std::to_string(l.retrieval_events), std::to_string(l.max_row_width),
             std::to_string(l.peak_live_kv_floats)});
  t.print(std::cout);
  for (const EvalReport& r : reports)
    for (const std::string& w : r.warnings) std::cerr << "warning: " << w << '\n';
}

int cmd_eval(const EvalArgs& a, bool sweep) {
  EvalSetup s = eval_setup(a);
  std::vector<int64_t> sizes = s.cfg.memory_sizes;
  if (!sweep && a.memory_sizes.empty()) sizes = {s.cfg.bank.capacity};
  MetricsLog log = open_log(a.common);
  log.write({{"event", "config"}, {"command", sweep ? "sweep" : "eval-ppl"}, {"checkpoint", a.checkpoint},
             {"config", s.cfg.to_json()}});
  const auto reports = memory_sweep(s.model, s.docs, s.cfg.eval_lengths, sizes, s.cfg.eval_window, s.cfg.bank, log);
  if (a.csv == "-") {
    write_csv("-", reports);
    return 0;
  }
  print_reports(reports);
  if (!a.csv.empty()) write_csv(a.csv, reports);
  return 0;
}

// --- generation and inspection ----------------------------------------------

struct GenerateArgs {
  Common common;
  std::string checkpoint;
  std::string prompt;
  std::string prompt_file;
  int64_t max_new = 200;
  int64_t memory = -1;
};

BankConfig bank_for(const Common& c, const Model& model, int64_t memory) {
  Settings s = load_settings(c);
  BankConfig bank;
  bank.capacity = model.config().memory_capacity;
  apply_settings(s, bank);
  if (memory >= 0) bank.capacity = memory;
  bank.validate();
  return bank;
}

int cmd_generate(const GenerateArgs& a) {
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const std::string prompt = a.prompt_file.empty() ? a.prompt : read_file(a.prompt_file);
  if (prompt.empty()) throw ConfigError("generate needs --prompt or --prompt-file");
  InferenceSession s(ck.model, bank_for(a.common, ck.model, a.memory));
  s.encode_prefix(encode_text(prompt));
  const TokenSeq out = s.generate(a.max_new);
  std::cout << printable(out.tokens) << '\n';
  MetricsLog log = open_log(a.common);
  const SessionStats& st = s.stats();
  log.write({{"event", "generate"},
             {"checkpoint", a.checkpoint},
             {"prompt_tokens", static_cast<int64_t>(prompt.size())},
             {"new_tokens", out.size()},
             {"retrieval_events", st.retrieval_events},
             {"bank_entries", s.bank().size()},
             {"max_row_width", st.max_row_width},
             {"peak_live_kv_floats", st.peak_live_kv_floats}});
  Table t({"prompt_tokens", "new_tokens", "retrievals", "bank_entries", "max_row", "peak_kv_floats"});
  t.add({std::to_string(prompt.size()), std::to_string(out.size()), std::to_string(st.retrieval_events),
         std::to_string(s.bank().size()), std::to_string(st.max_row_width), std::to_string(st.peak_live_kv_floats)});
  t.print(std::cerr);
  return 0;
}

struct InspectArgs {
  Common common;
  std::string checkpoint;
  std::string input;
  int64_t memory = -1;
  int64_t limit = 40;
};

int cmd_inspect(const InspectArgs& a) {
  LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
  const TokenSeq text = encode_text(read_file(a.input), a.input);
  InferenceSession s(ck.model, bank_for(a.common, ck.model, a.memory));
  MetricsLog log = open_log(a.common);
  s.bank().set_eviction_listener([&](const EvictionReport& r) {
    log.write({{"event", "eviction"}, {"report", nlohmann::json::parse(r.to_json_line())}});
  });
  s.feed(text.tokens);
  const int64_t tau = ck.model.config().chunk_size;
  Table t({"chunk", "seq_no", "counter", "text"});
  const auto& entries = s.bank().entries();
  const size_t shown = std::min(entries.size(), static_cast<size_t>(std::max<int64_t>(0, a.limit)));
  for (size_t i = 0; i < shown; ++i) {
    const MemoryEntry& e = entries[i];
    const auto first = static_cast<size_t>(e.chunk_id * tau);
    t.add({std::to_string(e.chunk_id), std::to_string(e.seq_no), std::to_string(e.counter),
           snippet(std::span<const int32_t>(text.tokens).subspan(first, static_cast<size_t>(tau)), 40)});
  }
  t.print(std::cout);
  const SessionStats& st = s.stats();
  std::cout << "\n" << entries.size() << " entries (" << shown << " shown), capacity " << s.bank().config().capacity
            << ", " << st.chunks_completed << " chunks, " << st.retrieval_events << " retrievals, "
            << s.bank().eviction_log().size() << " evictions, counter total " << s.bank().counter_total() << "\n";
  log.write({{"event", "inspect-memory"},
             {"input", a.input},
             {"entries", entries.size()},
             {"chunks", st.chunks_completed},
             {"retrieval_events", st.retrieval_events},
             {"evictions", s.bank().eviction_log().size()},
             {"counter_total", s.bank().counter_total()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"memlong: retrieval-augmented byte-level language model"};
  app.require_subcommand(1);

  TrainArgs pre, fine;
  auto* c_pre = app.add_subcommand("pretrain", "Phase A: train the whole backbone");
  add_common(c_pre, pre.common);
  c_pre->add_option("-o,--out", pre.out, "Checkpoint to write (resumed when present)")->required();
  c_pre->add_option("--print-every", pre.print_every, "Steps between table rows");

  auto* c_fine = app.add_subcommand("finetune", "Phase B: train upper layers and gates with retrieval");
  add_common(c_fine, fine.common);
  c_fine->add_option("--init", fine.init, "Phase A checkpoint")->required();
  c_fine->add_option("-o,--out", fine.out, "Checkpoint to write (resumed when present)")->required();
  c_fine->add_option("--print-every", fine.print_every, "Steps between table rows");

  EvalArgs ev, sw;
  auto add_eval = [](CLI::App* cmd, EvalArgs& e) {
    add_common(cmd, e.common);
    cmd->add_option("--checkpoint", e.checkpoint, "Model checkpoint")->required();
    cmd->add_option("--lengths", e.lengths, "Eval lengths in tokens");
    cmd->add_option("--memory", e.memory_sizes, "Memory sizes in entries (0 disables memory)");
    cmd->add_option("--window", e.window, "Scored tokens at the end of each document");
    cmd->add_option("--corpus", e.corpus, "Corpus path (overrides the config)");
    cmd->add_option("--split", e.split, "heldout (last fraction of each document) or all");
    cmd->add_option("--csv", e.csv, "Write per-length CSV to a file, or - for stdout");
  };
  auto* c_eval = app.add_subcommand("eval-ppl", "Perplexity of the final window at each length");
  add_eval(c_eval, ev);
  auto* c_sweep = app.add_subcommand("sweep", "Perplexity over a memory-size by length grid");
  add_eval(c_sweep, sw);

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "Greedy continuation of a prompt");
  add_common(c_gen, gen.common);
  c_gen->add_option("--checkpoint", gen.checkpoint, "Model checkpoint")->required();
  c_gen->add_option("--prompt", gen.prompt, "Prompt text");
  c_gen->add_option("--prompt-file", gen.prompt_file, "Read the prompt from a file");
  c_gen->add_option("-n,--max-new", gen.max_new, "Tokens to generate");
  c_gen->add_option("--memory", gen.memory, "Memory size in entries (0 disables memory)");

  InspectArgs ins;
  auto* c_ins = app.add_subcommand("inspect-memory", "Feed a file and list the memory bank");
  add_common(c_ins, ins.common);
  c_ins->add_option("--checkpoint", ins.checkpoint, "Model checkpoint")->required();
  c_ins->add_option("--input", ins.input, "Text file to feed")->required();
  c_ins->add_option("--memory", ins.memory, "Memory size in entries");
  c_ins->add_option("--limit", ins.limit, "Entries to list");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*c_pre) return cmd_pretrain(pre);
    if (*c_fine) return cmd_finetune(fine);
    if (*c_eval) return cmd_eval(ev, false);
    if (*c_sweep) return cmd_eval(sw, true);
    if (*c_gen) return cmd_generate(gen);
    if (*c_ins) return cmd_inspect(ins);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

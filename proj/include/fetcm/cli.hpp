#pragma once

// The `fetcm` command line: a flat `key = value` run configuration shared by
// every subcommand, with flags that override the file.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <CLI11.hpp>

#include "fetcm/clicklog.hpp"
#include "fetcm/diagnostics.hpp"
#include "fetcm/error.hpp"
#include "fetcm/eval.hpp"
#include "fetcm/model.hpp"
#include "fetcm/train.hpp"

namespace fetcm {

struct RunConfig {
  ModelConfig model;
  TrainConfig train;  // train.seed is the run's single seed

  std::string out;
  std::string input;
  std::string format = "canonical";
  std::string train_path, valid_path, test_path;
  std::string truth;
  std::string checkpoint;
  std::string epoch_log;
  double split_train = 0.8, split_valid = 0.1, split_test = 0.1;
  std::size_t vocab_min_freq = 1;
  bool baseline = false;

  PbmSpec pbm;
  std::size_t n_sessions = 20000;
  std::size_t queries_per_session = 1;

  std::uint64_t seed() const { return train.seed; }
};

namespace cli {

enum Command : unsigned { kIngest = 1, kSynth = 2, kTrain = 4, kEval = 8, kGradcheck = 16, kAll = 31 };

struct ConfigKey {
  std::string name;
  unsigned commands;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
  bool is_switch = false;
};

inline std::string to_text(const std::string& v) { return v; }
inline std::string to_text(bool v) { return v ? "true" : "false"; }
inline std::string to_text(std::size_t v) { return std::to_string(v); }
inline std::string to_text(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}
inline std::string to_text(CombinationKind v) { return to_string(v); }
inline std::string to_text(RecurrentCell) { return "gru"; }
inline std::string to_text(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + to_text(v[i]);
  return s;
}

inline void from_text(const std::string& key, const std::string& v, std::string& out) {
  if (v.empty()) throw ConfigError(key + ": empty value");
  out = v;
}
inline void from_text(const std::string& key, const std::string& v, bool& out) {
  if (v == "true" || v == "1") out = true;
  else if (v == "false" || v == "0") out = false;
  else throw ConfigError(key + ": expected true or false, got \"" + v + "\"");
}
inline void from_text(const std::string& key, const std::string& v, std::uint64_t& out) {
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size())
    throw ConfigError(key + ": expected a non-negative integer, got \"" + v + "\"");
}
inline void from_text(const std::string& key, const std::string& v, double& out) {
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError(key + ": expected a number, got \"" + v + "\"");
}
inline void from_text(const std::string& key, const std::string& v, CombinationKind& out) {
  try {
    out = parse_combination(v);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}
inline void from_text(const std::string& key, const std::string& v, RecurrentCell& out) {
  try {
    out = parse_recurrent_cell(v);
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}
inline void from_text(const std::string& key, const std::string& v, std::vector<double>& out) {
  std::vector<double> values;
  std::stringstream ss(v);
  for (std::string cell; std::getline(ss, cell, ',');) {
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    while (!cell.empty() && cell.back() == ' ') cell.pop_back();
    from_text(key, cell, values.emplace_back());
  }
  if (values.empty()) throw ConfigError(key + ": empty list");
  out = std::move(values);
}

template <class Access>
ConfigKey bind(std::string name, unsigned commands, std::string help, Access access) {
  using Value = std::remove_cvref_t<decltype(access(std::declval<RunConfig&>()))>;
  const std::string key = name;
  return {std::move(name), commands, std::move(help),
          [key, access](RunConfig& c, const std::string& v) { from_text(key, v, access(c)); },
          [access](const RunConfig& c) { return to_text(access(c)); }, std::is_same_v<Value, bool>};
}

#define FETCM_FIELD(expr) [](auto& c) -> auto& { return c.expr; }

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      bind("seed", kAll, "seed for every random stream", FETCM_FIELD(train.seed)),
      bind("out", kIngest | kSynth | kTrain | kEval,
           "output path: sessions (ingest, synth), checkpoint (train), per-rank CSV (eval)", FETCM_FIELD(out)),
      bind("input", kIngest | kTrain, "raw click log to read", FETCM_FIELD(input)),
      bind("format", kIngest | kTrain, "format of input: canonical or yandex", FETCM_FIELD(format)),
      bind("train", kTrain | kEval, "training sessions (canonical)", FETCM_FIELD(train_path)),
      bind("valid", kTrain, "validation sessions (canonical)", FETCM_FIELD(valid_path)),
      bind("test", kEval, "test sessions (canonical)", FETCM_FIELD(test_path)),
      bind("split_train", kTrain, "share of input used for training", FETCM_FIELD(split_train)),
      bind("split_valid", kTrain, "share of input used for validation", FETCM_FIELD(split_valid)),
      bind("split_test", kTrain, "share of input held out", FETCM_FIELD(split_test)),
      bind("vocab_min_freq", kTrain, "ids seen fewer times in training map to the unknown row",
           FETCM_FIELD(vocab_min_freq)),
      bind("checkpoint", kEval, "checkpoint to evaluate", FETCM_FIELD(checkpoint)),
      bind("epoch_log", kTrain, "epoch log CSV (default: <out>.epochs.csv)", FETCM_FIELD(epoch_log)),
      bind("baseline", kEval, "also report the rank-CTR baseline fitted on train", FETCM_FIELD(baseline)),
      bind("truth", kSynth | kEval, "ground-truth sidecar CSV (synth writes it, eval reads it for the oracle)",
           FETCM_FIELD(truth)),

      bind("embedding_size", kTrain, "query and url embedding width", FETCM_FIELD(model.embedding_size)),
      bind("hidden_size", kTrain, "hidden width", FETCM_FIELD(model.hidden_size)),
      bind("heads", kTrain, "attention heads", FETCM_FIELD(model.heads)),
      bind("transformer_blocks", kTrain, "attention blocks in the attractiveness branch",
           FETCM_FIELD(model.transformer_blocks)),
      bind("filter_blocks_attr", kTrain, "frequency filter blocks in the attractiveness branch",
           FETCM_FIELD(model.filter_blocks_attr)),
      bind("filter_blocks_exam", kTrain, "frequency filter blocks in the examination branch",
           FETCM_FIELD(model.filter_blocks_exam)),
      bind("dropout", kTrain, "dropout rate", FETCM_FIELD(model.dropout)),
      bind("combination", kTrain, "mul, exp_mul, sigmoid_log, linear or nonlinear",
           FETCM_FIELD(model.combination)),
      bind("max_positions", kIngest | kTrain, "ranks kept per query", FETCM_FIELD(model.max_positions)),
      bind("prob_clamp", kTrain, "click probabilities are clamped to [eps, 1-eps]", FETCM_FIELD(model.prob_clamp)),
      bind("enable_filter_attr", kTrain, "use the attractiveness filter blocks",
           FETCM_FIELD(model.enable_filter_attr)),
      bind("enable_filter_exam", kTrain, "use the examination filter blocks", FETCM_FIELD(model.enable_filter_exam)),
      bind("recurrent_cell", kTrain, "examination recurrent cell (gru)", FETCM_FIELD(model.recurrent_cell)),
      bind("exam_filter_window", kTrain, "steps the examination filter sees; 0 means max_positions",
           FETCM_FIELD(model.exam_filter_window)),

      bind("learning_rate", kTrain, "Adam learning rate", FETCM_FIELD(train.learning_rate)),
      bind("batch_size", kTrain, "sessions per batch", FETCM_FIELD(train.batch_size)),
      bind("weight_decay", kTrain, "L2 weight decay", FETCM_FIELD(train.weight_decay)),
      bind("max_epochs", kTrain, "epoch limit", FETCM_FIELD(train.max_epochs)),
      bind("patience", kTrain, "epochs without validation improvement before stopping",
           FETCM_FIELD(train.patience)),
      bind("adam_beta1", kTrain, "Adam first-moment decay", FETCM_FIELD(train.beta1)),
      bind("adam_beta2", kTrain, "Adam second-moment decay", FETCM_FIELD(train.beta2)),
      bind("adam_eps", kTrain, "Adam denominator epsilon", FETCM_FIELD(train.adam_eps)),
      bind("grad_clip_norm", kTrain, "global gradient norm limit", FETCM_FIELD(train.grad_clip_norm)),

      bind("n_sessions", kSynth, "sessions to generate", FETCM_FIELD(n_sessions)),
      bind("queries_per_session", kSynth, "queries per generated session", FETCM_FIELD(queries_per_session)),
      bind("docs_per_query", kSynth, "documents shown per query", FETCM_FIELD(pbm.docs_per_query)),
      bind("query_ids", kSynth, "distinct queries", FETCM_FIELD(pbm.query_ids)),
      bind("url_ids", kSynth, "distinct urls", FETCM_FIELD(pbm.url_ids)),
      bind("alpha_low", kSynth, "lower bound of the uniform attractiveness draw", FETCM_FIELD(pbm.alpha_low)),
      bind("alpha_high", kSynth, "upper bound of the uniform attractiveness draw", FETCM_FIELD(pbm.alpha_high)),
      bind("gamma", kSynth, "examination probability per rank, comma separated", FETCM_FIELD(pbm.gamma)),
  };
  return keys;
}

#undef FETCM_FIELD

inline const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys())
    if (k.name == name) return &k;
  return nullptr;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// `key = value` lines; `#` starts a comment. Unknown and repeated keys are
// errors.
inline std::map<std::string, std::string> parse_config_text(std::istream& in, const std::string& source) {
  std::map<std::string, std::string> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    const std::string where = source + ":" + std::to_string(line) + ": ";
    text = trim(text.substr(0, text.find('#')));
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    const std::string key = trim(text.substr(0, eq)), value = trim(text.substr(eq + 1));
    if (!find_key(key)) throw ConfigError(where + "unknown key \"" + key + "\"");
    if (value.empty()) throw ConfigError(where + "no value for " + key);
    if (!out.emplace(key, value).second) throw ConfigError(where + "duplicate key " + key);
  }
  return out;
}

inline std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  return parse_config_text(in, path);
}

inline void apply_values(RunConfig& cfg, const std::map<std::string, std::string>& values) {
  for (const auto& [key, value] : values) {
    const ConfigKey* k = find_key(key);
    if (!k) throw ConfigError("unknown key \"" + key + "\"");
    k->set(cfg, value);
  }
}

inline void validate(const RunConfig& cfg) {
  cfg.model.validate();
  cfg.train.validate();
  if (cfg.format != "canonical" && cfg.format != "yandex")
    throw ConfigError("format must be canonical or yandex, got \"" + cfg.format + "\"");
  if (cfg.vocab_min_freq == 0) throw ConfigError("vocab_min_freq must be >= 1");
}

inline std::string stats_line(const std::vector<Session>& sessions, std::size_t warnings) {
  const LogStats s = count(sessions);
  return "sessions=" + std::to_string(s.sessions) + " queries=" + std::to_string(s.queries) +
         " docs=" + std::to_string(s.docs) + " warnings=" + std::to_string(warnings);
}

inline std::string require(const std::string& value, const std::string& key, const std::string& command) {
  if (value.empty()) throw ConfigError(command + " needs " + key);
  return value;
}

inline YandexLog read_log(const std::string& path, const std::string& format, std::size_t max_positions) {
  const int P = static_cast<int>(max_positions);
  if (format == "canonical") return {read_canonical_file(path, P), 0};
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return parse_yandex(in, P);
}

inline int cmd_ingest(const RunConfig& cfg, std::ostream& out) {
  const std::string input = require(cfg.input, "input", "ingest");
  const std::string dest = require(cfg.out, "out", "ingest");
  const YandexLog log = read_log(input, cfg.format, cfg.model.max_positions);
  write_canonical_file(dest, log.sessions);
  out << stats_line(log.sessions, log.warnings) << '\n';
  return 0;
}

inline std::string truth_path(const RunConfig& cfg) { return cfg.truth.empty() ? cfg.out + ".truth.csv" : cfg.truth; }

inline int cmd_synth(const RunConfig& cfg, std::ostream& out) {
  const std::string dest = require(cfg.out, "out", "synth");
  const GroundTruth truth = make_pbm_truth(cfg.pbm, cfg.seed());
  const auto sessions = synthesize_pbm(truth, cfg.n_sessions, cfg.queries_per_session, cfg.pbm.docs_per_query,
                                       cfg.seed());
  write_canonical_file(dest, sessions);
  std::ofstream sidecar(truth_path(cfg), std::ios::binary);
  if (!sidecar) throw Error("cannot write " + truth_path(cfg));
  write_truth_csv(sidecar, truth);
  if (!sidecar) throw Error("write failed: " + truth_path(cfg));
  out << stats_line(sessions, 0) << '\n';
  return 0;
}

inline DataSplit training_data(const RunConfig& cfg) {
  const int P = static_cast<int>(cfg.model.max_positions);
  if (!cfg.train_path.empty()) {
    DataSplit d;
    d.train = read_canonical_file(cfg.train_path, P);
    d.valid = read_canonical_file(require(cfg.valid_path, "valid", "train"), P);
    return d;
  }
  if (cfg.input.empty()) throw ConfigError("train needs train and valid, or an input log to split");
  return split(read_log(cfg.input, cfg.format, cfg.model.max_positions).sessions,
               {cfg.split_train, cfg.split_valid, cfg.split_test}, cfg.seed());
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out, std::ostream& err) {
  const std::string ckpt_path = cfg.out.empty() ? "fetcm.ckpt" : cfg.out;
  const std::string log_path = cfg.epoch_log.empty() ? ckpt_path + ".epochs.csv" : cfg.epoch_log;
  const DataSplit data = training_data(cfg);
  const Vocabulary vocab = build_vocab(data.train, static_cast<int>(cfg.vocab_min_freq));
  ClickModel model(cfg.model, vocab.queries.size(), vocab.urls.size(), cfg.seed());
  const TrainResult result = train(model, vocab, data.train, data.valid, cfg.train, [&](const EpochRecord& r) {
    err << "epoch " << r.epoch << " train_loss=" << r.train_loss << " valid_ll=" << r.valid_ll
        << " valid_ppl=" << r.valid_ppl << (r.clip_events ? " clipped=" + std::to_string(r.clip_events) : "")
        << std::endl;
  });
  save_checkpoint(result.best, ckpt_path);
  std::ofstream log(log_path, std::ios::binary);
  if (!log) throw Error("cannot write " + log_path);
  write_epoch_log(log, result.log);
  if (!log) throw Error("write failed: " + log_path);

  const EpochRecord* best = nullptr;
  for (const auto& r : result.log)
    if (r.epoch == result.best.epoch) best = &r;
  if (!best) throw ContractError("best epoch missing from the epoch log");
  out << std::setprecision(10) << "valid_ll=" << best->valid_ll << " valid_ppl=" << best->valid_ppl
      << " train_loss=" << best->train_loss << " best_epoch=" << best->epoch << " epochs=" << result.log.size()
      << '\n';
  return 0;
}

inline int cmd_eval(const RunConfig& cfg, std::ostream& out) {
  const std::string report_path = cfg.out.empty() ? "eval.csv" : cfg.out;
  const Checkpoint ckpt = load_checkpoint(require(cfg.checkpoint, "checkpoint", "eval"));
  const ClickModel model = model_from_checkpoint(ckpt);
  const std::size_t P = ckpt.config.max_positions;
  const auto test = read_canonical_file(require(cfg.test_path, "test", "eval"), static_cast<int>(P));
  EvalReport report = evaluate(predict(model, test, ckpt.vocab), P);
  if (cfg.baseline) {
    const auto train_set = read_canonical_file(require(cfg.train_path, "train", "eval with baseline"),
                                               static_cast<int>(P));
    report.baseline_ppl = overall_ppl(RankCtrBaseline(train_set, P).predict(test), P);
  }
  if (!cfg.truth.empty()) {
    std::ifstream in(cfg.truth, std::ios::binary);
    if (!in) throw Error("cannot open " + cfg.truth);
    report.oracle_ppl = pbm_oracle_ppl(test, read_truth_csv(in), P);
  }
  std::ofstream csv(report_path, std::ios::binary);
  if (!csv) throw Error("cannot write " + report_path);
  write_report_csv(csv, report);
  if (!csv) throw Error("write failed: " + report_path);
  out << summary_line(report) << '\n';
  return 0;
}

inline int cmd_gradcheck(const RunConfig& cfg, bool corrupt_fft_adjoint, std::ostream& out) {
  debug::corrupt_fft_adjoint = corrupt_fft_adjoint;
  std::vector<GradcheckRow> rows;
  try {
    rows = run_gradcheck_suite(cfg.seed());
  } catch (...) {
    debug::corrupt_fft_adjoint = false;
    throw;
  }
  debug::corrupt_fft_adjoint = false;
  bool ok = true;
  out << "name,max_rel_err,pass\n" << std::setprecision(6);
  for (const auto& r : rows) {
    out << r.name << ',' << r.max_rel_err << ',' << (r.pass ? "true" : "false") << '\n';
    ok = ok && r.pass;
  }
  return ok ? 0 : 4;
}

inline std::string config_help() {
  std::string s =
      "\nConfig file: one `key = value` per line, `#` starts a comment. Unknown keys are\n"
      "rejected. Every key can also be passed as --key value, which overrides the file.\n\nKeys (default):\n";
  const RunConfig defaults;
  for (const auto& k : config_keys()) {
    std::string line = "  " + k.name + " (" + k.get(defaults) + ")";
    if (line.size() < 36) line.resize(36, ' ');
    s += line + " " + k.help + "\n";
  }
  s += "\nExit codes: 0 success, 2 input or config error, 3 training failure, 4 gradient check failure.\n";
  return s;
}

}  // namespace cli

// Runs the command line and returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli;
  CLI::App app("FE-TCM click model toolkit", "fetcm");
  app.require_subcommand(1);
  app.footer(config_help());

  struct Sub {
    CLI::App* app;
    Command command;
  };
  std::vector<Sub> subs = {
      {app.add_subcommand("ingest", "convert a click log to the canonical format"), kIngest},
      {app.add_subcommand("synth", "generate sessions from a position-based model"), kSynth},
      {app.add_subcommand("train", "train a model and write the best checkpoint"), kTrain},
      {app.add_subcommand("eval", "evaluate a checkpoint on test sessions"), kEval},
      {app.add_subcommand("gradcheck", "finite-difference gradient checks"), kGradcheck},
  };
  std::string config_path;
  bool corrupt = false;
  std::map<std::string, std::string> flags;
  std::vector<std::pair<CLI::Option*, std::string>> key_options;
  const RunConfig defaults;
  for (auto& s : subs) {
    s.app->add_option("--config,-c", config_path, "run configuration file");
    for (const auto& k : config_keys()) {
      if (!(k.commands & s.command)) continue;
      std::string names = "--" + k.name;
      if (k.name.find('_') != std::string::npos) {
        std::string dashed = k.name;
        std::replace(dashed.begin(), dashed.end(), '_', '-');
        names += ",--" + dashed;
      }
      CLI::Option* opt = k.is_switch ? s.app->add_flag(names, flags[k.name], k.help)
                                     : s.app->add_option(names, flags[k.name], k.help);
      key_options.emplace_back(opt->default_str(k.get(defaults)), k.name);
    }
  }
  subs[4].app->add_flag("--corrupt-fft-adjoint", corrupt, "break the FFT backward pass")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) apply_values(cfg, read_config_file(config_path));
    for (const auto& [opt, name] : key_options)
      if (opt->count()) find_key(name)->set(cfg, flags[name]);
    validate(cfg);
    for (const auto& s : subs) {
      if (!s.app->parsed()) continue;
      switch (s.command) {
        case kIngest: return cmd_ingest(cfg, out);
        case kSynth: return cmd_synth(cfg, out);
        case kTrain: return cmd_train(cfg, out, err);
        case kEval: return cmd_eval(cfg, out);
        case kGradcheck: return cmd_gradcheck(cfg, corrupt, out);
        default: break;
      }
    }
    return 2;
  } catch (const TrainingError& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace fetcm

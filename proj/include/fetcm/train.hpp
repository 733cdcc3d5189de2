#pragma once

// Adam training with early stopping on validation log-likelihood, and the
// binary checkpoint format.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fetcm/clicklog.hpp"
#include "fetcm/error.hpp"
#include "fetcm/eval.hpp"
#include "fetcm/model.hpp"

namespace fetcm {

struct TrainConfig {
  double learning_rate = 0.001;
  std::size_t batch_size = 64;
  double weight_decay = 1e-5;
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 5.0;

  // learning_rate 0 is allowed: it freezes the model, which early-stopping
  // tests rely on.
  void validate() const {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
      throw ConfigError("learning_rate must be a finite value >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (max_epochs == 0) throw ConfigError("max_epochs must be >= 1");
    if (patience == 0) throw ConfigError("patience must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("adam betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (!(grad_clip_norm > 0.0)) throw ConfigError("grad_clip_norm must be > 0");
  }
};

struct OptimizerState {
  std::vector<std::vector<double>> m, v;  // parallel to Parameters::items()
  std::uint64_t t = 0;

  static OptimizerState zeros_like(const Parameters& params) {
    OptimizerState s;
    for (const auto& [name, p] : params.items()) {
      s.m.emplace_back(p.numel(), 0.0);
      s.v.emplace_back(p.numel(), 0.0);
    }
    return s;
  }
};

struct StepInfo {
  double grad_norm = 0.0;
  bool clipped = false;
};

// One Adam step from the gradients stored on the parameters. The global
// gradient norm is clipped first, then weight decay is added to the gradient
// (coupled L2), then the bias-corrected moment update is applied.
inline StepInfo adam_update(const Parameters& params, OptimizerState& state, const TrainConfig& cfg) {
  const auto& items = params.items();
  if (state.m.size() != items.size() || state.v.size() != items.size())
    throw ContractError("optimizer state has " + std::to_string(state.m.size()) + " slots for " +
                        std::to_string(items.size()) + " parameters");
  double sq = 0.0;
  for (const auto& [name, p] : items) {
    const auto g = p.grad_view();
    if (!g.empty() && g.size() != p.numel()) throw ContractError("gradient size mismatch for " + name);
    for (double x : g) {
      if (!std::isfinite(x)) throw TrainingError("non-finite gradient in parameter " + name);
      sq += x * x;
    }
  }
  StepInfo info;
  info.grad_norm = std::sqrt(sq);
  const double clip = info.grad_norm > cfg.grad_clip_norm ? cfg.grad_clip_norm / info.grad_norm : 1.0;
  info.clipped = clip < 1.0;

  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t k = 0; k < items.size(); ++k) {
    Tensor p = items[k].second;
    if (p.numel() != state.m[k].size()) throw ContractError("optimizer state shape mismatch for " + items[k].first);
    const auto g = p.grad_view();
    double* w = p.data();
    double* m = state.m[k].data();
    double* v = state.v[k].data();
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = (g.empty() ? 0.0 : g[i] * clip) + cfg.weight_decay * w[i];
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
      w[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.adam_eps);
    }
  }
  return info;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[6] = {'F', 'E', 'T', 'C', 'M', '\0'};

struct Checkpoint {
  ModelConfig config;
  Vocabulary vocab;
  std::vector<NamedTensor> parameters;  // detached copies
  OptimizerState optimizer;
  std::size_t epoch = 0;
  double best_valid_ll = -std::numeric_limits<double>::infinity();
};

inline std::vector<NamedTensor> snapshot(const Parameters& params) {
  std::vector<NamedTensor> out;
  for (const auto& [name, t] : params.items()) out.emplace_back(name, t.clone());
  return out;
}

inline void restore(Parameters& params, const std::vector<NamedTensor>& values) {
  if (values.size() != params.size())
    throw LoadError("checkpoint has " + std::to_string(values.size()) + " parameters, model has " +
                    std::to_string(params.size()));
  for (const auto& [name, src] : values) {
    if (!params.contains(name)) throw LoadError("model has no parameter " + name);
    Tensor dst = params.get(name);
    if (dst.shape() != src.shape())
      throw LoadError("parameter " + name + " has shape " + shape_str(src.shape()) + " in the checkpoint, " +
                      shape_str(dst.shape()) + " in the model");
    std::copy(src.values().begin(), src.values().end(), dst.values().begin());
  }
}

inline Checkpoint make_checkpoint(const ClickModel& model, const Vocabulary& vocab, const OptimizerState& opt,
                                  std::size_t epoch, double best_valid_ll) {
  return {model.config(), vocab, snapshot(model.parameters()), opt, epoch, best_valid_ll};
}

inline ClickModel model_from_checkpoint(const Checkpoint& ckpt) {
  ClickModel m(ckpt.config, ckpt.vocab.queries.size(), ckpt.vocab.urls.size(), 0);
  restore(m.parameters(), ckpt.parameters);
  return m;
}

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"embedding_size", c.embedding_size},
          {"hidden_size", c.hidden_size},
          {"heads", c.heads},
          {"transformer_blocks", c.transformer_blocks},
          {"filter_blocks_attr", c.filter_blocks_attr},
          {"filter_blocks_exam", c.filter_blocks_exam},
          {"dropout", c.dropout},
          {"combination", to_string(c.combination)},
          {"max_positions", c.max_positions},
          {"prob_clamp", c.prob_clamp},
          {"enable_filter_attr", c.enable_filter_attr},
          {"enable_filter_exam", c.enable_filter_exam},
          {"recurrent_cell", "gru"},
          {"exam_filter_window", c.exam_filter_window}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.embedding_size = j.at("embedding_size").get<std::size_t>();
  c.hidden_size = j.at("hidden_size").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.transformer_blocks = j.at("transformer_blocks").get<std::size_t>();
  c.filter_blocks_attr = j.at("filter_blocks_attr").get<std::size_t>();
  c.filter_blocks_exam = j.at("filter_blocks_exam").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.combination = parse_combination(j.at("combination").get<std::string>());
  c.max_positions = j.at("max_positions").get<std::size_t>();
  c.prob_clamp = j.at("prob_clamp").get<double>();
  c.enable_filter_attr = j.at("enable_filter_attr").get<bool>();
  c.enable_filter_exam = j.at("enable_filter_exam").get<bool>();
  c.recurrent_cell = parse_recurrent_cell(j.at("recurrent_cell").get<std::string>());
  c.exam_filter_window = j.at("exam_filter_window").get<std::size_t>();
  return c;
}

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T take(std::istream& is, const std::string& what) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) throw LoadError("checkpoint truncated in " + what);
  return value;
}

}  // namespace detail

// Layout: magic, u32 version, u64 header length, JSON header, then float64
// arrays in manifest order. The manifest lists the parameters followed by the
// Adam moments ("adam.m/<name>", "adam.v/<name>").
inline void save_checkpoint(const Checkpoint& ckpt, std::ostream& os) {
  using nlohmann::json;
  json manifest = json::array();
  std::vector<std::span<const double>> arrays;
  std::uint64_t offset = 0;
  auto add = [&](const std::string& name, const Shape& shape, std::span<const double> data) {
    manifest.push_back({{"name", name}, {"shape", shape}, {"offset", offset}});
    arrays.push_back(data);
    offset += data.size() * sizeof(double);
  };
  for (const auto& [name, t] : ckpt.parameters) add(name, t.shape(), t.values());
  const bool has_moments = !ckpt.optimizer.m.empty();
  if (has_moments) {
    if (ckpt.optimizer.m.size() != ckpt.parameters.size() || ckpt.optimizer.v.size() != ckpt.parameters.size())
      throw ContractError("optimizer state does not match the checkpoint parameters");
    for (std::size_t k = 0; k < ckpt.parameters.size(); ++k) {
      const auto& [name, t] = ckpt.parameters[k];
      add("adam.m/" + name, t.shape(), ckpt.optimizer.m[k]);
      add("adam.v/" + name, t.shape(), ckpt.optimizer.v[k]);
    }
  }
  const json header = {{"config", model_config_json(ckpt.config)},
                       {"vocab",
                        {{"query_size", ckpt.vocab.queries.size()},
                         {"url_size", ckpt.vocab.urls.size()},
                         {"queries", ckpt.vocab.queries.raw_ids()},
                         {"urls", ckpt.vocab.urls.raw_ids()}}},
                       {"manifest", manifest},
                       {"optimizer_step", ckpt.optimizer.t},
                       {"epoch", ckpt.epoch},
                       {"best_valid_ll", ckpt.best_valid_ll}};
  const std::string text = header.dump();
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (auto a : arrays) os.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(a.size_bytes()));
  if (!os) throw Error("failed writing checkpoint");
}

inline Checkpoint load_checkpoint(std::istream& is) {
  using nlohmann::json;
  char magic[sizeof(kCheckpointMagic)];
  if (!is.read(magic, sizeof(magic))) throw LoadError("checkpoint truncated in magic bytes");
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw LoadError("not a checkpoint: bad magic bytes");
  const auto version = detail::take<std::uint32_t>(is, "version");
  if (version != kCheckpointVersion)
    throw LoadError("checkpoint version " + std::to_string(version) + " is not supported (expected version " +
                    std::to_string(kCheckpointVersion) + ")");
  const auto header_len = detail::take<std::uint64_t>(is, "header length");
  std::string text(header_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(header_len))) throw LoadError("checkpoint truncated in header");

  Checkpoint ckpt;
  std::vector<std::pair<std::string, Shape>> entries;
  std::vector<std::uint64_t> offsets;
  try {
    const json header = json::parse(text);
    ckpt.config = model_config_from_json(header.at("config"));
    const auto& v = header.at("vocab");
    ckpt.vocab.queries = IdMap(v.at("queries").get<std::vector<std::int64_t>>());
    ckpt.vocab.urls = IdMap(v.at("urls").get<std::vector<std::int64_t>>());
    if (ckpt.vocab.queries.size() != v.at("query_size").get<std::size_t>() ||
        ckpt.vocab.urls.size() != v.at("url_size").get<std::size_t>())
      throw LoadError("vocabulary sizes disagree with the stored ids");
    for (const auto& e : header.at("manifest")) {
      entries.emplace_back(e.at("name").get<std::string>(), e.at("shape").get<Shape>());
      offsets.push_back(e.at("offset").get<std::uint64_t>());
    }
    ckpt.optimizer.t = header.at("optimizer_step").get<std::uint64_t>();
    ckpt.epoch = header.at("epoch").get<std::size_t>();
    ckpt.best_valid_ll = header.at("best_valid_ll").is_null() ? -std::numeric_limits<double>::infinity()
                                                               : header.at("best_valid_ll").get<double>();
  } catch (const json::exception& e) {
    throw LoadError(std::string("malformed checkpoint header: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint header: ") + e.what());
  }

  std::uint64_t offset = 0;
  for (std::size_t k = 0; k < entries.size(); ++k) {
    const auto& [name, shape] = entries[k];
    if (offsets[k] != offset) throw LoadError("manifest offset of " + name + " is inconsistent");
    std::vector<double> data(shape_numel(shape));
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double))))
      throw LoadError("checkpoint truncated in array " + name);
    offset += data.size() * sizeof(double);
    if (name.starts_with("adam.m/"))
      ckpt.optimizer.m.push_back(std::move(data));
    else if (name.starts_with("adam.v/"))
      ckpt.optimizer.v.push_back(std::move(data));
    else
      ckpt.parameters.emplace_back(name, Tensor(shape, std::move(data)));
  }
  if (!ckpt.optimizer.m.empty() &&
      (ckpt.optimizer.m.size() != ckpt.parameters.size() || ckpt.optimizer.v.size() != ckpt.parameters.size()))
    throw LoadError("checkpoint optimizer moments do not match its parameters");
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path);
  save_checkpoint(ckpt, os);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open " + path);
  return load_checkpoint(is);
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double valid_ll = 0.0;
  double valid_ppl = 0.0;
  std::size_t clip_events = 0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochRecord> log;
  bool stopped_early = false;
};

inline void write_epoch_log(std::ostream& os, const std::vector<EpochRecord>& log) {
  os << "epoch,train_loss,valid_ll,valid_ppl,clip_events\n" << std::setprecision(17);
  for (const auto& r : log)
    os << r.epoch << ',' << r.train_loss << ',' << r.valid_ll << ',' << r.valid_ppl << ',' << r.clip_events << '\n';
}

using EpochCallback = std::function<void(const EpochRecord&)>;

// Trains in place. On return the model holds the parameters of the epoch with
// the highest validation log-likelihood.
inline TrainResult train(ClickModel& model, const Vocabulary& vocab, const std::vector<Session>& train_set,
                         const std::vector<Session>& valid_set, const TrainConfig& cfg,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  check_vocab(model, vocab);
  if (train_set.empty()) throw ConfigError("training split is empty");
  if (valid_set.empty()) throw ConfigError("validation split is empty");
  const std::size_t P = model.config().max_positions;
  const double eps = model.config().prob_clamp;
  const Parameters& params = model.parameters();

  TrainResult result;
  OptimizerState opt = OptimizerState::zeros_like(params);
  Rng dropout_rng = make_rng(cfg.seed, "dropout");
  result.best = make_checkpoint(model, vocab, opt, 0, -std::numeric_limits<double>::infinity());
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    BatchStream stream(train_set, vocab, cfg.batch_size, P, cfg.seed + epoch, true);
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t docs = 0, batch_index = 0;
    while (auto batch = stream.next()) {
      ++batch_index;
      const std::string where = " at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index);
      Graph g;
      BatchScores s;
      Tensor loss;
      try {
        s = model.forward(g, *batch, true, dropout_rng);
        loss = click_loss(g, s.click, s.labels, s.valid);
      } catch (const NumericError& e) {
        throw TrainingError(std::string("training diverged (") + e.what() + ")" + where);
      }
      if (!std::isfinite(loss.item())) throw TrainingError("loss diverged" + where);
      params.zero_grad();
      g.backward(loss);
      StepInfo step;
      try {
        step = adam_update(params, opt, cfg);
      } catch (const TrainingError& e) {
        throw TrainingError(e.what() + where);
      }
      rec.clip_events += step.clipped;
      loss_sum += loss.item() * static_cast<double>(s.labels.size());
      docs += s.labels.size();
    }
    rec.train_loss = loss_sum / static_cast<double>(docs);
    const Predictions vp = predict(model, valid_set, vocab);
    rec.valid_ll = log_likelihood(vp, eps);
    rec.valid_ppl = overall_ppl(vp, P, eps);
    result.log.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (rec.valid_ll > result.best.best_valid_ll) {
      result.best = make_checkpoint(model, vocab, opt, epoch, rec.valid_ll);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      result.stopped_early = true;
      break;
    }
  }
  restore(model.parameters(), result.best.parameters);
  return result;
}

}  // namespace fetcm

#pragma once

// Filter-enhanced transformer click model.
//
// Two branches score every document of a session:
//   attraction   four field tokens [query, url, previous click in the list,
//                position] -> filter blocks -> transformer blocks ->
//                concat -> linear -> sigmoid
//   examination  per-step [position, previous click in the session] ->
//                causal filter blocks -> session GRU -> linear -> sigmoid
// and a combination function merges them into a click probability.
//
// Click context ids: 0 = no previous document, 1 = not clicked, 2 = clicked.
// Neither branch ever sees the click of the document it scores.

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fetcm/attention.hpp"
#include "fetcm/clicklog.hpp"
#include "fetcm/fft.hpp"
#include "fetcm/gradcheck.hpp"
#include "fetcm/gru.hpp"
#include "fetcm/rng.hpp"
#include "fetcm/tensor.hpp"

namespace fetcm {

enum class CombinationKind { mul, exp_mul, sigmoid_log, linear, nonlinear };

inline const char* to_string(CombinationKind k) {
  switch (k) {
    case CombinationKind::mul: return "mul";
    case CombinationKind::exp_mul: return "exp_mul";
    case CombinationKind::sigmoid_log: return "sigmoid_log";
    case CombinationKind::linear: return "linear";
    case CombinationKind::nonlinear: return "nonlinear";
  }
  return "?";
}

inline CombinationKind parse_combination(const std::string& s) {
  for (auto k : {CombinationKind::mul, CombinationKind::exp_mul, CombinationKind::sigmoid_log,
                 CombinationKind::linear, CombinationKind::nonlinear})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown combination kind \"" + s + "\"");
}

// Only the GRU is implemented; the enum marks where other cells would plug in.
enum class RecurrentCell { gru };

inline RecurrentCell parse_recurrent_cell(const std::string& s) {
  if (s == "gru") return RecurrentCell::gru;
  throw ConfigError("unknown recurrent cell \"" + s + "\" (supported: gru)");
}

inline constexpr std::int64_t kNoPreviousClick = 0;
inline constexpr std::int64_t kNotClicked = 1;
inline constexpr std::int64_t kClicked = 2;

struct ModelConfig {
  std::size_t embedding_size = 64;
  std::size_t hidden_size = 64;
  std::size_t heads = 8;
  std::size_t transformer_blocks = 1;
  std::size_t filter_blocks_attr = 1;
  std::size_t filter_blocks_exam = 1;
  double dropout = 0.5;
  CombinationKind combination = CombinationKind::exp_mul;
  std::size_t max_positions = kDefaultMaxPositions;
  double prob_clamp = 1e-6;
  bool enable_filter_attr = true;
  bool enable_filter_exam = true;
  RecurrentCell recurrent_cell = RecurrentCell::gru;
  // Length of the causal window the examination filter sees; 0 means max_positions.
  std::size_t exam_filter_window = 0;

  std::size_t ffn_size() const { return 4 * hidden_size; }
  std::size_t exam_window() const { return exam_filter_window ? exam_filter_window : max_positions; }

  void validate() const {
    if (embedding_size == 0 || hidden_size == 0) throw ConfigError("embedding_size and hidden_size must be positive");
    if (heads == 0 || hidden_size % heads != 0)
      throw ConfigError("hidden_size " + std::to_string(hidden_size) + " is not divisible by heads " +
                        std::to_string(heads));
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (!(prob_clamp > 0.0 && prob_clamp < 0.5)) throw ConfigError("prob_clamp must lie in (0, 0.5)");
    if (max_positions == 0) throw ConfigError("max_positions must be positive");
  }
};

// Ordered, named parameter set.
class Parameters {
 public:
  const Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw ContractError("duplicate parameter " + name);
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }
  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named " + name);
    return items_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<NamedTensor>& items() const { return items_; }
  std::size_t size() const { return items_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }
  void zero_grad() const {
    for (const auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<NamedTensor> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Building blocks

struct FilterBlockParams {
  Tensor w_re, w_im;  // [bins x d]; undefined when the filter is switched off
  Tensor ln_gamma, ln_beta;
  bool enabled() const { return w_re.defined(); }
};

// One learnable filter block over `groups` stacked [n x d] sequences:
// layer_norm(x + dropout(irfft(W * rfft(x)))). A block without filter weights
// reduces to layer_norm(x).
inline Tensor filter_block_forward(Graph& g, const Tensor& x, const FilterBlockParams& p, std::size_t groups,
                                   double dropout_p, bool training, Rng& rng) {
  if (!p.enabled()) return layer_norm(g, x, p.ln_gamma, p.ln_beta);
  const std::size_t n = x.rows() / groups;
  const ComplexSpectrum spec = rfft(g, x, groups);
  const Tensor filtered = irfft(g, spectrum_filter_mul(g, spec, {p.w_re, p.w_im}), n);
  return layer_norm(g, add(g, x, dropout(g, filtered, dropout_p, training, rng)), p.ln_gamma, p.ln_beta);
}

// Causal variant for step sequences. Rows of x are steps of consecutive
// sequences; `bounds` holds each sequence's first row plus an end sentinel.
// Step t is filtered inside a window of `window` rows that ends at t (zeros
// fill the window when fewer steps exist), so output t depends only on steps
// up to t. Filtering the zero-padded window and keeping its last row is a
// causal convolution with taps irfft(W), which is how it is computed.
inline Tensor causal_filter_block_forward(Graph& g, const Tensor& x, const std::vector<std::size_t>& bounds,
                                          std::size_t window, const FilterBlockParams& p, double dropout_p,
                                          bool training, Rng& rng) {
  if (!p.enabled()) return layer_norm(g, x, p.ln_gamma, p.ln_beta);
  if (window == 0) throw ConfigError("filter window must be positive");
  const ComplexSpectrum filter{1, window, p.w_re.rows(), p.w_re.cols(), p.w_re, p.w_im};
  const Tensor taps = irfft(g, filter, window);
  const Tensor own = causal_convolution(g, x, taps, bounds);
  return layer_norm(g, add(g, x, dropout(g, own, dropout_p, training, rng)), p.ln_gamma, p.ln_beta);
}

struct AttentionParams {
  Tensor wq, wk, wv;  // [d x hidden]
  Tensor wo;          // [hidden x d]
};

// Multi-head self-attention within groups of `group_size` tokens.
inline Tensor multi_head_attention(Graph& g, const Tensor& tokens, const AttentionParams& p, std::size_t heads,
                                   std::size_t group_size) {
  const Tensor q = matmul(g, tokens, p.wq), k = matmul(g, tokens, p.wk), v = matmul(g, tokens, p.wv);
  return matmul(g, grouped_attention(g, q, k, v, group_size, heads), p.wo);
}

struct FfnParams {
  Tensor w1, b1, w2, b2;
};

inline Tensor position_wise_ffn(Graph& g, const Tensor& x, const FfnParams& p) {
  const Tensor inner = relu(g, add_bias(g, matmul(g, x, p.w1), p.b1));
  return add_bias(g, matmul(g, inner, p.w2), p.b2);
}

struct TransformerBlockParams {
  AttentionParams attention;
  Tensor ln1_gamma, ln1_beta;
  FfnParams ffn;
  Tensor ln2_gamma, ln2_beta;
};

inline Tensor transformer_block_forward(Graph& g, const Tensor& x, const TransformerBlockParams& p,
                                        std::size_t heads, std::size_t group_size, double dropout_p,
                                        bool training, Rng& rng) {
  const Tensor att = multi_head_attention(g, x, p.attention, heads, group_size);
  const Tensor s = layer_norm(g, add(g, x, dropout(g, att, dropout_p, training, rng)), p.ln1_gamma, p.ln1_beta);
  const Tensor f = position_wise_ffn(g, s, p.ffn);
  return layer_norm(g, add(g, s, dropout(g, f, dropout_p, training, rng)), p.ln2_gamma, p.ln2_beta);
}

// Combination parameters; only the ones the chosen kind uses are defined.
struct CombineParams {
  Tensor lambda, mu;      // exp_mul
  Tensor alpha, beta;     // linear
  Tensor w1, b1, w2, b2;  // nonlinear: 2 -> 16 -> 1
};

namespace detail {

// Elementwise C = f(A, E, theta) with scalar parameters theta, given the
// value and partial derivatives per element.
struct CombineTerms {
  double value, d_a, d_e, d_p0, d_p1;
};

template <typename F>
Tensor fused_combine(Graph& g, const char* name, const Tensor& a, const Tensor& e, const Tensor& p0,
                     const Tensor& p1, F f) {
  require_same_shape(a, e, name);
  const std::size_t n = a.numel();
  const double t0 = p0.defined() ? p0.item() : 0.0, t1 = p1.defined() ? p1.item() : 0.0;
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < n; ++i) out[i] = f(a[i], e[i], t0, t1).value;
  const bool params = p0.defined();
  const bool tracked = params ? g.tracks(a, e, p0, p1) : g.tracks(a, e);
  if (tracked) {
    std::vector<Tensor> inputs{a, e};
    if (params) {
      inputs.push_back(p0);
      inputs.push_back(p1);
    }
    g.record(name, std::move(inputs), {out}, [a, e, p0, p1, out, n, t0, t1, params, f]() mutable {
      const auto go = out.grad_view();
      double* ga = a.requires_grad() ? a.grad_data() : nullptr;
      double* ge = e.requires_grad() ? e.grad_data() : nullptr;
      double s0 = 0.0, s1 = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const CombineTerms c = f(a[i], e[i], t0, t1);
        if (ga) ga[i] += go[i] * c.d_a;
        if (ge) ge[i] += go[i] * c.d_e;
        s0 += go[i] * c.d_p0;
        s1 += go[i] * c.d_p1;
      }
      if (params && p0.requires_grad()) p0.grad()[0] += s0;
      if (params && p1.requires_grad()) p1.grad()[0] += s1;
    });
  }
  return out;
}

}  // namespace detail

// Unclamped combination of attraction and examination probabilities.
inline Tensor combine_raw(Graph& g, const Tensor& a, const Tensor& e, CombinationKind kind, const CombineParams& p) {
  using detail::CombineTerms;
  switch (kind) {
    case CombinationKind::mul:
      return detail::fused_combine(g, "combine_mul", a, e, Tensor(), Tensor(),
                                   [](double x, double y, double, double) { return CombineTerms{x * y, y, x, 0, 0}; });
    case CombinationKind::exp_mul:
      return detail::fused_combine(g, "combine_exp_mul", a, e, p.lambda, p.mu,
                                   [](double x, double y, double lam, double mu) {
                                     const double c = std::pow(x, lam) * std::pow(y, mu);
                                     return CombineTerms{c, lam * c / x, mu * c / y, c * std::log(x), c * std::log(y)};
                                   });
    case CombinationKind::sigmoid_log:
      return detail::fused_combine(g, "combine_sigmoid_log", a, e, Tensor(), Tensor(),
                                   [](double x, double y, double, double) {
                                     const double px = 1.0 + x, py = 1.0 + y;
                                     return CombineTerms{4.0 * x * y / (px * py), 4.0 * y / (py * px * px),
                                                         4.0 * x / (px * py * py), 0, 0};
                                   });
    case CombinationKind::linear:
      return detail::fused_combine(g, "combine_linear", a, e, p.alpha, p.beta,
                                   [](double x, double y, double al, double be) {
                                     return CombineTerms{al * x + be * y, al, be, x, y};
                                   });
    case CombinationKind::nonlinear: {
      const Tensor in = concat_cols(g, {a, e});
      const Tensor hidden = relu(g, add_bias(g, matmul(g, in, p.w1), p.b1));
      return sigmoid(g, add_bias(g, matmul(g, hidden, p.w2), p.b2));
    }
  }
  throw ConfigError("unknown combination kind");
}

inline Tensor combine(Graph& g, const Tensor& a, const Tensor& e, CombinationKind kind, const CombineParams& p,
                      double eps) {
  return clamp(g, combine_raw(g, a, e, kind, p), eps, 1.0 - eps);
}

inline Tensor click_loss(Graph& g, const Tensor& c, std::span<const double> labels,
                         std::span<const std::uint8_t> mask) {
  return binary_cross_entropy(g, c, labels, mask);
}

// ---------------------------------------------------------------------------
// Model

// Scores for the real documents of a batch, in slot order.
struct BatchScores {
  Tensor attraction;                // [N x 1]
  Tensor examination;               // [N x 1]
  Tensor click;                     // [N x 1]
  std::vector<double> labels;       // [N]
  std::vector<std::size_t> slots;   // batch slot of each document
  std::vector<std::uint8_t> valid;  // all ones, for the loss
};

// Per-slot scores of one session, padded to max_positions per query.
struct ForwardOutput {
  std::vector<double> attraction, examination, click;
  std::vector<std::uint8_t> mask;
};

class ClickModel {
 public:
  ClickModel(const ModelConfig& config, std::size_t query_vocab, std::size_t url_vocab, std::uint64_t seed)
      : config_(config), query_vocab_(query_vocab), url_vocab_(url_vocab) {
    config_.validate();
    if (query_vocab < 2 || url_vocab < 2) throw ConfigError("vocabulary sizes must include padding and unknown rows");
    init(seed);
  }

  const ModelConfig& config() const { return config_; }
  Parameters& parameters() { return params_; }
  const Parameters& parameters() const { return params_; }
  std::size_t query_vocab() const { return query_vocab_; }
  std::size_t url_vocab() const { return url_vocab_; }

  BatchScores forward(Graph& g, const Batch& batch, bool training, Rng& rng) const {
    if (batch.max_positions != config_.max_positions)
      throw ConfigError("batch padded to " + std::to_string(batch.max_positions) + " positions, model expects " +
                        std::to_string(config_.max_positions));
    const std::size_t P = batch.max_positions;
    BatchScores out;
    // Real documents in session order with their click contexts.
    std::vector<std::int64_t> q_ids, u_ids, pos_ids, list_ctx, session_ctx;
    std::vector<std::size_t> bounds{0};
    for (std::size_t s = 0; s < batch.session_count(); ++s) {
      std::int64_t prev_in_session = kNoPreviousClick;
      for (std::size_t qi = batch.session_begin[s]; qi < batch.session_begin[s + 1]; ++qi) {
        std::int64_t prev_in_list = kNoPreviousClick;
        for (std::size_t j = 0; j < P; ++j) {
          const std::size_t slot = qi * P + j;
          if (!batch.mask[slot]) continue;
          q_ids.push_back(batch.query[qi]);
          u_ids.push_back(batch.url[slot]);
          pos_ids.push_back(batch.position[slot]);
          list_ctx.push_back(prev_in_list);
          session_ctx.push_back(prev_in_session);
          const std::int64_t own = batch.click[slot] > 0.5 ? kClicked : kNotClicked;
          prev_in_list = prev_in_session = own;
          out.slots.push_back(slot);
          out.labels.push_back(batch.click[slot]);
        }
      }
      if (out.slots.size() == bounds.back())
        throw ContractError("session " + std::to_string(batch.sessions[s]) + " has no documents");
      bounds.push_back(out.slots.size());
    }
    out.valid.assign(out.slots.size(), 1);
    out.attraction = attraction_forward(g, q_ids, u_ids, list_ctx, pos_ids, training, rng);
    out.examination = examination_forward(g, pos_ids, session_ctx, bounds, training, rng);
    out.click = combine(g, out.attraction, out.examination, config_.combination, combine_params(),
                        config_.prob_clamp);
    return out;
  }

  // Attraction for documents given their field ids: [N x 1].
  Tensor attraction_forward(Graph& g, std::span<const std::int64_t> q_ids, std::span<const std::int64_t> u_ids,
                            std::span<const std::int64_t> click_ctx, std::span<const std::int64_t> pos_ids,
                            bool training, Rng& rng) const {
    const std::size_t n = q_ids.size(), l = config_.embedding_size;
    if (u_ids.size() != n || click_ctx.size() != n || pos_ids.size() != n)
      throw ContractError("attraction_forward: field id lists differ in length");
    Tensor tokens = interleave_rows(
        g, {embedding_lookup(g, p("emb.query"), q_ids, kPaddingIndex), embedding_lookup(g, p("emb.url"), u_ids, kPaddingIndex),
            embedding_lookup(g, p("emb.click"), click_ctx), embedding_lookup(g, p("emb.position"), pos_ids, kPaddingIndex)});
    for (std::size_t b = 0; b < config_.filter_blocks_attr; ++b)
      tokens = filter_block_forward(g, tokens, filter_params("attr.filter" + std::to_string(b)), n, config_.dropout,
                                    training, rng);
    for (std::size_t b = 0; b < config_.transformer_blocks; ++b)
      tokens = transformer_block_forward(g, tokens, transformer_params("attr.block" + std::to_string(b)),
                                         config_.heads, 4, config_.dropout, training, rng);
    const Tensor joined = reshape(g, tokens, {n, 4 * l});
    return sigmoid(g, add_bias(g, matmul(g, joined, p("attr.head_w")), p("attr.head_b")));
  }

  // Examination for steps of consecutive sessions (`bounds` as in
  // causal_filter_block_forward): [N x 1].
  Tensor examination_forward(Graph& g, std::span<const std::int64_t> pos_ids, std::span<const std::int64_t> click_ctx,
                             const std::vector<std::size_t>& bounds, bool training, Rng& rng) const {
    const std::size_t n = pos_ids.size();
    if (click_ctx.size() != n || bounds.empty() || bounds.back() != n)
      throw ContractError("examination_forward: inconsistent step layout");
    const std::size_t sessions = bounds.size() - 1;
    std::size_t longest = 0;
    for (std::size_t s = 0; s < sessions; ++s) {
      if (bounds[s + 1] <= bounds[s]) throw ContractError("examination_forward: empty session");
      longest = std::max(longest, bounds[s + 1] - bounds[s]);
    }
    Tensor x = concat_cols(g, {embedding_lookup(g, p("emb.position"), pos_ids, kPaddingIndex),
                               embedding_lookup(g, p("emb.click"), click_ctx)});
    for (std::size_t b = 0; b < config_.filter_blocks_exam; ++b)
      x = causal_filter_block_forward(g, x, bounds, config_.exam_window(),
                                      filter_params("exam.filter" + std::to_string(b)), config_.dropout, training, rng);
    // Time-major layout for the GRU; short sessions are padded at the end.
    std::vector<std::int64_t> to_time(longest * sessions, -1), back(n);
    for (std::size_t s = 0; s < sessions; ++s)
      for (std::size_t t = bounds[s]; t < bounds[s + 1]; ++t) {
        const std::size_t row = (t - bounds[s]) * sessions + s;
        to_time[row] = static_cast<std::int64_t>(t);
        back[t] = static_cast<std::int64_t>(row);
      }
    const GruWeights w{p("exam.gru.w_input"), p("exam.gru.w_hidden_gates"), p("exam.gru.w_hidden_cand"),
                       p("exam.gru.bias")};
    const Tensor states = gru_sequence(g, gather_rows(g, x, std::move(to_time)), w, p("exam.gru.h0"), sessions);
    const Tensor h = gather_rows(g, states, std::move(back));
    return sigmoid(g, add_bias(g, matmul(g, h, p("exam.head_w")), p("exam.head_b")));
  }

  CombineParams combine_params() const {
    CombineParams c;
    switch (config_.combination) {
      case CombinationKind::mul:
      case CombinationKind::sigmoid_log: break;
      case CombinationKind::exp_mul:
        c.lambda = p("combine.lambda");
        c.mu = p("combine.mu");
        break;
      case CombinationKind::linear:
        c.alpha = p("combine.alpha");
        c.beta = p("combine.beta");
        break;
      case CombinationKind::nonlinear:
        c.w1 = p("combine.w1");
        c.b1 = p("combine.b1");
        c.w2 = p("combine.w2");
        c.b2 = p("combine.b2");
        break;
    }
    return c;
  }

  FilterBlockParams filter_params(const std::string& prefix) const {
    FilterBlockParams f;
    if (params_.contains(prefix + ".w_re")) {
      f.w_re = p(prefix + ".w_re");
      f.w_im = p(prefix + ".w_im");
    }
    f.ln_gamma = p(prefix + ".ln_gamma");
    f.ln_beta = p(prefix + ".ln_beta");
    return f;
  }

  TransformerBlockParams transformer_params(const std::string& prefix) const {
    return {{p(prefix + ".wq"), p(prefix + ".wk"), p(prefix + ".wv"), p(prefix + ".wo")},
            p(prefix + ".ln1_gamma"),
            p(prefix + ".ln1_beta"),
            {p(prefix + ".ffn_w1"), p(prefix + ".ffn_b1"), p(prefix + ".ffn_w2"), p(prefix + ".ffn_b2")},
            p(prefix + ".ln2_gamma"),
            p(prefix + ".ln2_beta")};
  }

 private:
  const Tensor& p(const std::string& name) const { return params_.get(name); }

  // Every parameter draws from its own stream keyed by name, so switching a
  // component on or off leaves all other initial values unchanged.
  void init(std::uint64_t seed) {
    const std::size_t l = config_.embedding_size, H = config_.hidden_size, P = config_.max_positions;
    auto stream = [&](const std::string& name) { return make_rng(seed, "init/" + name); };
    auto uniform_t = [&](const std::string& name, Shape shape, double lim) {
      Rng rng = stream(name);
      Tensor t = Tensor::zeros(std::move(shape));
      for (double& v : t.values()) v = uniform(rng, -lim, lim);
      params_.add(name, t);
    };
    auto embedding = [&](const std::string& name, std::size_t rows, bool padded) {
      uniform_t(name, {rows, l}, 0.1);
      if (padded) {
        Tensor t = params_.get(name);
        std::fill_n(t.data(), l, 0.0);
      }
    };
    // Xavier-uniform over blocks of `cols` columns each (packed gate matrices).
    auto xavier = [&](const std::string& name, std::size_t rows, std::size_t cols, std::size_t blocks = 1) {
      uniform_t(name, {rows, cols * blocks}, std::sqrt(6.0 / static_cast<double>(rows + cols)));
    };
    auto constant = [&](const std::string& name, Shape shape, double value) {
      params_.add(name, Tensor::filled(std::move(shape), value));
    };
    auto filter = [&](const std::string& prefix, std::size_t n, std::size_t d, bool enabled) {
      if (enabled) {
        const std::size_t bins = rfft_bins(n);
        Rng rng = stream(prefix + ".w");
        Tensor re = Tensor::zeros({bins, d}), im = Tensor::zeros({bins, d});
        for (double& v : re.values()) v = 1.0 + normal(rng, 0.0, 0.02);
        for (double& v : im.values()) v = normal(rng, 0.0, 0.02);
        params_.add(prefix + ".w_re", re);
        params_.add(prefix + ".w_im", im);
      }
      constant(prefix + ".ln_gamma", {d}, 1.0);
      constant(prefix + ".ln_beta", {d}, 0.0);
    };

    embedding("emb.query", query_vocab_, true);
    embedding("emb.url", url_vocab_, true);
    embedding("emb.click", 3, false);
    embedding("emb.position", P + 1, true);

    for (std::size_t b = 0; b < config_.filter_blocks_attr; ++b)
      filter("attr.filter" + std::to_string(b), 4, l, config_.enable_filter_attr);
    for (std::size_t b = 0; b < config_.transformer_blocks; ++b) {
      const std::string pre = "attr.block" + std::to_string(b);
      xavier(pre + ".wq", l, H);
      xavier(pre + ".wk", l, H);
      xavier(pre + ".wv", l, H);
      xavier(pre + ".wo", H, l);
      constant(pre + ".ln1_gamma", {l}, 1.0);
      constant(pre + ".ln1_beta", {l}, 0.0);
      xavier(pre + ".ffn_w1", l, config_.ffn_size());
      constant(pre + ".ffn_b1", {config_.ffn_size()}, 0.0);
      xavier(pre + ".ffn_w2", config_.ffn_size(), l);
      constant(pre + ".ffn_b2", {l}, 0.0);
      constant(pre + ".ln2_gamma", {l}, 1.0);
      constant(pre + ".ln2_beta", {l}, 0.0);
    }
    xavier("attr.head_w", 4 * l, 1);
    constant("attr.head_b", {1}, 0.0);

    for (std::size_t b = 0; b < config_.filter_blocks_exam; ++b)
      filter("exam.filter" + std::to_string(b), config_.exam_window(), 2 * l, config_.enable_filter_exam);
    xavier("exam.gru.w_input", 2 * l, H, 3);
    xavier("exam.gru.w_hidden_gates", H, H, 2);
    xavier("exam.gru.w_hidden_cand", H, H);
    constant("exam.gru.bias", {3 * H}, 0.0);
    constant("exam.gru.h0", {H}, 0.0);
    xavier("exam.head_w", H, 1);
    constant("exam.head_b", {1}, 0.0);

    switch (config_.combination) {
      case CombinationKind::mul:
      case CombinationKind::sigmoid_log: break;
      case CombinationKind::exp_mul:
        constant("combine.lambda", {1}, 1.0);
        constant("combine.mu", {1}, 1.0);
        break;
      case CombinationKind::linear:
        constant("combine.alpha", {1}, 0.5);
        constant("combine.beta", {1}, 0.5);
        break;
      case CombinationKind::nonlinear:
        xavier("combine.w1", 2, 16);
        constant("combine.b1", {16}, 0.0);
        xavier("combine.w2", 16, 1);
        constant("combine.b2", {1}, 0.0);
        break;
    }
  }

  ModelConfig config_;
  std::size_t query_vocab_, url_vocab_;
  Parameters params_;
};

inline void check_vocab(const ClickModel& model, const Vocabulary& vocab) {
  if (vocab.queries.size() != model.query_vocab() || vocab.urls.size() != model.url_vocab())
    throw ConfigError("vocabulary has " + std::to_string(vocab.queries.size()) + " queries / " +
                      std::to_string(vocab.urls.size()) + " urls, model expects " +
                      std::to_string(model.query_vocab()) + " / " + std::to_string(model.url_vocab()));
}

// Evaluation-mode scores for one session.
inline ForwardOutput predict_session(const ClickModel& model, const Session& session, const Vocabulary& vocab) {
  check_vocab(model, vocab);
  const std::vector<Session> one{session};
  const Batch batch = make_batch(one, {0}, vocab, model.config().max_positions);
  Graph g = Graph::no_grad();
  Rng unused(0);
  const BatchScores s = model.forward(g, batch, false, unused);
  ForwardOutput out;
  out.mask = batch.mask;
  out.attraction.assign(batch.mask.size(), 0.0);
  out.examination.assign(batch.mask.size(), 0.0);
  out.click.assign(batch.mask.size(), 0.0);
  for (std::size_t i = 0; i < s.slots.size(); ++i) {
    out.attraction[s.slots[i]] = s.attraction[i];
    out.examination[s.slots[i]] = s.examination[i];
    out.click[s.slots[i]] = s.click[i];
  }
  return out;
}

// Evaluation-mode click probabilities for every document, in session order.
struct Predictions {
  std::vector<double> click;
  std::vector<double> label;
  std::vector<int> position;
};

inline Predictions predict(const ClickModel& model, const std::vector<Session>& sessions, const Vocabulary& vocab,
                           std::size_t batch_size = 256) {
  check_vocab(model, vocab);
  Predictions out;
  BatchStream stream(sessions, vocab, batch_size, model.config().max_positions, 0, false);
  Rng unused(0);
  while (auto batch = stream.next()) {
    Graph g = Graph::no_grad();
    const BatchScores s = model.forward(g, *batch, false, unused);
    for (std::size_t i = 0; i < s.slots.size(); ++i) {
      out.click.push_back(s.click[i]);
      out.label.push_back(s.labels[i]);
      out.position.push_back(static_cast<int>(batch->position[s.slots[i]]));
    }
  }
  return out;
}

}  // namespace fetcm

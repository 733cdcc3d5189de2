#pragma once

// Finite-difference gradient suite: every differentiable op on small random
// inputs plus the full model loss on a toy session.

#include <string>
#include <vector>

#include "fetcm/gradcheck.hpp"
#include "fetcm/model.hpp"
#include "fetcm/train.hpp"

namespace fetcm {

struct GradcheckRow {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

inline constexpr double kGradcheckThreshold = 1e-4;
inline constexpr double kGradcheckStep = 1e-6;

namespace detail {

inline Tensor random_input(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  for (double& v : t.values()) v = uniform(rng, lo, hi);
  return t;
}

// sum(w * y) for fixed random weights w, so every output element gets a
// distinct upstream gradient.
inline Tensor probe(Graph& g, const Tensor& y, std::uint64_t seed) {
  Rng rng = make_rng(seed, "probe");
  Tensor w = Tensor::zeros(y.shape());
  for (double& v : w.values()) v = uniform(rng, -1.0, 1.0);
  return sum(g, mul(g, y, w));
}

}  // namespace detail

// Two queries of three documents in one session.
inline std::vector<Session> gradcheck_sessions() {
  return {{1, {{10, {{100, 1, 1}, {101, 2, 0}, {102, 3, 1}}}, {11, {{103, 1, 0}, {100, 2, 1}, {104, 3, 0}}}}}};
}

inline ModelConfig gradcheck_model_config(CombinationKind kind = CombinationKind::exp_mul) {
  ModelConfig c;
  c.embedding_size = 8;
  c.hidden_size = 8;
  c.heads = 2;
  c.dropout = 0.1;
  c.combination = kind;
  return c;
}

// Toy model at a random point: parameters are spread well beyond their
// initial scale so that no gradient sits at the round-off floor.
inline ClickModel gradcheck_model(const Vocabulary& vocab, std::uint64_t seed,
                                  CombinationKind kind = CombinationKind::exp_mul) {
  ClickModel m(gradcheck_model_config(kind), vocab.queries.size(), vocab.urls.size(), seed);
  Rng rng = make_rng(seed, "gradcheck/spread");
  for (const auto& [name, t] : m.parameters().items()) {
    Tensor u = t;
    for (double& v : u.values()) v += uniform(rng, -0.5, 0.5);
  }
  for (const char* frozen : {"emb.query", "emb.url", "emb.position"}) {
    Tensor u = m.parameters().get(frozen);
    std::fill_n(u.data(), u.cols(), 0.0);
  }
  return m;
}

inline std::vector<GradCheckResult> model_gradcheck(std::uint64_t seed,
                                                    CombinationKind kind = CombinationKind::exp_mul) {
  const auto sessions = gradcheck_sessions();
  const Vocabulary vocab = build_vocab(sessions);
  const ClickModel m = gradcheck_model(vocab, seed, kind);
  const Batch batch = make_batch(sessions, {0}, vocab, m.config().max_positions);
  return grad_check_tensors(
      [&](Graph& g) {
        Rng drop = make_rng(seed, "gradcheck/dropout");
        const auto s = m.forward(g, batch, true, drop);
        return click_loss(g, s.click, s.labels, s.valid);
      },
      m.parameters().items(), kGradcheckStep);
}

// 32 sessions of one query and ten documents with random clicks. Every
// document has its own url, so the labels can be memorized.
inline std::vector<Session> memorization_sessions(std::uint64_t seed, std::size_t n_sessions = 32) {
  Rng rng = make_rng(seed, "memorization");
  std::vector<Session> out;
  std::int64_t next_url = 0;
  for (std::size_t s = 0; s < n_sessions; ++s) {
    QueryRecord q{static_cast<std::int64_t>(s % 8), {}};
    for (int pos = 1; pos <= 10; ++pos) q.docs.push_back({next_url++, pos, uniform01(rng) < 0.5 ? 1 : 0});
    out.push_back({static_cast<std::int64_t>(s), {q}});
  }
  return out;
}

// Defaults with dropout off and small batches, so 200 epochs are enough to
// drive the training loss to near zero.
inline ModelConfig memorization_model_config() {
  ModelConfig c;
  c.dropout = 0.0;
  return c;
}

inline TrainConfig memorization_train_config(std::uint64_t seed) {
  TrainConfig t;
  t.batch_size = 4;
  t.max_epochs = 200;
  t.patience = 200;
  t.seed = seed;
  return t;
}

inline std::vector<GradcheckRow> run_gradcheck_suite(std::uint64_t seed, double threshold = kGradcheckThreshold) {
  using detail::probe;
  using detail::random_input;
  std::vector<GradcheckRow> rows;
  auto check = [&](const std::string& name, const std::function<Tensor(Graph&)>& f, std::vector<NamedTensor> wrt) {
    const double err = max_rel_err(grad_check_tensors(f, std::move(wrt), kGradcheckStep));
    rows.push_back({name, err, err < threshold});
  };
  Rng rng = make_rng(seed, "gradcheck/ops");

  {
    const Tensor a = random_input({3, 4}, rng), b = random_input({4, 2}, rng);
    check("matmul", [&](Graph& g) { return probe(g, matmul(g, a, b), 1); }, {{"a", a}, {"b", b}});
  }
  {
    const Tensor a = random_input({3, 4}, rng), b = random_input({3, 4}, rng);
    check("add", [&](Graph& g) { return probe(g, add(g, a, b), 2); }, {{"a", a}, {"b", b}});
    check("mul", [&](Graph& g) { return probe(g, mul(g, a, b), 3); }, {{"a", a}, {"b", b}});
    check("scale", [&](Graph& g) { return probe(g, scale(g, a, -1.7), 4); }, {{"a", a}});
  }
  {
    const Tensor x = random_input({3, 4}, rng), bias = random_input({4}, rng);
    check("add_bias", [&](Graph& g) { return probe(g, add_bias(g, x, bias), 5); }, {{"x", x}, {"bias", bias}});
    check("sigmoid", [&](Graph& g) { return probe(g, sigmoid(g, x), 6); }, {{"x", x}});
    check("tanh", [&](Graph& g) { return probe(g, tanh(g, x), 7); }, {{"x", x}});
    check("relu", [&](Graph& g) { return probe(g, relu(g, x), 8); }, {{"x", x}});
    check("softmax_rows", [&](Graph& g) { return probe(g, softmax_rows(g, x), 9); }, {{"x", x}});
    check("clamp", [&](Graph& g) { return probe(g, clamp(g, x, -0.5, 0.5), 10); }, {{"x", x}});
    check("dropout", [&](Graph& g) {
      Rng d = make_rng(seed, "gradcheck/op-dropout");
      return probe(g, dropout(g, x, 0.4, true, d), 11);
    }, {{"x", x}});
    check("reshape", [&](Graph& g) { return probe(g, reshape(g, x, {2, 6}), 12); }, {{"x", x}});
    check("gather_rows", [&](Graph& g) { return probe(g, gather_rows(g, x, {2, -1, 0, 2}), 13); }, {{"x", x}});
  }
  {
    const Tensor x = random_input({3, 6}, rng), gamma = random_input({6}, rng, 0.5, 1.5),
                 beta = random_input({6}, rng);
    check("layer_norm", [&](Graph& g) { return probe(g, layer_norm(g, x, gamma, beta), 14); },
          {{"x", x}, {"gamma", gamma}, {"beta", beta}});
  }
  {
    const Tensor table = random_input({5, 3}, rng);
    const std::vector<std::int64_t> ids{1, 4, 1, 3};
    check("embedding_lookup", [&](Graph& g) { return probe(g, embedding_lookup(g, table, ids, 0), 15); },
          {{"table", table}});
  }
  {
    const Tensor a = random_input({3, 2}, rng), b = random_input({3, 4}, rng), c = random_input({3, 2}, rng);
    check("concat_cols", [&](Graph& g) { return probe(g, concat_cols(g, {a, b}), 16); }, {{"a", a}, {"b", b}});
    check("interleave_rows", [&](Graph& g) { return probe(g, interleave_rows(g, {a, c}), 17); },
          {{"a", a}, {"c", c}});
  }
  {
    const Tensor p = random_input({4, 1}, rng, 0.1, 0.9);
    const std::vector<double> y{1, 0, 0, 1};
    const std::vector<std::uint8_t> mask{1, 1, 0, 1};
    check("binary_cross_entropy", [&](Graph& g) { return binary_cross_entropy(g, p, y, mask); }, {{"p", p}});
  }
  for (std::size_t n : {4, 7, 10}) {
    const Tensor x = random_input({2 * n, 3}, rng);
    check("rfft_irfft_n" + std::to_string(n), [&](Graph& g) {
      const auto spec = rfft(g, x, 2);
      return probe(g, irfft(g, spec, n), 18);
    }, {{"x", x}});
  }
  {
    const Tensor x = random_input({8, 8}, rng);
    const FilterBlockParams p{random_input({3, 8}, rng, 0.5, 1.5), random_input({3, 8}, rng, -0.5, 0.5),
                              random_input({8}, rng, 0.5, 1.5), random_input({8}, rng)};
    check("filter_block", [&](Graph& g) {
      Rng d = make_rng(seed, "gradcheck/filter-dropout");
      return probe(g, filter_block_forward(g, x, p, 2, 0.2, true, d), 19);
    }, {{"x", x}, {"w_re", p.w_re}, {"w_im", p.w_im}, {"ln_gamma", p.ln_gamma}, {"ln_beta", p.ln_beta}});
  }
  {
    const Tensor x = random_input({9, 3}, rng), taps = random_input({4, 3}, rng);
    check("causal_convolution", [&](Graph& g) { return probe(g, causal_convolution(g, x, taps, {0, 2, 9}), 25); },
          {{"x", x}, {"taps", taps}});
  }
  {
    const Tensor x = random_input({9, 4}, rng);
    const FilterBlockParams p{random_input({3, 4}, rng), random_input({3, 4}, rng), random_input({4}, rng, 0.5, 1.5),
                              random_input({4}, rng)};
    check("causal_filter_block", [&](Graph& g) {
      Rng d = make_rng(seed, "gradcheck/causal-dropout");
      return probe(g, causal_filter_block_forward(g, x, {0, 6, 9}, 4, p, 0.2, true, d), 20);
    }, {{"x", x}, {"w_re", p.w_re}, {"w_im", p.w_im}});
  }
  {
    const Tensor t = random_input({8, 8}, rng);
    const AttentionParams p{random_input({8, 8}, rng), random_input({8, 8}, rng), random_input({8, 8}, rng),
                            random_input({8, 8}, rng)};
    check("multi_head_attention", [&](Graph& g) { return probe(g, multi_head_attention(g, t, p, 2, 4), 21); },
          {{"tokens", t}, {"wq", p.wq}, {"wk", p.wk}, {"wv", p.wv}, {"wo", p.wo}});
  }
  {
    const Tensor s = random_input({5, 4}, rng);
    const FfnParams p{random_input({4, 16}, rng), random_input({16}, rng), random_input({16, 4}, rng),
                      random_input({4}, rng)};
    check("position_wise_ffn", [&](Graph& g) { return probe(g, position_wise_ffn(g, s, p), 22); },
          {{"s", s}, {"w1", p.w1}, {"b1", p.b1}, {"w2", p.w2}, {"b2", p.b2}});
  }
  {
    const std::size_t in = 3, H = 4;
    const Tensor x = random_input({3 * 2, in}, rng), h0 = random_input({H}, rng);
    const GruWeights w{random_input({in, 3 * H}, rng), random_input({H, 2 * H}, rng), random_input({H, H}, rng),
                       random_input({3 * H}, rng)};
    check("gru_sequence", [&](Graph& g) { return probe(g, gru_sequence(g, x, w, h0, 2), 23); },
          {{"x", x}, {"input", w.input}, {"hidden_gates", w.hidden_gates}, {"hidden_cand", w.hidden_cand},
           {"bias", w.bias}, {"h0", h0}});
  }
  for (auto kind : {CombinationKind::mul, CombinationKind::exp_mul, CombinationKind::sigmoid_log,
                    CombinationKind::linear, CombinationKind::nonlinear}) {
    const Tensor a = random_input({5, 1}, rng, 0.1, 0.9), e = random_input({5, 1}, rng, 0.1, 0.9);
    CombineParams p{random_input({1}, rng, 0.5, 1.5), random_input({1}, rng, 0.5, 1.5),
                    random_input({1}, rng, 0.2, 0.5), random_input({1}, rng, 0.2, 0.5),
                    random_input({2, 16}, rng), random_input({16}, rng), random_input({16, 1}, rng),
                    random_input({1}, rng)};
    std::vector<NamedTensor> wrt{{"a", a}, {"e", e}};
    if (kind == CombinationKind::exp_mul) wrt.insert(wrt.end(), {{"lambda", p.lambda}, {"mu", p.mu}});
    if (kind == CombinationKind::linear) wrt.insert(wrt.end(), {{"alpha", p.alpha}, {"beta", p.beta}});
    if (kind == CombinationKind::nonlinear)
      wrt.insert(wrt.end(), {{"w1", p.w1}, {"b1", p.b1}, {"w2", p.w2}, {"b2", p.b2}});
    check(std::string("combine_") + to_string(kind),
          [&](Graph& g) { return probe(g, combine(g, a, e, kind, p, 1e-6), 24); }, wrt);
  }
  for (const auto& r : model_gradcheck(seed)) rows.push_back({"model/" + r.name, r.max_rel_err, r.max_rel_err < threshold});
  return rows;
}

}  // namespace fetcm

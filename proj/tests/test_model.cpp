#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fetcm/diagnostics.hpp"
#include "fetcm/gradcheck.hpp"
#include "fetcm/model.hpp"
#include "test_support.hpp"

namespace fetcm {
namespace {

using testing::random_tensor;
using testing::weighted_sum;

ModelConfig toy_config(std::size_t dims = 8) {
  ModelConfig c;
  c.embedding_size = dims;
  c.hidden_size = dims;
  c.heads = 2;
  c.dropout = 0.0;
  return c;
}

// One session: two queries of three documents.
std::vector<Session> toy_sessions() {
  return {{1, {{10, {{100, 1, 1}, {101, 2, 0}, {102, 3, 1}}}, {11, {{103, 1, 0}, {100, 2, 1}, {104, 3, 0}}}}}};
}

struct Toy {
  std::vector<Session> sessions = toy_sessions();
  Vocabulary vocab = build_vocab(sessions);
  Batch batch() const { return make_batch(sessions, {0}, vocab, 10); }
};

ClickModel make_model(const ModelConfig& c, const Toy& toy, std::uint64_t seed = 3) {
  return ClickModel(c, toy.vocab.queries.size(), toy.vocab.urls.size(), seed);
}

void fill(const Tensor& t, double v) {
  Tensor u = t;
  for (double& x : u.values()) x = v;
}

BatchScores eval_scores(const ClickModel& m, const Batch& b) {
  Graph g = Graph::no_grad();
  Rng rng(0);
  return m.forward(g, b, false, rng);
}

TEST(ModelConfig, DefaultsFollowTheReferenceSetup) {
  const ModelConfig c;
  EXPECT_EQ(c.embedding_size, 64u);
  EXPECT_EQ(c.hidden_size, 64u);
  EXPECT_EQ(c.heads, 8u);
  EXPECT_EQ(c.transformer_blocks, 1u);
  EXPECT_DOUBLE_EQ(c.dropout, 0.5);
  EXPECT_EQ(c.combination, CombinationKind::exp_mul);
  EXPECT_EQ(c.max_positions, 10u);
  EXPECT_DOUBLE_EQ(c.prob_clamp, 1e-6);
  EXPECT_EQ(c.ffn_size(), 256u);
  EXPECT_TRUE(c.enable_filter_attr && c.enable_filter_exam);
}

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.heads = 7;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.dropout = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.prob_clamp = 0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_combination("sum"), ConfigError);
  EXPECT_EQ(parse_combination("sigmoid_log"), CombinationKind::sigmoid_log);
  EXPECT_THROW(parse_recurrent_cell("lstm"), ConfigError);
}

TEST(Parameters, InventoryHasOnlyActiveParts) {
  Toy toy;
  ModelConfig c;
  const ClickModel full = make_model(c, toy);
  std::set<std::string> names;
  for (const auto& [name, t] : full.parameters().items()) EXPECT_TRUE(names.insert(name).second) << name;
  for (const char* n : {"emb.query", "emb.url", "emb.click", "emb.position", "attr.filter0.w_re",
                        "attr.filter0.w_im", "attr.block0.wq", "attr.block0.ffn_w1", "attr.head_w",
                        "exam.filter0.w_re", "exam.gru.w_input", "exam.gru.h0", "exam.head_w", "combine.lambda",
                        "combine.mu"})
    EXPECT_TRUE(names.count(n)) << n;
  EXPECT_FALSE(names.count("combine.alpha"));
  EXPECT_EQ(full.parameters().get("emb.click").shape(), (Shape{3, 64}));
  EXPECT_EQ(full.parameters().get("emb.position").shape(), (Shape{11, 64}));
  EXPECT_EQ(full.parameters().get("attr.head_w").shape(), (Shape{256, 1}));
  EXPECT_EQ(full.parameters().get("attr.filter0.w_re").shape(), (Shape{3, 64}));
  EXPECT_EQ(full.parameters().get("exam.filter0.w_re").shape(), (Shape{6, 128}));
  EXPECT_EQ(full.parameters().get("exam.gru.w_input").shape(), (Shape{128, 192}));

  c.enable_filter_attr = c.enable_filter_exam = false;
  c.combination = CombinationKind::mul;
  const ClickModel plain = make_model(c, toy);
  EXPECT_FALSE(plain.parameters().contains("attr.filter0.w_re"));
  EXPECT_TRUE(plain.parameters().contains("attr.filter0.ln_gamma"));
  EXPECT_FALSE(plain.parameters().contains("combine.lambda"));
  // Shared parameters keep their initial values when components are toggled.
  for (const auto& [name, t] : plain.parameters().items()) {
    const Tensor& other = full.parameters().get(name);
    EXPECT_TRUE(std::equal(t.values().begin(), t.values().end(), other.values().begin())) << name;
  }
}

TEST(Parameters, InitialValues) {
  Toy toy;
  const ClickModel m = make_model(ModelConfig{}, toy);
  const auto& ps = m.parameters();
  for (const char* n : {"emb.query", "emb.url", "emb.position"})
    for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(ps.get(n)[c], 0.0) << n;
  for (double v : ps.get("emb.url").values()) EXPECT_LE(std::abs(v), 0.1);
  for (double v : ps.get("attr.filter0.w_re").values()) EXPECT_NEAR(v, 1.0, 0.15);
  for (double v : ps.get("attr.filter0.w_im").values()) EXPECT_NEAR(v, 0.0, 0.15);
  for (double v : ps.get("exam.gru.h0").values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(ps.get("combine.lambda").item(), 1.0);
  const double lim = std::sqrt(6.0 / 128.0);
  for (double v : ps.get("attr.block0.wq").values()) EXPECT_LE(std::abs(v), lim);
}

TEST(Embeddings, PaddingRowIsZeroAndFrozen) {
  Toy toy;
  const ClickModel m = make_model(ModelConfig{}, toy);
  Graph g;
  const std::vector<std::int64_t> ids{0, 2, 2};
  const Tensor& table = m.parameters().get("emb.url");
  const Tensor out = embedding_lookup(g, table, ids, kPaddingIndex);
  EXPECT_EQ(out.shape(), (Shape{3, 64}));
  for (std::size_t c = 0; c < 64; ++c) {
    EXPECT_EQ(out.at(0, c), 0.0);
    EXPECT_EQ(out.at(1, c), out.at(2, c));
  }
  g.backward(sum(g, out));
  for (std::size_t c = 0; c < 64; ++c) EXPECT_EQ(table.grad_view()[c], 0.0);
  table.drop_grad();
}

FilterBlockParams filter_with(std::size_t n, std::size_t d, double re, double im) {
  const std::size_t bins = rfft_bins(n);
  return {Tensor::filled({bins, d}, re), Tensor::filled({bins, d}, im), Tensor::filled({d}, 1.0),
          Tensor::zeros({d})};
}

TEST(FilterBlock, IdentityFilterMatchesLayerNorm) {
  Rng rng(4);
  const Tensor f = random_tensor({12, 8}, rng);
  Graph g;
  const auto p = filter_with(4, 8, 1.0, 0.0);
  const Tensor out = filter_block_forward(g, f, p, 3, 0.0, true, rng);
  const Tensor ln = layer_norm(g, f, p.ln_gamma, p.ln_beta);
  const Tensor ln2 = layer_norm(g, scale(g, f, 2.0), p.ln_gamma, p.ln_beta);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    EXPECT_NEAR(out[i], ln2[i], 1e-12);
    EXPECT_NEAR(out[i], ln[i], 1e-8);
  }
}

TEST(FilterBlock, ZeroFilterKeepsSkipOnly) {
  Rng rng(5);
  const Tensor f = random_tensor({8, 8}, rng);
  Graph g;
  const auto p = filter_with(4, 8, 0.0, 0.0);
  const Tensor out = filter_block_forward(g, f, p, 2, 0.0, false, rng);
  const Tensor ln = layer_norm(g, f, p.ln_gamma, p.ln_beta);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], ln[i], 1e-14);
}

TEST(FilterBlock, ShapeMismatchRejected) {
  Rng rng(5);
  Graph g;
  EXPECT_THROW(filter_block_forward(g, random_tensor({8, 8}, rng), filter_with(8, 8, 1, 0), 2, 0.0, false, rng),
               DimensionError);
}

TEST(FilterBlock, GradientMatchesFiniteDifferences) {
  Rng rng(6);
  const Tensor f = random_tensor({4, 8}, rng, -1, 1, true);
  FilterBlockParams p = filter_with(4, 8, 1.0, 0.0);
  p.w_re = random_tensor({3, 8}, rng, 0.5, 1.5);
  p.w_im = random_tensor({3, 8}, rng, -0.5, 0.5);
  p.ln_gamma = random_tensor({8}, rng, 0.5, 1.5);
  const Tensor w = random_tensor({4, 8}, rng);
  const auto results = grad_check_tensors(
      [&](Graph& g) {
        Rng drop(11);
        return weighted_sum(g, filter_block_forward(g, f, p, 1, 0.3, true, drop), w);
      },
      {{"w_re", p.w_re}, {"w_im", p.w_im}, {"x", f}, {"gamma", p.ln_gamma}, {"beta", p.ln_beta}});
  for (const auto& r : results) EXPECT_LT(r.max_rel_err, 1e-4) << r.name;
}

TEST(CausalFilter, IdentityFilterMatchesLayerNorm) {
  Rng rng(7);
  const Tensor x = random_tensor({13, 6}, rng);
  Graph g;
  const auto p = filter_with(5, 6, 1.0, 0.0);
  const Tensor out = causal_filter_block_forward(g, x, {0, 9, 13}, 5, p, 0.0, false, rng);
  const Tensor ln = layer_norm(g, x, p.ln_gamma, p.ln_beta);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], ln[i], 1e-8);
}

TEST(CausalFilter, MatchesTruncatedConvolution) {
  // The block is a causal convolution with the taps irfft(W).
  Rng rng(8);
  const std::size_t window = 4, d = 3, steps = 7;
  const Tensor x = random_tensor({steps, d}, rng);
  FilterBlockParams p = filter_with(window, d, 0, 0);
  p.w_re = random_tensor({3, d}, rng);
  p.w_im = random_tensor({3, d}, rng);
  Graph g;
  const Tensor out = causal_filter_block_forward(g, x, {0, steps}, window, p, 0.0, false, rng);
  // Taps from the Hermitian extension of the filter.
  std::vector<std::vector<double>> taps(window, std::vector<double>(d));
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t k = 0; k < window; ++k) {
      double acc = 0.0;
      for (std::size_t b = 0; b < window; ++b) {
        const std::size_t src = b <= window / 2 ? b : window - b;
        const double re = p.w_re.at(src, c), im = (b <= window / 2 ? 1.0 : -1.0) * p.w_im.at(src, c);
        const double a = 2.0 * M_PI * static_cast<double>(b * k) / window;
        acc += re * std::cos(a) - im * std::sin(a);
      }
      taps[k][c] = acc / window;
    }
  Tensor pre = Tensor::zeros({steps, d});
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t c = 0; c < d; ++c) {
      double y = x.at(t, c);
      for (std::size_t k = 0; k < window && k <= t; ++k) y += taps[k][c] * x.at(t - k, c);
      pre[t * d + c] = y;
    }
  const Tensor expect = layer_norm(g, pre, p.ln_gamma, p.ln_beta);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-10);
}

TEST(CausalFilter, FutureStepsDoNotLeak) {
  Rng rng(9);
  const Tensor x = random_tensor({12, 4}, rng);
  FilterBlockParams p = filter_with(10, 4, 0, 0);
  p.w_re = random_tensor({6, 4}, rng);
  p.w_im = random_tensor({6, 4}, rng);
  Graph g;
  const Tensor base = causal_filter_block_forward(g, x, {0, 12}, 10, p, 0.0, false, rng);
  for (std::size_t cut = 0; cut < 12; ++cut) {
    Tensor y = x.clone();
    for (std::size_t i = cut * 4; i < y.numel(); ++i) y[i] += 1.0;
    const Tensor moved = causal_filter_block_forward(g, y, {0, 12}, 10, p, 0.0, false, rng);
    for (std::size_t i = 0; i < cut * 4; ++i) EXPECT_EQ(moved[i], base[i]);
  }
}

TEST(CausalFilter, GradientMatchesFiniteDifferences) {
  Rng rng(10);
  const Tensor x = random_tensor({7, 4}, rng, -1, 1, true);
  FilterBlockParams p = filter_with(4, 4, 0, 0);
  p.w_re = random_tensor({3, 4}, rng);
  p.w_im = random_tensor({3, 4}, rng);
  const Tensor w = random_tensor({7, 4}, rng);
  const auto results = grad_check_tensors(
      [&](Graph& g) {
        Rng drop(1);
        return weighted_sum(g, causal_filter_block_forward(g, x, {0, 5, 7}, 4, p, 0.2, true, drop), w);
      },
      {{"w_re", p.w_re}, {"w_im", p.w_im}, {"x", x}});
  for (const auto& r : results) EXPECT_LT(r.max_rel_err, 1e-4) << r.name;
}

AttentionParams random_attention(std::size_t d, std::size_t hidden, Rng& rng) {
  return {random_tensor({d, hidden}, rng), random_tensor({d, hidden}, rng), random_tensor({d, hidden}, rng),
          random_tensor({hidden, d}, rng)};
}

TEST(Attention, SingleTokenPassesValuePath) {
  Rng rng(11);
  const auto p = random_attention(8, 8, rng);
  const Tensor t = random_tensor({3, 8}, rng);
  Graph g;
  const Tensor out = multi_head_attention(g, t, p, 2, 1);
  const Tensor expect = matmul(g, matmul(g, t, p.wv), p.wo);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
}

TEST(Attention, IdenticalTokensAttendUniformly) {
  Rng rng(12);
  const auto p = random_attention(8, 8, rng);
  const Tensor row = random_tensor({1, 8}, rng);
  Tensor t = Tensor::zeros({4, 8});
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 8; ++c) t[r * 8 + c] = row[c];
  Graph g;
  const Tensor out = multi_head_attention(g, t, p, 4, 4);
  const Tensor v_path = matmul(g, matmul(g, row, p.wv), p.wo);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(out.at(r, c), v_path[c], 1e-12);
}

TEST(Attention, ShapesWithDefaultHeads) {
  Rng rng(13);
  const auto p = random_attention(64, 64, rng);
  Graph g;
  const Tensor out = multi_head_attention(g, random_tensor({8, 64}, rng), p, 8, 4);
  EXPECT_EQ(out.shape(), (Shape{8, 64}));
  EXPECT_THROW(multi_head_attention(g, random_tensor({8, 64}, rng), p, 7, 4), DimensionError);
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  Rng rng(14);
  const auto p = random_attention(8, 8, rng);
  const Tensor t = random_tensor({8, 8}, rng, -1, 1, true);
  const Tensor w = random_tensor({8, 8}, rng);
  const auto results =
      grad_check_tensors([&](Graph& g) { return weighted_sum(g, multi_head_attention(g, t, p, 2, 4), w); },
                         {{"wq", p.wq}, {"wk", p.wk}, {"wv", p.wv}, {"wo", p.wo}, {"tokens", t}});
  for (const auto& r : results) EXPECT_LT(r.max_rel_err, 1e-4) << r.name;
}

TEST(Ffn, ZeroAndIdentityWeights) {
  Rng rng(15);
  const Tensor s = random_tensor({5, 4}, rng);
  Graph g;
  const FfnParams zero{Tensor::zeros({4, 4}), Tensor::zeros({4}), Tensor::zeros({4, 4}), Tensor::zeros({4})};
  const Tensor silent = position_wise_ffn(g, s, zero);
  for (double v : silent.values()) EXPECT_EQ(v, 0.0);
  Tensor eye = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye[i * 5] = 1.0;
  const FfnParams id{eye, Tensor::zeros({4}), eye, Tensor::zeros({4})};
  const Tensor out = position_wise_ffn(g, s, id);
  for (std::size_t i = 0; i < s.numel(); ++i) EXPECT_EQ(out[i], std::max(0.0, s[i]));
  EXPECT_THROW(position_wise_ffn(g, random_tensor({5, 3}, rng), id), DimensionError);
}

TEST(Ffn, GradientMatchesFiniteDifferences) {
  Rng rng(16);
  const FfnParams p{random_tensor({4, 16}, rng), random_tensor({16}, rng), random_tensor({16, 4}, rng),
                    random_tensor({4}, rng)};
  const Tensor s = random_tensor({6, 4}, rng, -1, 1, true);
  const Tensor w = random_tensor({6, 4}, rng);
  const auto results = grad_check_tensors([&](Graph& g) { return weighted_sum(g, position_wise_ffn(g, s, p), w); },
                                          {{"w1", p.w1}, {"b1", p.b1}, {"w2", p.w2}, {"b2", p.b2}, {"s", s}});
  for (const auto& r : results) EXPECT_LT(r.max_rel_err, 1e-4) << r.name;
}

CombineParams default_combine_params(Rng& rng) {
  CombineParams p;
  p.lambda = Tensor::scalar(1.0);
  p.mu = Tensor::scalar(1.0);
  p.alpha = Tensor::scalar(0.5);
  p.beta = Tensor::scalar(0.5);
  p.w1 = random_tensor({2, 16}, rng);
  p.b1 = random_tensor({16}, rng);
  p.w2 = random_tensor({16, 1}, rng);
  p.b2 = Tensor::zeros({1});
  return p;
}

double combine_one(CombinationKind k, double a, double e, const CombineParams& p, double eps = 1e-6) {
  Graph g = Graph::no_grad();
  return combine(g, Tensor::matrix(1, 1, {a}), Tensor::matrix(1, 1, {e}), k, p, eps)[0];
}

TEST(Combine, ArithmeticAnchors) {
  Rng rng(17);
  const auto p = default_combine_params(rng);
  EXPECT_NEAR(combine_one(CombinationKind::mul, 0.8, 0.5, p), 0.4, 1e-15);
  EXPECT_NEAR(combine_one(CombinationKind::sigmoid_log, 0.5, 0.5, p), 0.4444444444444444, 1e-15);
  EXPECT_NEAR(combine_one(CombinationKind::sigmoid_log, 1.0 - 1e-12, 1.0 - 1e-12, p), 1.0 - 1e-6, 1e-12);
  EXPECT_NEAR(combine_one(CombinationKind::linear, 0.8, 0.4, p), 0.6, 1e-15);
}

TEST(Combine, ExpMulWithUnitExponentsEqualsMul) {
  Rng rng(18);
  const auto p = default_combine_params(rng);
  const Tensor a = random_tensor({1000, 1}, rng, 0.0, 1.0), e = random_tensor({1000, 1}, rng, 0.0, 1.0);
  Graph g;
  const Tensor m = combine(g, a, e, CombinationKind::mul, p, 1e-6);
  const Tensor x = combine(g, a, e, CombinationKind::exp_mul, p, 1e-6);
  for (std::size_t i = 0; i < m.numel(); ++i) EXPECT_EQ(m[i], x[i]);
}

TEST(Combine, SigmoidLogFormsAgree) {
  Rng rng(19);
  const auto p = default_combine_params(rng);
  for (int i = 0; i < 1000; ++i) {
    const double a = uniform(rng, 1e-3, 1.0), e = uniform(rng, 1e-3, 1.0);
    const auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
    Graph g = Graph::no_grad();
    const double closed =
        combine_raw(g, Tensor::matrix(1, 1, {a}), Tensor::matrix(1, 1, {e}), CombinationKind::sigmoid_log, p)[0];
    EXPECT_NEAR(closed, 4.0 * sig(std::log(a)) * sig(std::log(e)), 1e-12);
  }
}

TEST(Combine, OutputsStayInsideClamp) {
  Rng rng(20);
  const auto p = default_combine_params(rng);
  const double eps = 1e-6;
  for (auto k : {CombinationKind::mul, CombinationKind::exp_mul, CombinationKind::sigmoid_log,
                 CombinationKind::linear, CombinationKind::nonlinear})
    for (double a : {1e-300, 1e-9, 0.3, 1.0 - 1e-16})
      for (double e : {1e-300, 0.5, 1.0 - 1e-16}) {
        const double c = combine_one(k, a, e, p, eps);
        EXPECT_GE(c, eps) << to_string(k);
        EXPECT_LE(c, 1.0 - eps) << to_string(k);
      }
}

TEST(Combine, ExaminationHypothesisCombinersAreMonotone) {
  Rng rng(21);
  auto p = default_combine_params(rng);
  p.lambda = Tensor::scalar(0.7);
  p.mu = Tensor::scalar(1.3);
  for (auto k : {CombinationKind::mul, CombinationKind::exp_mul, CombinationKind::sigmoid_log}) {
    for (int i = 0; i < 200; ++i) {
      const double a = uniform(rng, 0.05, 0.9), e = uniform(rng, 0.05, 0.9);
      const double base = combine_one(k, a, e, p);
      EXPECT_GT(combine_one(k, a + 0.05, e, p), base) << to_string(k);
      EXPECT_GT(combine_one(k, a, e + 0.05, p), base) << to_string(k);
    }
    EXPECT_LT(combine_raw(*std::make_unique<Graph>(false), Tensor::matrix(1, 1, {1e-12}),
                          Tensor::matrix(1, 1, {0.7}), k, p)[0],
              1e-8)
        << to_string(k);
  }
}

TEST(Combine, GradientMatchesFiniteDifferences) {
  Rng rng(22);
  auto p = default_combine_params(rng);
  p.lambda = Tensor::scalar(0.8);
  p.mu = Tensor::scalar(1.2);
  p.alpha = Tensor::scalar(0.3);
  p.beta = Tensor::scalar(0.6);
  const Tensor a = random_tensor({5, 1}, rng, 0.1, 0.9, true), e = random_tensor({5, 1}, rng, 0.1, 0.9, true);
  const Tensor w = random_tensor({5, 1}, rng);
  for (auto k : {CombinationKind::mul, CombinationKind::exp_mul, CombinationKind::sigmoid_log,
                 CombinationKind::linear, CombinationKind::nonlinear}) {
    std::vector<NamedTensor> wrt{{"a", a}, {"e", e}};
    if (k == CombinationKind::exp_mul) wrt.insert(wrt.end(), {{"lambda", p.lambda}, {"mu", p.mu}});
    if (k == CombinationKind::linear) wrt.insert(wrt.end(), {{"alpha", p.alpha}, {"beta", p.beta}});
    if (k == CombinationKind::nonlinear)
      wrt.insert(wrt.end(), {{"w1", p.w1}, {"b1", p.b1}, {"w2", p.w2}, {"b2", p.b2}});
    const auto results =
        grad_check_tensors([&](Graph& g) { return weighted_sum(g, combine(g, a, e, k, p, 1e-6), w); }, wrt);
    for (const auto& r : results) EXPECT_LT(r.max_rel_err, 1e-4) << to_string(k) << " " << r.name;
  }
}

TEST(ClickLoss, Anchors) {
  Graph g;
  const std::vector<double> y{1, 0, 1};
  const std::vector<std::uint8_t> all{1, 1, 1};
  EXPECT_NEAR(click_loss(g, Tensor::filled({3, 1}, 0.5), y, all).item(), std::log(2.0), 1e-15);
  const double hand = -(std::log(0.9) + std::log(0.8) + std::log(0.6)) / 3.0;
  EXPECT_NEAR(click_loss(g, Tensor::matrix(3, 1, {0.9, 0.2, 0.6}), y, all).item(), hand, 1e-15);
  EXPECT_NEAR(hand, 0.2797, 1e-4);
  const double eps = 1e-6;
  EXPECT_LE(click_loss(g, Tensor::matrix(3, 1, {1 - eps, eps, 1 - eps}), y, all).item(), -std::log(1 - eps) + 1e-15);
  const std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_THROW(click_loss(g, Tensor::filled({3, 1}, 0.5), y, none), ContractError);
}

TEST(Model, ZeroHeadsGiveHalfProbabilities) {
  Toy toy;
  for (auto k : {CombinationKind::mul, CombinationKind::exp_mul, CombinationKind::sigmoid_log}) {
    ModelConfig c = toy_config();
    c.combination = k;
    ClickModel m = make_model(c, toy);
    for (const char* n : {"attr.head_w", "attr.head_b", "exam.head_w", "exam.head_b"}) fill(m.parameters().get(n), 0.0);
    const auto out = predict_session(m, toy.sessions[0], toy.vocab);
    Rng rng(0);
    const double expect = combine_one(k, 0.5, 0.5, m.combine_params());
    for (std::size_t i = 0; i < out.mask.size(); ++i) {
      if (!out.mask[i]) continue;
      EXPECT_EQ(out.attraction[i], 0.5);
      EXPECT_EQ(out.examination[i], 0.5);
      EXPECT_EQ(out.click[i], expect);
    }
  }
}

TEST(Model, ZeroGruAndHeadGiveHalfExamination) {
  Toy toy;
  ClickModel m = make_model(toy_config(), toy);
  for (const char* n : {"exam.gru.w_input", "exam.gru.w_hidden_gates", "exam.gru.w_hidden_cand", "exam.gru.bias",
                        "exam.head_w", "exam.head_b"})
    fill(m.parameters().get(n), 0.0);
  const BatchScores scores = eval_scores(m, toy.batch());
  for (double e : scores.examination.values()) EXPECT_EQ(e, 0.5);
}

TEST(Model, EvaluationIsDeterministic) {
  Toy toy;
  ModelConfig c = toy_config();
  c.dropout = 0.5;
  const ClickModel m = make_model(c, toy);
  const auto a = predict_session(m, toy.sessions[0], toy.vocab);
  const auto b = predict_session(m, toy.sessions[0], toy.vocab);
  EXPECT_EQ(a.click, b.click);
  EXPECT_EQ(a.attraction, b.attraction);
}

TEST(Model, MulClickBoundedByBothBranches) {
  Toy toy;
  ModelConfig c = toy_config();
  c.combination = CombinationKind::mul;
  const auto s = eval_scores(make_model(c, toy), toy.batch());
  for (std::size_t i = 0; i < s.click.numel(); ++i) {
    EXPECT_LE(s.click[i], std::min(s.attraction[i], s.examination[i]));
    EXPECT_GT(s.attraction[i], 0.0);
    EXPECT_LT(s.examination[i], 1.0);
  }
}

TEST(Model, VocabularyMismatchRejected) {
  Toy toy;
  const ClickModel m = make_model(toy_config(), toy);
  Vocabulary other = toy.vocab;
  other.urls.add(99999);
  EXPECT_THROW(predict_session(m, toy.sessions[0], other), ConfigError);
}

TEST(Model, OutputIsPaddedPerQuery) {
  Toy toy;
  const auto out = predict_session(make_model(toy_config(), toy), toy.sessions[0], toy.vocab);
  ASSERT_EQ(out.mask.size(), 20u);
  EXPECT_EQ(std::count(out.mask.begin(), out.mask.end(), 1), 6);
  for (std::size_t i = 0; i < 20; ++i)
    if (out.mask[i]) {
      EXPECT_GE(out.click[i], 1e-6);
      EXPECT_LE(out.click[i], 1 - 1e-6);
    }
}

// Sessions where one document's click (and optionally later ones) is flipped.
std::vector<Session> flipped(std::vector<Session> s, std::size_t q, std::size_t d, bool later_too) {
  auto& docs = s[0].queries;
  bool on = false;
  for (std::size_t qi = 0; qi < docs.size(); ++qi)
    for (std::size_t j = 0; j < docs[qi].docs.size(); ++j) {
      const bool here = qi == q && j == d;
      on = on || here;
      if (here || (on && later_too)) docs[qi].docs[j].click ^= 1;
    }
  return s;
}

TEST(Model, NoLeakageOfOwnOrLaterClicks) {
  Toy toy;
  toy.sessions[0].queries.push_back({12, {{105, 1, 1}, {101, 2, 1}, {100, 3, 0}, {104, 4, 1}}});
  toy.vocab = build_vocab(toy.sessions);
  const ClickModel m = make_model(ModelConfig{}, toy);
  const auto base = eval_scores(m, toy.batch());
  std::size_t target = 0;
  for (std::size_t q = 0; q < toy.sessions[0].queries.size(); ++q)
    for (std::size_t d = 0; d < toy.sessions[0].queries[q].docs.size(); ++d, ++target) {
      for (bool later : {false, true}) {
        Toy changed = toy;
        changed.sessions = flipped(toy.sessions, q, d, later);
        const auto s = eval_scores(m, changed.batch());
        EXPECT_EQ(s.attraction[target], base.attraction[target]);
        for (std::size_t t = 0; t <= target; ++t) EXPECT_EQ(s.examination[t], base.examination[t]);
      }
    }
}

TEST(Model, FutureClickPermutationKeepsEarlierExamination) {
  Toy toy;
  toy.sessions[0].queries.push_back({12, {{105, 1, 1}, {101, 2, 1}, {100, 3, 0}, {104, 4, 0}}});
  const ClickModel m = make_model(ModelConfig{}, toy);
  const auto base = eval_scores(m, toy.batch());
  Toy changed = toy;
  // Permute the clicks of the last query.
  auto& last = changed.sessions[0].queries[2].docs;
  std::swap(last[0].click, last[3].click);
  std::swap(last[1].click, last[2].click);
  const auto s = eval_scores(m, changed.batch());
  for (std::size_t t = 0; t <= 6; ++t) EXPECT_EQ(s.examination[t], base.examination[t]);
}

TEST(Model, IdentityFiltersBarelyChangeClicks) {
  Toy toy;
  for (auto k : {CombinationKind::exp_mul, CombinationKind::mul, CombinationKind::nonlinear}) {
    ModelConfig on = ModelConfig{};
    on.dropout = 0.0;
    on.combination = k;
    ModelConfig off = on;
    off.enable_filter_attr = off.enable_filter_exam = false;
    ClickModel with = make_model(on, toy, 5), without = make_model(off, toy, 5);
    for (const auto& [name, t] : with.parameters().items()) {
      if (name.ends_with(".w_re")) fill(t, 1.0);
      if (name.ends_with(".w_im")) fill(t, 0.0);
    }
    const auto a = eval_scores(with, toy.batch()), b = eval_scores(without, toy.batch());
    for (std::size_t i = 0; i < a.click.numel(); ++i) EXPECT_LT(std::abs(a.click[i] - b.click[i]), 1e-8);
  }
}

TEST(Model, FullGradientMatchesFiniteDifferences) {
  for (auto k : {CombinationKind::mul, CombinationKind::exp_mul, CombinationKind::sigmoid_log,
                 CombinationKind::linear, CombinationKind::nonlinear}) {
    const auto results = model_gradcheck(9, k);
    const auto sessions = gradcheck_sessions();
    const Vocabulary v = build_vocab(sessions);
    EXPECT_EQ(results.size(), gradcheck_model(v, 9, k).parameters().size());
    for (const auto& r : results)
      EXPECT_LT(r.max_rel_err, 1e-4) << to_string(k) << " " << r.name << " analytic " << r.analytic << " numeric "
                                     << r.numeric;
  }
}

TEST(GradcheckSuite, AllRowsPass) {
  const auto rows = run_gradcheck_suite(1);
  EXPECT_GT(rows.size(), 40u);
  for (const auto& r : rows) EXPECT_TRUE(r.pass) << r.name << " " << r.max_rel_err;
}

TEST(GradcheckSuite, CorruptedFftAdjointFailsFilterRows) {
  debug::corrupt_fft_adjoint = true;
  const auto rows = run_gradcheck_suite(1);
  debug::corrupt_fft_adjoint = false;
  bool filter_row_failed = false;
  for (const auto& r : rows) {
    if (r.name == "filter_block") filter_row_failed = !r.pass;
    if (r.name == "matmul") EXPECT_TRUE(r.pass);
  }
  EXPECT_TRUE(filter_row_failed);
}

TEST(Model, ExaminationGradientOnFiveSteps) {
  std::vector<Session> s{{1, {{10, {{100, 1, 1}, {101, 2, 0}, {102, 3, 1}, {103, 4, 0}, {104, 5, 1}}}}}};
  const Vocabulary v = build_vocab(s);
  const ClickModel m(toy_config(), v.queries.size(), v.urls.size(), 4);
  const Batch b = make_batch(s, {0}, v, 10);
  const std::vector<std::int64_t> pos{1, 2, 3, 4, 5}, ctx{0, 2, 1, 2, 1};
  std::vector<NamedTensor> gru;
  for (const auto& [name, t] : m.parameters().items())
    if (name.starts_with("exam.gru")) gru.emplace_back(name, t);
  const auto results = grad_check_tensors(
      [&](Graph& g) {
        Rng drop(0);
        return mean(g, m.examination_forward(g, pos, ctx, {0, 5}, false, drop));
      },
      gru);
  ASSERT_EQ(results.size(), 5u);
  for (const auto& r : results) EXPECT_LT(r.max_rel_err, 1e-4) << r.name;
}

TEST(Model, BatchedSessionsMatchSingleSessions) {
  PbmSpec spec;
  spec.query_ids = 5;
  spec.url_ids = 30;
  spec.docs_per_query = 4;
  auto sessions = synthesize_pbm(make_pbm_truth(spec, 1), 3, 2, 4, 2);
  sessions[1].queries.pop_back();
  const Vocabulary v = build_vocab(sessions);
  ModelConfig c = toy_config();
  c.combination = CombinationKind::sigmoid_log;
  const ClickModel m(c, v.queries.size(), v.urls.size(), 1);
  const auto all = eval_scores(m, make_batch(sessions, {0, 1, 2}, v, 10));
  std::size_t offset = 0;
  for (std::size_t s = 0; s < sessions.size(); ++s) {
    const auto one = eval_scores(m, make_batch(sessions, {s}, v, 10));
    for (std::size_t i = 0; i < one.click.numel(); ++i) EXPECT_NEAR(all.click[offset + i], one.click[i], 1e-13);
    offset += one.click.numel();
  }
  EXPECT_EQ(offset, all.click.numel());
}

}  // namespace
}  // namespace fetcm

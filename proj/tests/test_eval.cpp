#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fetcm/eval.hpp"

namespace fetcm {
namespace {

Predictions preds(std::vector<double> p, std::vector<double> c, std::vector<int> pos) {
  return {std::move(p), std::move(c), std::move(pos)};
}

// Straight transcription of the per-rank perplexity formula, in long double.
long double reference_ppl(const std::vector<double>& p, const std::vector<double>& c) {
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    s += c[i] * std::log2l(p[i]) + (1 - c[i]) * std::log2l(1 - static_cast<long double>(p[i]));
  return std::pow(2.0L, -s / p.size());
}

TEST(Perplexity, CoinFlipIsTwo) {
  Rng rng(1);
  Predictions x;
  for (int i = 0; i < 300; ++i) {
    x.click.push_back(0.5);
    x.label.push_back(uniform01(rng) < 0.3 ? 1 : 0);
    x.position.push_back(1 + i % 10);
  }
  for (int r = 1; r <= 10; ++r) EXPECT_EQ(perplexity_at_rank(x, r), 2.0);
  EXPECT_NEAR(overall_ppl(x, 10), 2.0, 1e-12);
  EXPECT_NEAR(log_likelihood(x), -std::log(2.0), 1e-12);
}

TEST(Perplexity, PerfectPredictorNearOne) {
  const auto x = preds({1, 0, 1, 0}, {1, 0, 1, 0}, {1, 1, 2, 2});
  EXPECT_NEAR(overall_ppl(x, 2), 1.0, 10 * kMetricClamp);
  EXPECT_NEAR(log_likelihood(x), 0.0, 10 * kMetricClamp);
  EXPECT_GE(overall_ppl(x, 2), 1.0);
  EXPECT_LE(log_likelihood(x), 0.0);
}

TEST(Perplexity, HandCases) {
  const auto x = preds({0.9, 0.2}, {1, 0}, {1, 1});
  EXPECT_NEAR(perplexity_at_rank(x, 1), 1.1785, 1e-4);
  EXPECT_NEAR(perplexity_at_rank(x, 1), static_cast<double>(reference_ppl({0.9, 0.8}, {1, 1})), 1e-14);
  const auto y = preds({0.9, 0.2, 0.6}, {1, 0, 1}, {1, 2, 3});
  EXPECT_NEAR(log_likelihood(y), -0.2797, 1e-4);
  EXPECT_NEAR(log_likelihood(y), (std::log(0.9) + std::log(0.8) + std::log(0.6)) / 3, 1e-15);
}

TEST(Perplexity, OverallIsMeanOfPresentRanks) {
  // Rank 1 perfect, rank 3 at a known value, rank 2 absent.
  const auto x = preds({1.0, 1.0 / 3}, {1, 1}, {1, 3});
  const auto per_rank = perplexity_by_rank(x, 4);
  EXPECT_FALSE(per_rank[1].has_value());
  EXPECT_FALSE(per_rank[3].has_value());
  EXPECT_NEAR(*per_rank[2], 3.0, 1e-12);
  EXPECT_NEAR(overall_ppl(x, 4), (*per_rank[0] + 3.0) / 2, 1e-15);
  EXPECT_NEAR(mean_present({1.0, std::nullopt, 3.0}), 2.0, 0.0);
}

TEST(Perplexity, AbsentRankIsAnError) {
  const auto x = preds({0.5}, {1}, {1});
  EXPECT_THROW(perplexity_at_rank(x, 2), MetricError);
  EXPECT_THROW(mean_present({std::nullopt, std::nullopt}), MetricError);
  EXPECT_THROW(perplexity_by_rank(preds({0.5}, {1}, {11}), 10), MetricError);
  EXPECT_THROW(log_likelihood(Predictions{}), MetricError);
  EXPECT_THROW(log_likelihood(preds({0.5}, {}, {1})), DimensionError);
}

TEST(Perplexity, ClampAvoidsInfinity) {
  const auto x = preds({0.0, 1.0}, {1, 0}, {1, 1});
  EXPECT_TRUE(std::isfinite(overall_ppl(x, 1)));
  EXPECT_NEAR(log_likelihood(x), std::log(kMetricClamp), 1e-9);
}

TEST(Perplexity, LogLikelihoodMatchesBaseTwoLoss) {
  Rng rng(7);
  Predictions x;
  for (int i = 0; i < 1000; ++i) {
    x.click.push_back(uniform(rng, 0.0, 1.0));
    x.label.push_back(uniform01(rng) < 0.4 ? 1 : 0);
    x.position.push_back(1 + static_cast<int>(uniform_index(rng, 10)));
  }
  double loss2 = 0.0;
  for (std::size_t i = 0; i < x.click.size(); ++i) loss2 += -log2_likelihood(x.click[i], x.label[i]);
  loss2 /= static_cast<double>(x.click.size());
  EXPECT_NEAR(log_likelihood(x), -std::log(2.0) * loss2, 1e-12);
}

TEST(Perplexity, NoiseStrictlyIncreasesPerplexity) {
  Rng rng(11);
  Predictions perfect;
  for (int i = 0; i < 200; ++i) {
    const double c = uniform01(rng) < 0.5 ? 1 : 0;
    perfect.label.push_back(c);
    perfect.click.push_back(c);
    perfect.position.push_back(1 + i % 10);
  }
  const double base = overall_ppl(perfect, 10);
  for (int trial = 0; trial < 100; ++trial) {
    Predictions noisy = perfect, noisier = perfect;
    const double scale = uniform(rng, 0.01, 0.4);
    for (std::size_t i = 0; i < noisy.click.size(); ++i) {
      const double d = scale * uniform01(rng);
      const double toward = noisy.label[i] > 0.5 ? -1 : 1;
      noisy.click[i] += toward * d;
      noisier.click[i] += toward * std::min(0.99, 1.5 * d + 0.01);
    }
    const double p1 = overall_ppl(noisy, 10), p2 = overall_ppl(noisier, 10);
    EXPECT_GT(p1, base) << trial;
    EXPECT_GT(p2, p1) << trial;
  }
}

Session one_query(std::int64_t q, std::vector<std::pair<std::int64_t, int>> urls_clicks) {
  QueryRecord rec{q, {}};
  int pos = 1;
  for (auto [u, c] : urls_clicks) rec.docs.push_back({u, pos++, c});
  return {0, {rec}};
}

TEST(Baseline, LaplaceSmoothing) {
  EXPECT_EQ(smoothed_ctr(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(smoothed_ctr(1, 1), 2.0 / 3.0);
  const std::vector<Session> train{one_query(1, {{5, 1}, {6, 0}}), one_query(2, {{5, 1}})};
  const RankCtrBaseline b(train, 10);
  EXPECT_DOUBLE_EQ(b.probability(1), 3.0 / 4.0);
  EXPECT_DOUBLE_EQ(b.probability(2), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(b.global_probability(), 3.0 / 5.0);
  EXPECT_DOUBLE_EQ(b.probability(7), 3.0 / 5.0);
  EXPECT_THROW(RankCtrBaseline({}, 10), ConfigError);
  const auto p = b.predict({one_query(9, {{1, 0}, {2, 1}, {3, 0}})});
  EXPECT_EQ(p.click, (std::vector<double>{0.75, 1.0 / 3.0, 0.6}));
  EXPECT_EQ(p.label, (std::vector<double>{0, 1, 0}));
}

TEST(Oracle, AnchorsAndErrors) {
  GroundTruth half;
  half.gamma = {1.0, 1.0};
  half.alpha[{1, 5}] = 0.5;
  half.alpha[{1, 6}] = 0.5;
  const std::vector<Session> test{one_query(1, {{5, 1}, {6, 0}}), one_query(1, {{6, 0}, {5, 0}})};
  EXPECT_DOUBLE_EQ(pbm_oracle_ppl(test, half, 10), 2.0);

  GroundTruth sure;
  sure.gamma = {1.0, 0.0};
  sure.alpha[{1, 5}] = 1.0;
  sure.alpha[{1, 6}] = 0.0;
  const std::vector<Session> determined{one_query(1, {{5, 1}, {6, 0}}), one_query(1, {{6, 0}, {5, 0}})};
  EXPECT_NEAR(pbm_oracle_ppl(determined, sure, 10), 1.0, 10 * kMetricClamp);

  EXPECT_THROW(pbm_oracle_ppl({one_query(2, {{5, 1}})}, half, 10), MetricError);
}

TEST(Oracle, BeatsRankBaselineOnSyntheticData) {
  const GroundTruth truth = make_pbm_truth(PbmSpec{}, 3);
  const auto train = synthesize_pbm(truth, 4000, 1, 10, 4);
  const auto test = synthesize_pbm(truth, 2000, 1, 10, 5);
  const RankCtrBaseline b(train, 10);
  const double baseline = overall_ppl(b.predict(test), 10);
  const double oracle = pbm_oracle_ppl(test, truth, 10);
  EXPECT_LT(oracle, baseline);
  EXPECT_GT(oracle, 1.0);
}

TEST(Report, CsvAndSummary) {
  const auto x = preds({0.5, 0.5, 0.5}, {1, 0, 0}, {1, 2, 1});
  EvalReport r = evaluate(x, 10);
  EXPECT_EQ(r.n_docs, 3u);
  EXPECT_EQ(r.n_queries, 2u);
  r.baseline_ppl = 2.5;
  std::ostringstream os;
  write_report_csv(os, r);
  EXPECT_EQ(os.str(), "rank,ppl\n1,2\n2,2\noverall_ppl,2\nll,-0.69314718056\nbaseline_ppl,2.5\n");
  EXPECT_EQ(summary_line(r), "ppl=2 ll=-0.6931471806 baseline_ppl=2.5");
}

TEST(Report, UntrainedMulModelMatchesClosedForm) {
  Rng rng(2);
  std::vector<Session> sessions;
  for (int s = 0; s < 20; ++s) {
    QueryRecord rec{s % 3, {}};
    for (int j = 1; j <= 4; ++j) rec.docs.push_back({s * 10 + j, j, uniform01(rng) < 0.3 ? 1 : 0});
    sessions.push_back({s, {rec}});
  }
  const Vocabulary vocab = build_vocab(sessions);
  ModelConfig c;
  c.embedding_size = c.hidden_size = 8;
  c.heads = 2;
  c.combination = CombinationKind::mul;
  ClickModel m(c, vocab.queries.size(), vocab.urls.size(), 1);
  for (const char* zero : {"attr.head_w", "attr.head_b", "exam.head_w", "exam.head_b"}) {
    Tensor t = m.parameters().get(zero);
    for (double& v : t.values()) v = 0.0;
  }
  const Predictions p = predict(m, sessions, vocab);
  for (double v : p.click) EXPECT_EQ(v, 0.25);
  for (int r = 1; r <= 4; ++r) {
    double clicks = 0, n = 0;
    for (const auto& s : sessions) {
      clicks += s.queries[0].docs[r - 1].click;
      ++n;
    }
    const double f = clicks / n;
    EXPECT_NEAR(perplexity_at_rank(p, r), std::pow(2.0, -(f * std::log2(0.25) + (1 - f) * std::log2(0.75))),
                1e-12);
  }
}

}  // namespace
}  // namespace fetcm

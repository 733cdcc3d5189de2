#pragma once

// Click-prediction metrics: per-rank perplexity (base 2), overall perplexity
// as the mean over observed ranks, and mean log-likelihood (natural log).

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fetcm/clicklog.hpp"
#include "fetcm/error.hpp"
#include "fetcm/model.hpp"

namespace fetcm {

inline constexpr double kMetricClamp = 1e-6;

inline double clamp_probability(double p, double eps) { return std::clamp(p, eps, 1.0 - eps); }

// log2 P(c | p) for one document.
inline double log2_likelihood(double p, double c, double eps = kMetricClamp) {
  p = clamp_probability(p, eps);
  return c * std::log2(p) + (1.0 - c) * std::log2(1.0 - p);
}

inline void check_predictions(const Predictions& preds) {
  if (preds.click.size() != preds.label.size() || preds.click.size() != preds.position.size())
    throw DimensionError("predictions: " + std::to_string(preds.click.size()) + " probabilities, " +
                         std::to_string(preds.label.size()) + " labels, " + std::to_string(preds.position.size()) +
                         " positions");
}

inline double perplexity_at_rank(const Predictions& preds, int rank, double eps = kMetricClamp) {
  check_predictions(preds);
  double total = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < preds.click.size(); ++i) {
    if (preds.position[i] != rank) continue;
    total += log2_likelihood(preds.click[i], preds.label[i], eps);
    ++n;
  }
  if (n == 0) throw MetricError("rank " + std::to_string(rank) + " is absent from the predictions");
  return std::exp2(-total / static_cast<double>(n));
}

// PPL for ranks 1..max_positions; absent ranks are nullopt.
inline std::vector<std::optional<double>> perplexity_by_rank(const Predictions& preds, std::size_t max_positions,
                                                             double eps = kMetricClamp) {
  check_predictions(preds);
  std::vector<double> total(max_positions, 0.0);
  std::vector<std::size_t> count(max_positions, 0);
  for (std::size_t i = 0; i < preds.click.size(); ++i) {
    const int r = preds.position[i];
    if (r < 1 || static_cast<std::size_t>(r) > max_positions)
      throw MetricError("position " + std::to_string(r) + " outside 1.." + std::to_string(max_positions));
    total[r - 1] += log2_likelihood(preds.click[i], preds.label[i], eps);
    ++count[r - 1];
  }
  std::vector<std::optional<double>> out(max_positions);
  for (std::size_t r = 0; r < max_positions; ++r)
    if (count[r]) out[r] = std::exp2(-total[r] / static_cast<double>(count[r]));
  return out;
}

inline double mean_present(const std::vector<std::optional<double>>& per_rank) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& v : per_rank)
    if (v) {
      sum += *v;
      ++n;
    }
  if (n == 0) throw MetricError("no rank is present");
  return sum / static_cast<double>(n);
}

inline double overall_ppl(const Predictions& preds, std::size_t max_positions, double eps = kMetricClamp) {
  return mean_present(perplexity_by_rank(preds, max_positions, eps));
}

inline double log_likelihood(const Predictions& preds, double eps = kMetricClamp) {
  check_predictions(preds);
  if (preds.click.empty()) throw MetricError("log-likelihood of an empty prediction set");
  double total = 0.0;
  for (std::size_t i = 0; i < preds.click.size(); ++i) {
    const double p = clamp_probability(preds.click[i], eps), c = preds.label[i];
    total += c * std::log(p) + (1.0 - c) * std::log(1.0 - p);
  }
  return total / static_cast<double>(preds.click.size());
}

// Labels and positions of every document, with the probabilities left empty.
inline Predictions observed(const std::vector<Session>& sessions) {
  Predictions out;
  for (const auto& s : sessions)
    for (const auto& q : s.queries)
      for (const auto& d : q.docs) {
        out.label.push_back(d.click);
        out.position.push_back(d.position);
      }
  return out;
}

// Laplace-smoothed click-through rate.
inline double smoothed_ctr(std::size_t clicks, std::size_t shown) {
  return (static_cast<double>(clicks) + 1.0) / (static_cast<double>(shown) + 2.0);
}

// Smoothed click-through rate per rank; ranks never shown in training use the
// smoothed rate over all ranks.
class RankCtrBaseline {
 public:
  RankCtrBaseline(const std::vector<Session>& train, std::size_t max_positions)
      : clicks_(max_positions, 0), shown_(max_positions, 0) {
    std::size_t all_clicks = 0, all_shown = 0;
    for (const auto& s : train)
      for (const auto& q : s.queries)
        for (const auto& d : q.docs) {
          if (d.position < 1 || static_cast<std::size_t>(d.position) > max_positions)
            throw ValidationError("position " + std::to_string(d.position) + " outside 1.." +
                                  std::to_string(max_positions));
          clicks_[d.position - 1] += d.click;
          ++shown_[d.position - 1];
          all_clicks += d.click;
          ++all_shown;
        }
    if (all_shown == 0) throw ConfigError("rank-CTR baseline needs at least one training document");
    global_ = smoothed_ctr(all_clicks, all_shown);
  }

  double probability(int rank) const {
    if (rank < 1 || static_cast<std::size_t>(rank) > shown_.size() || shown_[rank - 1] == 0) return global_;
    return smoothed_ctr(clicks_[rank - 1], shown_[rank - 1]);
  }
  double global_probability() const { return global_; }

  Predictions predict(const std::vector<Session>& sessions) const {
    Predictions out = observed(sessions);
    out.click.reserve(out.position.size());
    for (int r : out.position) out.click.push_back(probability(r));
    return out;
  }

 private:
  std::vector<std::size_t> clicks_, shown_;
  double global_ = 0.5;
};

inline Predictions oracle_predictions(const std::vector<Session>& sessions, const GroundTruth& truth) {
  Predictions out;
  for (const auto& s : sessions)
    for (const auto& q : s.queries)
      for (const auto& d : q.docs) {
        try {
          out.click.push_back(truth.click_probability(q.query_id, d.url_id, d.position));
        } catch (const GenerationError& e) {
          throw MetricError(std::string("oracle: ") + e.what());
        }
        out.label.push_back(d.click);
        out.position.push_back(d.position);
      }
  return out;
}

inline double pbm_oracle_ppl(const std::vector<Session>& sessions, const GroundTruth& truth,
                             std::size_t max_positions, double eps = kMetricClamp) {
  return overall_ppl(oracle_predictions(sessions, truth), max_positions, eps);
}

struct EvalReport {
  std::vector<std::optional<double>> ppl_at_rank;
  double ppl_overall = 0.0;
  double ll = 0.0;
  std::size_t n_queries = 0;
  std::size_t n_docs = 0;
  std::optional<double> baseline_ppl;
  std::optional<double> oracle_ppl;
};

inline EvalReport evaluate(const Predictions& preds, std::size_t max_positions, double eps = kMetricClamp) {
  EvalReport r;
  r.ppl_at_rank = perplexity_by_rank(preds, max_positions, eps);
  r.ppl_overall = mean_present(r.ppl_at_rank);
  r.ll = log_likelihood(preds, eps);
  r.n_docs = preds.click.size();
  r.n_queries = static_cast<std::size_t>(std::count(preds.position.begin(), preds.position.end(), 1));
  return r;
}

inline void write_report_csv(std::ostream& os, const EvalReport& r) {
  os << std::setprecision(12);
  os << "rank,ppl\n";
  for (std::size_t i = 0; i < r.ppl_at_rank.size(); ++i)
    if (r.ppl_at_rank[i]) os << i + 1 << ',' << *r.ppl_at_rank[i] << '\n';
  os << "overall_ppl," << r.ppl_overall << '\n';
  os << "ll," << r.ll << '\n';
  if (r.baseline_ppl) os << "baseline_ppl," << *r.baseline_ppl << '\n';
  if (r.oracle_ppl) os << "oracle_ppl," << *r.oracle_ppl << '\n';
}

inline std::string summary_line(const EvalReport& r) {
  std::ostringstream os;
  os << std::setprecision(10) << "ppl=" << r.ppl_overall << " ll=" << r.ll;
  if (r.baseline_ppl) os << " baseline_ppl=" << *r.baseline_ppl;
  if (r.oracle_ppl) os << " oracle_ppl=" << *r.oracle_ppl;
  return os.str();
}

}  // namespace fetcm

#pragma once

// Central finite-difference gradient checks.
//
// The function under test is evaluated repeatedly, so it must be
// deterministic: anything stochastic inside it (dropout in training mode)
// has to reseed its generator on every call so the same mask is reused.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fetcm/tensor.hpp"

namespace fetcm {

using NamedTensor = std::pair<std::string, Tensor>;

// `max_rel_err` compares whole gradient tensors,
//   |a - n| / max(1e-8, |a| + |n|)   (Euclidean norms),
// because single entries that happen to be near zero sit at the round-off
// floor of the difference quotient. The worst single entry is kept for
// diagnosis.
struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t worst_index = 0;
  double worst_entry_err = 0.0;
  double analytic = 0.0;
  double numeric = 0.0;
};

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

inline double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max(1e-8, std::sqrt(na) + std::sqrt(nn));
}

// One result per tensor in `wrt`. `f` builds a scalar on the graph it is given.
inline std::vector<GradCheckResult> grad_check_tensors(const std::function<Tensor(Graph&)>& f,
                                                       std::vector<NamedTensor> wrt,
                                                       double step = 1e-6) {
  for (auto& [name, t] : wrt) {
    t.set_requires_grad(true);
    t.drop_grad();
  }
  {
    Graph g;
    const Tensor loss = f(g);
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: non-finite objective");
    g.backward(loss);
  }
  auto eval = [&]() {
    Graph g = Graph::no_grad();
    const double v = f(g).item();
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite objective under perturbation");
    return v;
  };
  std::vector<GradCheckResult> results;
  for (auto& [name, t] : wrt) {
    GradCheckResult res{name};
    const std::vector<double> analytic = t.has_grad() ? std::vector<double>(t.grad_view().begin(), t.grad_view().end())
                                                      : std::vector<double>(t.numel(), 0.0);
    std::vector<double> numeric(t.numel());
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double saved = t[i];
      t[i] = saved + step;
      const double up = eval();
      t[i] = saved - step;
      const double down = eval();
      t[i] = saved;
      numeric[i] = (up - down) / (2.0 * step);
      const double err = relative_error(analytic[i], numeric[i]);
      if (i == 0 || err > res.worst_entry_err) {
        res.worst_entry_err = err;
        res.worst_index = i;
        res.analytic = analytic[i];
        res.numeric = numeric[i];
      }
    }
    res.max_rel_err = relative_error(analytic, numeric);
    results.push_back(std::move(res));
  }
  return results;
}

// Relative error of d f / d x.
inline double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, Tensor x,
                         double step = 1e-6) {
  const auto results = grad_check_tensors([&](Graph& g) { return f(g, x); }, {{"x", x}}, step);
  return results.front().max_rel_err;
}

inline double max_rel_err(const std::vector<GradCheckResult>& results) {
  double worst = 0.0;
  for (const auto& r : results) worst = std::max(worst, r.max_rel_err);
  return worst;
}

}  // namespace fetcm

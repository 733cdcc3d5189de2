#pragma once

#include <cmath>

#include "fetcm/tensor.hpp"

namespace fetcm {

// Scaled dot-product attention applied independently to `groups` token sets
// of `group_size` tokens each, split into `heads` heads along the feature
// axis. q, k, v: [(groups*group_size) x d] with d divisible by heads; every
// head uses columns [h*dk, (h+1)*dk) and the scale 1/sqrt(dk). No masking.
inline Tensor grouped_attention(Graph& g, const Tensor& q, const Tensor& k, const Tensor& v,
                                std::size_t group_size, std::size_t heads) {
  detail::require_same_shape(q, k, "grouped_attention");
  detail::require_same_shape(q, v, "grouped_attention");
  detail::require_rank2(q, "grouped_attention");
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0)
    throw DimensionError("grouped_attention: width " + std::to_string(d) + " not divisible by " +
                         std::to_string(heads) + " heads");
  if (group_size == 0 || q.rows() % group_size != 0)
    throw DimensionError("grouped_attention: " + std::to_string(q.rows()) + " rows do not split into groups of " +
                         std::to_string(group_size));
  const std::size_t n = group_size, groups = q.rows() / n, dk = d / heads;
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dk));

  // Attention weights, [groups][heads][n x n].
  auto weights = std::make_shared<std::vector<double>>(groups * heads * n * n);
  Tensor out = Tensor::zeros(q.shape());
  std::vector<double> row(n);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* P = weights->data() + (gi * heads + h) * n * n;
      for (std::size_t i = 0; i < n; ++i) {
        const double* qi = q.data() + (gi * n + i) * d + h * dk;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < n; ++j) {
          const double* kj = k.data() + (gi * n + j) * d + h * dk;
          double s = 0.0;
          for (std::size_t c = 0; c < dk; ++c) s += qi[c] * kj[c];
          row[j] = s * scale_factor;
          mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < n; ++j) total += (row[j] = std::exp(row[j] - mx));
        double* oi = out.data() + (gi * n + i) * d + h * dk;
        for (std::size_t j = 0; j < n; ++j) {
          const double p = row[j] / total;
          P[i * n + j] = p;
          const double* vj = v.data() + (gi * n + j) * d + h * dk;
          for (std::size_t c = 0; c < dk; ++c) oi[c] += p * vj[c];
        }
      }
    }
  }

  if (g.tracks(q, k, v)) {
    g.record("grouped_attention", {q, k, v}, {out},
             [q, k, v, out, weights, n, groups, heads, d, dk, scale_factor]() mutable {
               const auto go = out.grad_view();
               double* gq = q.requires_grad() ? q.grad_data() : nullptr;
               double* gk = k.requires_grad() ? k.grad_data() : nullptr;
               double* gv = v.requires_grad() ? v.grad_data() : nullptr;
               std::vector<double> dP(n * n), dS(n * n);
               for (std::size_t gi = 0; gi < groups; ++gi) {
                 for (std::size_t h = 0; h < heads; ++h) {
                   const double* P = weights->data() + (gi * heads + h) * n * n;
                   auto at = [&](const auto& t, std::size_t i) { return t + (gi * n + i) * d + h * dk; };
                   for (std::size_t i = 0; i < n; ++i) {
                     const double* doi = at(go.data(), i);
                     for (std::size_t j = 0; j < n; ++j) {
                       const double* vj = at(v.data(), j);
                       double s = 0.0;
                       for (std::size_t c = 0; c < dk; ++c) s += doi[c] * vj[c];
                       dP[i * n + j] = s;
                       if (gv) {
                         double* gvj = gv + (gi * n + j) * d + h * dk;
                         const double p = P[i * n + j];
                         for (std::size_t c = 0; c < dk; ++c) gvj[c] += p * doi[c];
                       }
                     }
                     double dot = 0.0;
                     for (std::size_t j = 0; j < n; ++j) dot += dP[i * n + j] * P[i * n + j];
                     for (std::size_t j = 0; j < n; ++j)
                       dS[i * n + j] = P[i * n + j] * (dP[i * n + j] - dot) * scale_factor;
                   }
                   for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < n; ++j) {
                       const double s = dS[i * n + j];
                       if (s == 0.0) continue;
                       if (gq) {
                         double* gqi = gq + (gi * n + i) * d + h * dk;
                         const double* kj = at(k.data(), j);
                         for (std::size_t c = 0; c < dk; ++c) gqi[c] += s * kj[c];
                       }
                       if (gk) {
                         double* gkj = gk + (gi * n + j) * d + h * dk;
                         const double* qi = at(q.data(), i);
                         for (std::size_t c = 0; c < dk; ++c) gkj[c] += s * qi[c];
                       }
                     }
                 }
               }
             });
  }
  return out;
}

}  // namespace fetcm

#pragma once

// Minimal reverse-mode differentiation over dense row-major float64 tensors.
//
// A Tensor is a shared handle: copies alias the same storage, which is what
// lets backward closures accumulate into the gradients of their inputs.
// Operations record themselves on a Graph when at least one input requires a
// gradient; Graph::backward() then replays the tape in reverse.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "fetcm/error.hpp"
#include "fetcm/rng.hpp"

namespace fetcm {

using Shape = std::vector<std::size_t>;

// Storage is over-aligned so that vectorized kernels split every array the
// same way on every run; unaligned heads would change summation order with
// the heap layout and break bit-exact reproducibility.
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (shape_numel(shape) != data.size())
      throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    impl_->shape = std::move(shape);
    impl_->data.assign(data.begin(), data.end());
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->data.assign(shape_numel(shape), 0.0);
    t.impl_->shape = std::move(shape);
    t.impl_->requires_grad = requires_grad;
    return t;
  }
  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(data), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  // Matrix view: rank-1 tensors are a single row.
  std::size_t rows() const { return rank() >= 2 ? impl_->shape[0] : 1; }
  std::size_t cols() const { return rows() == 0 ? 0 : numel() / rows(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  std::span<double> values() & { return impl_->data; }
  std::span<const double> values() const& { return impl_->data; }
  // A temporary handle may own the only reference: reads get a copy, writes
  // must go through a named handle.
  std::vector<double> values() const&& { return {impl_->data.begin(), impl_->data.end()}; }
  std::span<double> values() && = delete;
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool on) const { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient storage belongs to the shared buffer, not to the handle, so it is
  // reachable through const handles. Allocated (zeroed) on first use.
  std::span<double> grad() const {
    if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
    return impl_->grad;
  }
  std::span<const double> grad_view() const { return impl_->grad; }
  double* grad_data() const { return grad().data(); }
  void zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }
  void drop_grad() const { impl_->grad.clear(); }

  Tensor clone() const {
    Tensor t = zeros(impl_->shape);
    std::copy(impl_->data.begin(), impl_->data.end(), t.impl_->data.begin());
    return t;
  }

 private:
  struct Impl {
    Shape shape;
    Buffer data;
    Buffer grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

// Tape of recorded operations. Nodes are appended as operations execute, so
// the tape is topologically ordered by construction.
class Graph {
 public:
  Graph() = default;
  explicit Graph(bool recording) : recording_(recording) {}
  static Graph no_grad() { return Graph(false); }

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  bool recording() const { return recording_; }

  template <typename... Ts>
  bool tracks(const Ts&... ts) const {
    return recording_ && (ts.requires_grad() || ...);
  }

  void record(std::string op, std::vector<Tensor> inputs, std::vector<Tensor> outputs,
              std::function<void()> backward) {
    for (auto& out : outputs) out.set_requires_grad(true);
    nodes_.push_back({std::move(op), std::move(inputs), std::move(outputs), std::move(backward)});
  }

  void backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ContractError("backward() needs a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    if (!loss.requires_grad())
      throw ContractError("backward(): loss does not depend on any tensor requiring grad");
    if (consumed_) throw ContractError("backward() called twice on the same graph");
    consumed_ = true;
    Tensor seed = loss;
    seed.grad()[0] += 1.0;
    visited_.clear();
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      const bool reached = std::any_of(it->outputs.begin(), it->outputs.end(),
                                       [](const Tensor& t) { return !t.grad_view().empty(); });
      if (!reached) continue;
      it->backward();
      visited_.push_back(it->op);
    }
  }

  std::size_t size() const { return nodes_.size(); }
  // Op names in the order backward() visited them.
  const std::vector<std::string>& visit_order() const { return visited_; }

 private:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    std::vector<Tensor> outputs;
    std::function<void()> backward;
  };
  bool recording_ = true;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::vector<std::string> visited_;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline ConstMatMap mat(const Tensor& t) {
  return ConstMatMap(t.data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}
inline MatMap mat_mut(Tensor& t) {
  return MatMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MatMap grad_mat(const Tensor& t) {
  return MatMap(t.grad_data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
}
inline ConstMatMap out_grad_mat(const Tensor& t) {
  return ConstMatMap(t.grad_view().data(), static_cast<Eigen::Index>(t.rows()),
                     static_cast<Eigen::Index>(t.cols()));
}

using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXd>;

inline ConstArrMap arr(const Tensor& t) { return ConstArrMap(t.data(), static_cast<Eigen::Index>(t.numel())); }
inline ArrMap arr_mut(Tensor& t) { return ArrMap(t.data(), static_cast<Eigen::Index>(t.numel())); }
inline ArrMap grad_arr(const Tensor& t) { return ArrMap(t.grad_data(), static_cast<Eigen::Index>(t.numel())); }
inline ConstArrMap out_grad_arr(const Tensor& t) {
  return ConstArrMap(t.grad_view().data(), static_cast<Eigen::Index>(t.numel()));
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_finite(const Tensor& t, const char* op) {
  for (double v : t.values())
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra and elementwise arithmetic.

inline Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Tensor out = Tensor::zeros({a.rows(), b.cols()});
  if (a.rows() && b.cols() && a.cols()) detail::mat_mut(out).noalias() = detail::mat(a) * detail::mat(b);
  if (g.tracks(a, b)) {
    g.record("matmul", {a, b}, {out}, [a, b, out]() mutable {
      const auto dc = detail::out_grad_mat(out);
      if (a.requires_grad()) detail::grad_mat(a).noalias() += dc * detail::mat(b).transpose();
      if (b.requires_grad()) detail::grad_mat(b).noalias() += detail::mat(a).transpose() * dc;
    });
  }
  return out;
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  detail::arr_mut(out) = detail::arr(a) + detail::arr(b);
  if (g.tracks(a, b)) {
    g.record("add", {a, b}, {out}, [a, b, out]() mutable {
      const auto go = detail::out_grad_arr(out);
      if (a.requires_grad()) detail::grad_arr(a) += go;
      if (b.requires_grad()) detail::grad_arr(b) += go;
    });
  }
  return out;
}

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  detail::arr_mut(out) = detail::arr(a) * detail::arr(b);
  if (g.tracks(a, b)) {
    g.record("mul", {a, b}, {out}, [a, b, out]() mutable {
      const auto go = detail::out_grad_arr(out);
      if (a.requires_grad()) detail::grad_arr(a) += go * detail::arr(b);
      if (b.requires_grad()) detail::grad_arr(b) += go * detail::arr(a);
    });
  }
  return out;
}

inline Tensor scale(Graph& g, const Tensor& a, double factor) {
  Tensor out = Tensor::zeros(a.shape());
  detail::arr_mut(out) = detail::arr(a) * factor;
  if (g.tracks(a)) {
    g.record("scale", {a}, {out}, [a, out, factor]() mutable {
      detail::grad_arr(a) += factor * detail::out_grad_arr(out);
    });
  }
  return out;
}

// x[m x n] + bias[n] broadcast over rows.
inline Tensor add_bias(Graph& g, const Tensor& x, const Tensor& bias) {
  detail::require_rank2(x, "add_bias");
  if (bias.numel() != x.cols())
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                         shape_str(x.shape()));
  Tensor out = Tensor::zeros(x.shape());
  const auto b = Eigen::Map<const Eigen::RowVectorXd>(bias.data(), static_cast<Eigen::Index>(x.cols()));
  detail::mat_mut(out) = detail::mat(x).rowwise() + b;
  if (g.tracks(x, bias)) {
    g.record("add_bias", {x, bias}, {out}, [x, bias, out]() mutable {
      if (x.requires_grad()) detail::grad_arr(x) += detail::out_grad_arr(out);
      if (bias.requires_grad())
        Eigen::Map<Eigen::RowVectorXd>(bias.grad_data(), static_cast<Eigen::Index>(x.cols())) +=
            detail::out_grad_mat(out).colwise().sum();
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations.

enum class Activation { sigmoid, relu, tanh };

// Logistic function kept strictly inside (0, 1) even where the exact value
// rounds to 0 or 1 in double precision.
inline double sigmoid_scalar(double x) {
  constexpr double kLo = 0x1.0p-1022, kHi = 1.0 - 0x1.0p-53;
  double y;
  if (x >= 0) {
    y = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double e = std::exp(x);
    y = e / (1.0 + e);
  }
  return std::clamp(y, kLo, kHi);
}

inline Tensor activate(Graph& g, const Tensor& x, Activation kind) {
  detail::require_finite(x, "activation");
  Tensor out = x.clone();
  switch (kind) {
    case Activation::sigmoid:
      for (double& v : out.values()) v = sigmoid_scalar(v);
      break;
    case Activation::relu:
      for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
      break;
    case Activation::tanh:
      for (double& v : out.values()) v = std::tanh(v);
      break;
  }
  if (g.tracks(x)) {
    g.record("activation", {x}, {out}, [x, out, kind]() mutable {
      const auto go = detail::out_grad_arr(out);
      const auto y = detail::arr(out);
      auto gx = detail::grad_arr(x);
      switch (kind) {
        case Activation::sigmoid: gx += go * y * (1.0 - y); break;
        case Activation::relu: gx += (detail::arr(x) > 0.0).select(go, 0.0); break;
        case Activation::tanh: gx += go * (1.0 - y * y); break;
      }
    });
  }
  return out;
}

inline Tensor sigmoid(Graph& g, const Tensor& x) { return activate(g, x, Activation::sigmoid); }
inline Tensor relu(Graph& g, const Tensor& x) { return activate(g, x, Activation::relu); }
inline Tensor tanh(Graph& g, const Tensor& x) { return activate(g, x, Activation::tanh); }

// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(Graph& g, const Tensor& x) {
  detail::require_rank2(x, "softmax_rows");
  detail::require_finite(x, "softmax_rows");
  Tensor out = x.clone();
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double* row = out.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) total += (row[c] = std::exp(row[c] - mx));
    for (std::size_t c = 0; c < n; ++c) row[c] /= total;
  }
  if (g.tracks(x)) {
    g.record("softmax_rows", {x}, {out}, [x, out, n]() mutable {
      const auto go = out.grad_view();
      auto gx = x.grad();
      for (std::size_t r = 0; r < out.rows(); ++r) {
        const std::size_t base = r * n;
        double dot = 0.0;
        for (std::size_t c = 0; c < n; ++c) dot += go[base + c] * out[base + c];
        for (std::size_t c = 0; c < n; ++c) gx[base + c] += out[base + c] * (go[base + c] - dot);
      }
    });
  }
  return out;
}

// Per-row (x - mean) / sqrt(var + eps) * gamma + beta with the biased variance.
inline Tensor layer_norm(Graph& g, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-12) {
  detail::require_rank2(x, "layer_norm");
  const std::size_t d = x.cols();
  if (d == 0) throw DimensionError("layer_norm: feature dimension is zero");
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not fit " + shape_str(x.shape()));
  const std::size_t rows = x.rows();
  Tensor out = Tensor::zeros(x.shape());
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x.data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    double* h = xhat->data() + r * d;
    double* y = out.data() + r * d;
    const double* gm = gamma.data();
    const double* bt = beta.data();
    for (std::size_t c = 0; c < d; ++c) {
      h[c] = (row[c] - mean) * is;
      y[c] = h[c] * gm[c] + bt[c];
    }
  }
  if (g.tracks(x, gamma, beta)) {
    g.record("layer_norm", {x, gamma, beta}, {out},
             [x, gamma, beta, out, xhat, inv_std, d, rows]() mutable {
               const double* go = out.grad_view().data();
               const double* hat = xhat->data();
               if (gamma.requires_grad() || beta.requires_grad()) {
                 double* gg = gamma.requires_grad() ? gamma.grad_data() : nullptr;
                 double* gb = beta.requires_grad() ? beta.grad_data() : nullptr;
                 for (std::size_t r = 0; r < rows; ++r)
                   for (std::size_t c = 0; c < d; ++c) {
                     if (gg) gg[c] += go[r * d + c] * hat[r * d + c];
                     if (gb) gb[c] += go[r * d + c];
                   }
               }
               if (!x.requires_grad()) return;
               double* gx = x.grad_data();
               const double* gm = gamma.data();
               std::vector<double> dh(d);
               for (std::size_t r = 0; r < rows; ++r) {
                 const double* gor = go + r * d;
                 const double* hr = hat + r * d;
                 double mean_dh = 0.0, mean_dh_h = 0.0;
                 for (std::size_t c = 0; c < d; ++c) {
                   dh[c] = gor[c] * gm[c];
                   mean_dh += dh[c];
                   mean_dh_h += dh[c] * hr[c];
                 }
                 mean_dh /= static_cast<double>(d);
                 mean_dh_h /= static_cast<double>(d);
                 const double is = (*inv_std)[r];
                 double* gxr = gx + r * d;
                 for (std::size_t c = 0; c < d; ++c) gxr[c] += is * (dh[c] - mean_dh - hr[c] * mean_dh_h);
               }
             });
  }
  return out;
}

// Inverted dropout. The mask is drawn from `rng`; for finite-difference checks
// the caller must reseed the generator before every evaluation so that the
// same mask is reused.
inline Tensor dropout(Graph& g, const Tensor& x, double p, bool training, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: p must be in [0, 1), got " + std::to_string(p));
  if (!training || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<Eigen::ArrayXd>(static_cast<Eigen::Index>(x.numel()));
  for (auto& m : *mask) m = uniform01(rng) < p ? 0.0 : keep_scale;
  Tensor out = Tensor::zeros(x.shape());
  detail::arr_mut(out) = detail::arr(x) * *mask;
  if (g.tracks(x)) {
    g.record("dropout", {x}, {out}, [x, out, mask]() mutable {
      detail::grad_arr(x) += detail::out_grad_arr(out) * *mask;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Indexing and reshaping.

// Row gather from table[V x l]. Gradients scatter-add back into the table,
// except into `padding_idx`, which stays frozen.
inline Tensor embedding_lookup(Graph& g, const Tensor& table, std::span<const std::int64_t> ids,
                               std::optional<std::int64_t> padding_idx = std::nullopt) {
  detail::require_rank2(table, "embedding_lookup");
  const std::size_t vocab = table.rows(), width = table.cols();
  Tensor out = Tensor::zeros({ids.size(), width});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw IndexError("embedding_lookup: id " + std::to_string(id) + " outside [0, " +
                       std::to_string(vocab) + ")");
    std::copy_n(table.data() + static_cast<std::size_t>(id) * width, width, out.data() + i * width);
  }
  if (g.tracks(table)) {
    std::vector<std::int64_t> kept(ids.begin(), ids.end());
    g.record("embedding_lookup", {table}, {out},
             [table, out, kept = std::move(kept), padding_idx, width]() mutable {
               const auto go = out.grad_view();
               auto gt = table.grad();
               for (std::size_t i = 0; i < kept.size(); ++i) {
                 if (padding_idx && kept[i] == *padding_idx) continue;
                 double* dst = gt.data() + static_cast<std::size_t>(kept[i]) * width;
                 const double* src = go.data() + i * width;
                 for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
               }
             });
  }
  return out;
}

// Row gather from x[m x n]; index -1 produces a zero row.
inline Tensor gather_rows(Graph& g, const Tensor& x, std::vector<std::int64_t> index) {
  detail::require_rank2(x, "gather_rows");
  const std::size_t n = x.cols();
  Tensor out = Tensor::zeros({index.size(), n});
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto r = index[i];
    if (r < -1 || r >= static_cast<std::int64_t>(x.rows()))
      throw IndexError("gather_rows: row " + std::to_string(r) + " outside [0, " +
                       std::to_string(x.rows()) + ")");
    if (r >= 0) std::copy_n(x.data() + static_cast<std::size_t>(r) * n, n, out.data() + i * n);
  }
  if (g.tracks(x)) {
    g.record("gather_rows", {x}, {out}, [x, out, index = std::move(index), n]() mutable {
      const double* go = out.grad_view().data();
      double* gx = x.grad_data();
      for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0) continue;
        double* dst = gx + static_cast<std::size_t>(index[i]) * n;
        for (std::size_t c = 0; c < n; ++c) dst[c] += go[i * n + c];
      }
    });
  }
  return out;
}

// Column-wise concatenation of matrices with equal row counts.
inline Tensor concat_cols(Graph& g, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_rank2(p, "concat_cols");
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    total += p.cols();
  }
  Tensor out = Tensor::zeros({rows, total});
  std::size_t offset = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.data() + r * p.cols(), p.cols(), out.data() + r * total + offset);
    offset += p.cols();
  }
  bool any = false;
  for (const auto& p : parts) any = any || g.tracks(p);
  if (any) {
    g.record("concat_cols", parts, {out}, [parts, out, rows, total]() mutable {
      const double* go = out.grad_view().data();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t w = p.cols();
        if (p.requires_grad()) {
          double* gp = p.grad_data();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c) gp[r * w + c] += go[r * total + off + c];
        }
        off += w;
      }
    });
  }
  return out;
}

// Interleaves k matrices [N x l] into [(N*k) x l]; row i*k+j is row i of part j.
inline Tensor interleave_rows(Graph& g, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("interleave_rows: no inputs");
  const std::size_t k = parts.size(), rows = parts.front().rows(), width = parts.front().cols();
  for (const auto& p : parts) {
    detail::require_rank2(p, "interleave_rows");
    if (p.rows() != rows || p.cols() != width)
      throw DimensionError("interleave_rows: shape mismatch " + shape_str(parts.front().shape()) +
                           " vs " + shape_str(p.shape()));
  }
  Tensor out = Tensor::zeros({rows * k, width});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(parts[j].data() + i * width, width, out.data() + (i * k + j) * width);
  bool any = false;
  for (const auto& p : parts) any = any || g.tracks(p);
  if (any) {
    g.record("interleave_rows", parts, {out}, [parts, out, rows, k, width]() mutable {
      const double* go = out.grad_view().data();
      for (std::size_t j = 0; j < k; ++j) {
        if (!parts[j].requires_grad()) continue;
        double* gp = parts[j].grad_data();
        for (std::size_t i = 0; i < rows; ++i) {
          const double* src = go + (i * k + j) * width;
          for (std::size_t c = 0; c < width; ++c) gp[i * width + c] += src[c];
        }
      }
    });
  }
  return out;
}

inline Tensor reshape(Graph& g, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  Tensor out(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  if (g.tracks(x)) {
    g.record("reshape", {x}, {out}, [x, out]() mutable { detail::grad_arr(x) += detail::out_grad_arr(out); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses.

inline Tensor sum(Graph& g, const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor out = Tensor::scalar(total);
  if (g.tracks(x)) {
    g.record("sum", {x}, {out}, [x, out]() mutable {
      detail::grad_arr(x) += out.grad_view()[0];
    });
  }
  return out;
}

inline Tensor mean(Graph& g, const Tensor& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(g, sum(g, x), 1.0 / static_cast<double>(x.numel()));
}

// Elementwise clamp to [lo, hi]; the gradient is zero where the clamp is active.
inline Tensor clamp(Graph& g, const Tensor& x, double lo, double hi) {
  Tensor out = x.clone();
  for (double& v : out.values()) v = std::clamp(v, lo, hi);
  if (g.tracks(x)) {
    g.record("clamp", {x}, {out}, [x, out, lo, hi]() mutable {
      const auto xa = detail::arr(x);
      detail::grad_arr(x) += (xa >= lo && xa <= hi).select(detail::out_grad_arr(out), 0.0);
    });
  }
  return out;
}

// -(1/N_valid) * sum_valid [y ln p + (1 - y) ln(1 - p)], natural log.
inline Tensor binary_cross_entropy(Graph& g, const Tensor& p, std::span<const double> labels,
                                   std::span<const std::uint8_t> mask) {
  if (labels.size() != p.numel() || mask.size() != p.numel())
    throw DimensionError("binary_cross_entropy: " + std::to_string(p.numel()) + " predictions, " +
                         std::to_string(labels.size()) + " labels, " + std::to_string(mask.size()) +
                         " mask entries");
  std::size_t valid = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) {
    if (!mask[i]) continue;
    ++valid;
    total += labels[i] * std::log(p[i]) + (1.0 - labels[i]) * std::log(1.0 - p[i]);
  }
  if (valid == 0) throw ContractError("binary_cross_entropy: no valid documents");
  const double inv_n = 1.0 / static_cast<double>(valid);
  Tensor out = Tensor::scalar(-total * inv_n);
  if (g.tracks(p)) {
    std::vector<double> y(labels.begin(), labels.end());
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    g.record("binary_cross_entropy", {p}, {out},
             [p, out, y = std::move(y), m = std::move(m), inv_n]() mutable {
               const double go = out.grad_view()[0];
               auto gp = p.grad();
               for (std::size_t i = 0; i < y.size(); ++i) {
                 if (!m[i]) continue;
                 gp[i] += -go * inv_n * (y[i] / p[i] - (1.0 - y[i]) / (1.0 - p[i]));
               }
             });
  }
  return out;
}

}  // namespace fetcm

#pragma once

// Gated recurrent unit over a batch of sequences, with backpropagation
// through time.
//
//   z_t = sigmoid(x_t Wz + h_{t-1} Uz + bz)
//   r_t = sigmoid(x_t Wr + h_{t-1} Ur + br)
//   c_t = tanh(x_t Wh + (r_t * h_{t-1}) Uh + bh)
//   h_t = (1 - z_t) * h_{t-1} + z_t * c_t
//
// Row-vector convention (x W rather than W x). The three input matrices are
// packed column-wise as [Wz | Wr | Wh], likewise the biases.

#include "fetcm/tensor.hpp"

namespace fetcm {

struct GruWeights {
  Tensor input;         // [in x 3H]      Wz | Wr | Wh
  Tensor hidden_gates;  // [H x 2H]       Uz | Ur
  Tensor hidden_cand;   // [H x H]        Uh
  Tensor bias;          // [3H]           bz | br | bh

  std::size_t input_size() const { return input.rows(); }
  std::size_t hidden_size() const { return hidden_cand.rows(); }
};

// inputs: [(T*B) x in], time-major (row t*B + b). h0: [H], shared by every
// sequence in the batch. Returns all hidden states, [(T*B) x H].
inline Tensor gru_sequence(Graph& g, const Tensor& inputs, const GruWeights& w, const Tensor& h0,
                           std::size_t batch = 1) {
  using detail::RowMat;
  detail::require_rank2(inputs, "gru_sequence");
  const std::size_t in = w.input.rows(), H = w.hidden_cand.rows();
  if (w.input.shape() != Shape{in, 3 * H} || w.hidden_gates.shape() != Shape{H, 2 * H} ||
      w.hidden_cand.shape() != Shape{H, H} || w.bias.numel() != 3 * H || h0.numel() != H)
    throw DimensionError("gru_sequence: inconsistent weights input " + shape_str(w.input.shape()) +
                         " gates " + shape_str(w.hidden_gates.shape()) + " cand " +
                         shape_str(w.hidden_cand.shape()) + " bias " + shape_str(w.bias.shape()) +
                         " h0 " + shape_str(h0.shape()));
  if (inputs.cols() != in || batch == 0 || inputs.rows() % batch != 0)
    throw DimensionError("gru_sequence: inputs " + shape_str(inputs.shape()) + " do not fit input size " +
                         std::to_string(in) + " and batch " + std::to_string(batch));
  const auto B = static_cast<Eigen::Index>(batch), Hi = static_cast<Eigen::Index>(H);
  const std::size_t T = inputs.rows() / batch;

  const auto X = detail::mat(inputs);
  const auto Wx = detail::mat(w.input);
  const auto Ug = detail::mat(w.hidden_gates);
  const auto Uh = detail::mat(w.hidden_cand);
  const Eigen::Map<const Eigen::RowVectorXd> bias(w.bias.data(), 3 * Hi);
  const Eigen::Map<const Eigen::RowVectorXd> h0v(h0.data(), Hi);

  // Saved activations per step, each [B x H].
  auto z = std::make_shared<std::vector<RowMat>>(T);
  auto r = std::make_shared<std::vector<RowMat>>(T);
  auto c = std::make_shared<std::vector<RowMat>>(T);
  Tensor out = Tensor::zeros({T * batch, H});
  auto Out = detail::mat_mut(out);

  RowMat h_prev = h0v.replicate(B, 1);
  for (std::size_t t = 0; t < T; ++t) {
    const auto Xt = X.middleRows(static_cast<Eigen::Index>(t) * B, B);
    RowMat gx = Xt * Wx;
    gx.rowwise() += bias;
    RowMat gh = h_prev * Ug;
    RowMat zt = (gx.leftCols(Hi) + gh.leftCols(Hi)).unaryExpr(&sigmoid_scalar);
    RowMat rt = (gx.middleCols(Hi, Hi) + gh.rightCols(Hi)).unaryExpr(&sigmoid_scalar);
    RowMat rh = rt.cwiseProduct(h_prev);
    RowMat ct = (gx.rightCols(Hi) + rh * Uh).array().tanh().matrix();
    RowMat ht = h_prev + zt.cwiseProduct(ct - h_prev);
    Out.middleRows(static_cast<Eigen::Index>(t) * B, B) = ht;
    (*z)[t] = std::move(zt);
    (*r)[t] = std::move(rt);
    (*c)[t] = std::move(ct);
    h_prev = std::move(ht);
  }

  if (g.tracks(inputs, w.input, w.hidden_gates, w.hidden_cand, w.bias, h0)) {
    g.record("gru_sequence", {inputs, w.input, w.hidden_gates, w.hidden_cand, w.bias, h0}, {out},
             [inputs, w, h0, out, z, r, c, T, B, Hi]() mutable {
               const auto X = detail::mat(inputs);
               const auto Wx = detail::mat(w.input);
               const auto Ug = detail::mat(w.hidden_gates);
               const auto Uh = detail::mat(w.hidden_cand);
               const auto Out = detail::mat(out);
               const auto dOut = detail::out_grad_mat(out);
               const Eigen::Map<const Eigen::RowVectorXd> h0v(h0.data(), Hi);
               const Eigen::Index in = Wx.rows();

               RowMat dWx = RowMat::Zero(in, 3 * Hi), dUg = RowMat::Zero(Hi, 2 * Hi),
                      dUh = RowMat::Zero(Hi, Hi);
               Eigen::RowVectorXd db = Eigen::RowVectorXd::Zero(3 * Hi);
               RowMat dX = inputs.requires_grad() ? RowMat::Zero(X.rows(), in) : RowMat();
               RowMat dh = RowMat::Zero(B, Hi);
               RowMat h0rep = h0v.replicate(B, 1);
               RowMat dgx(B, 3 * Hi), dgh(B, 2 * Hi);

               for (std::size_t tt = T; tt-- > 0;) {
                 const auto rows = static_cast<Eigen::Index>(tt) * B;
                 dh += dOut.middleRows(rows, B);
                 const RowMat h_prev =
                     tt == 0 ? h0rep : RowMat(Out.middleRows(rows - B, B));
                 const RowMat& zt = (*z)[tt];
                 const RowMat& rt = (*r)[tt];
                 const RowMat& ct = (*c)[tt];
                 const RowMat rh = rt.cwiseProduct(h_prev);

                 const RowMat dz = dh.cwiseProduct(ct - h_prev);
                 const RowMat dc = dh.cwiseProduct(zt);
                 RowMat dh_prev = dh - dh.cwiseProduct(zt);
                 const RowMat dac = dc.cwiseProduct((1.0 - ct.array().square()).matrix());
                 const RowMat drh = dac * Uh.transpose();
                 dUh.noalias() += rh.transpose() * dac;
                 const RowMat dr = drh.cwiseProduct(h_prev);
                 dh_prev += drh.cwiseProduct(rt);
                 dgx.leftCols(Hi) = dz.cwiseProduct((zt.array() * (1.0 - zt.array())).matrix());
                 dgx.middleCols(Hi, Hi) =
                     dr.cwiseProduct((rt.array() * (1.0 - rt.array())).matrix());
                 dgx.rightCols(Hi) = dac;
                 dgh = dgx.leftCols(2 * Hi);
                 dUg.noalias() += h_prev.transpose() * dgh;
                 dh_prev.noalias() += dgh * Ug.transpose();
                 const auto Xt = X.middleRows(rows, B);
                 dWx.noalias() += Xt.transpose() * dgx;
                 db += dgx.colwise().sum();
                 if (inputs.requires_grad()) dX.middleRows(rows, B).noalias() = dgx * Wx.transpose();
                 dh = std::move(dh_prev);
               }
               if (w.input.requires_grad()) detail::grad_mat(w.input) += dWx;
               if (w.hidden_gates.requires_grad()) detail::grad_mat(w.hidden_gates) += dUg;
               if (w.hidden_cand.requires_grad()) detail::grad_mat(w.hidden_cand) += dUh;
               if (w.bias.requires_grad()) {
                 auto gb = w.bias.grad();
                 for (Eigen::Index i = 0; i < 3 * Hi; ++i) gb[static_cast<std::size_t>(i)] += db(i);
               }
               if (h0.requires_grad()) {
                 auto gh = h0.grad();
                 const Eigen::RowVectorXd s = dh.colwise().sum();
                 for (Eigen::Index i = 0; i < Hi; ++i) gh[static_cast<std::size_t>(i)] += s(i);
               }
               if (inputs.requires_grad()) detail::grad_mat(inputs) += dX;
             });
  }
  return out;
}

}  // namespace fetcm

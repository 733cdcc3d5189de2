#pragma once

// Discrete Fourier transforms along the sequence axis of [n x d] blocks.
//
// Every transform here works on `d` independent columns at once: a "row" is a
// d-wide vector and butterflies operate on whole rows, so the inner loops run
// over contiguous memory. Conventions:
//   forward:  X_k = sum_t x_t exp(-2 pi i k t / n)
//   inverse:  x_t = (1/n) sum_k X_k exp(+2 pi i k t / n)
// rfft keeps the floor(n/2)+1 non-redundant bins of a real signal.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <memory>
#include <numbers>
#include <vector>

#include "fetcm/tensor.hpp"

namespace fetcm {

enum class FftAlgorithm { radix2, direct, bluestein };

// Lengths up to this use the O(n^2) direct transform when n is not a power of
// two; longer non-power-of-two lengths go through Bluestein.
inline constexpr std::size_t kDirectDftMaxLength = 32;

inline bool is_power_of_two(std::size_t n) { return n && !(n & (n - 1)); }

inline std::size_t next_power_of_two(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

class FftPlan {
 public:
  explicit FftPlan(std::size_t n) : FftPlan(n, default_algorithm(n)) {}

  FftPlan(std::size_t n, FftAlgorithm algorithm) : n_(n), algorithm_(algorithm) {
    if (n == 0) throw DimensionError("FFT length must be positive");
    if (algorithm == FftAlgorithm::radix2 && !is_power_of_two(n))
      throw DimensionError("radix-2 FFT needs a power-of-two length, got " + std::to_string(n));
    switch (algorithm) {
      case FftAlgorithm::radix2: init_radix2(); break;
      case FftAlgorithm::direct: init_direct(); break;
      case FftAlgorithm::bluestein: init_bluestein(); break;
    }
  }

  static FftAlgorithm default_algorithm(std::size_t n) {
    if (is_power_of_two(n)) return FftAlgorithm::radix2;
    return n <= kDirectDftMaxLength ? FftAlgorithm::direct : FftAlgorithm::bluestein;
  }

  std::size_t size() const { return n_; }
  FftAlgorithm algorithm() const { return algorithm_; }

  // In-place unnormalized transform of n rows of width d (re/im row-major).
  // `inverse` selects the +i exponent; no 1/n factor is applied.
  void transform(double* re, double* im, std::size_t d, bool inverse) const {
    switch (algorithm_) {
      case FftAlgorithm::radix2: radix2(re, im, d, inverse); break;
      case FftAlgorithm::direct: direct(re, im, d, inverse); break;
      case FftAlgorithm::bluestein: bluestein(re, im, d, inverse); break;
    }
  }

 private:
  void init_radix2() {
    bitrev_.resize(n_);
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n_) ++bits;
    for (std::size_t i = 0; i < n_; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b)
        if (i & (std::size_t{1} << b)) r |= std::size_t{1} << (bits - 1 - b);
      bitrev_[i] = r;
    }
    cos_.resize(n_ / 2);
    sin_.resize(n_ / 2);
    for (std::size_t k = 0; k < n_ / 2; ++k) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n_);
      cos_[k] = std::cos(a);
      sin_[k] = std::sin(a);
    }
  }

  void init_direct() {
    cos_.resize(n_);
    sin_.resize(n_);
    for (std::size_t k = 0; k < n_; ++k) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n_);
      cos_[k] = std::cos(a);
      sin_[k] = std::sin(a);
    }
  }

  void init_bluestein() {
    const std::size_t m = next_power_of_two(2 * n_ - 1);
    inner_ = std::make_unique<FftPlan>(m, FftAlgorithm::radix2);
    // chirp_k = exp(-i pi k^2 / n); k^2 is reduced mod 2n to keep the angle small.
    chirp_re_.resize(n_);
    chirp_im_.resize(n_);
    for (std::size_t k = 0; k < n_; ++k) {
      const std::size_t k2 = (k * k) % (2 * n_);
      const double a = std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n_);
      chirp_re_[k] = std::cos(a);
      chirp_im_[k] = -std::sin(a);
    }
    // Spectrum of the conjugate chirp, wrapped for circular convolution.
    kernel_re_.assign(m, 0.0);
    kernel_im_.assign(m, 0.0);
    for (std::size_t k = 0; k < n_; ++k) {
      kernel_re_[k] = chirp_re_[k];
      kernel_im_[k] = -chirp_im_[k];
      if (k) {
        kernel_re_[m - k] = chirp_re_[k];
        kernel_im_[m - k] = -chirp_im_[k];
      }
    }
    inner_->transform(kernel_re_.data(), kernel_im_.data(), 1, false);
  }

  void radix2(double* re, double* im, std::size_t d, bool inverse) const {
    for (std::size_t i = 0; i < n_; ++i) {
      const std::size_t j = bitrev_[i];
      if (j > i) {
        std::swap_ranges(re + i * d, re + (i + 1) * d, re + j * d);
        std::swap_ranges(im + i * d, im + (i + 1) * d, im + j * d);
      }
    }
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t len = 2; len <= n_; len <<= 1) {
      const std::size_t half = len / 2, stride = n_ / len;
      for (std::size_t start = 0; start < n_; start += len) {
        for (std::size_t k = 0; k < half; ++k) {
          const double wr = cos_[k * stride], wi = sign * sin_[k * stride];
          double* ur = re + (start + k) * d;
          double* ui = im + (start + k) * d;
          double* vr = re + (start + k + half) * d;
          double* vi = im + (start + k + half) * d;
          for (std::size_t c = 0; c < d; ++c) {
            const double tr = wr * vr[c] - wi * vi[c];
            const double ti = wr * vi[c] + wi * vr[c];
            vr[c] = ur[c] - tr;
            vi[c] = ui[c] - ti;
            ur[c] += tr;
            ui[c] += ti;
          }
        }
      }
    }
  }

  void direct(double* re, double* im, std::size_t d, bool inverse) const {
    const double sign = inverse ? 1.0 : -1.0;
    std::vector<double> out_re(n_ * d, 0.0), out_im(n_ * d, 0.0);
    for (std::size_t k = 0; k < n_; ++k) {
      double* orr = out_re.data() + k * d;
      double* oi = out_im.data() + k * d;
      for (std::size_t t = 0; t < n_; ++t) {
        const std::size_t idx = (k * t) % n_;
        const double wr = cos_[idx], wi = sign * sin_[idx];
        const double* xr = re + t * d;
        const double* xi = im + t * d;
        for (std::size_t c = 0; c < d; ++c) {
          orr[c] += wr * xr[c] - wi * xi[c];
          oi[c] += wr * xi[c] + wi * xr[c];
        }
      }
    }
    std::copy(out_re.begin(), out_re.end(), re);
    std::copy(out_im.begin(), out_im.end(), im);
  }

  void bluestein(double* re, double* im, std::size_t d, bool inverse) const {
    // The inverse transform is conj(forward(conj(x))).
    if (inverse)
      for (std::size_t i = 0; i < n_ * d; ++i) im[i] = -im[i];
    const std::size_t m = inner_->size();
    std::vector<double> ar(m * d, 0.0), ai(m * d, 0.0);
    for (std::size_t t = 0; t < n_; ++t) {
      const double cr = chirp_re_[t], ci = chirp_im_[t];
      for (std::size_t c = 0; c < d; ++c) {
        const double xr = re[t * d + c], xi = im[t * d + c];
        ar[t * d + c] = xr * cr - xi * ci;
        ai[t * d + c] = xr * ci + xi * cr;
      }
    }
    inner_->transform(ar.data(), ai.data(), d, false);
    for (std::size_t k = 0; k < m; ++k) {
      const double kr = kernel_re_[k], ki = kernel_im_[k];
      for (std::size_t c = 0; c < d; ++c) {
        const double xr = ar[k * d + c], xi = ai[k * d + c];
        ar[k * d + c] = xr * kr - xi * ki;
        ai[k * d + c] = xr * ki + xi * kr;
      }
    }
    inner_->transform(ar.data(), ai.data(), d, true);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t k = 0; k < n_; ++k) {
      const double cr = chirp_re_[k], ci = chirp_im_[k];
      for (std::size_t c = 0; c < d; ++c) {
        const double xr = ar[k * d + c] * inv_m, xi = ai[k * d + c] * inv_m;
        re[k * d + c] = xr * cr - xi * ci;
        im[k * d + c] = xr * ci + xi * cr;
      }
    }
    if (inverse)
      for (std::size_t i = 0; i < n_ * d; ++i) im[i] = -im[i];
  }

  std::size_t n_;
  FftAlgorithm algorithm_;
  std::vector<std::size_t> bitrev_;
  std::vector<double> cos_, sin_;
  std::unique_ptr<FftPlan> inner_;
  std::vector<double> chirp_re_, chirp_im_, kernel_re_, kernel_im_;
};

// Plans are immutable once built; each thread keeps its own cache.
inline const FftPlan& fft_plan(std::size_t n) {
  thread_local std::map<std::size_t, std::unique_ptr<FftPlan>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<FftPlan>(n);
  return *slot;
}

namespace debug {
// Test hook: when set, rfft's backward pass uses the wrong-signed kernel
// instead of the adjoint, so gradient checks must fail.
inline std::atomic<bool> corrupt_fft_adjoint{false};
}  // namespace debug

inline std::size_t rfft_bins(std::size_t n) { return n / 2 + 1; }

// Spectrum of `groups` real blocks of length n, each with `dims` columns.
// Rows of re/im are ordered group-major: row g*bins + k.
struct ComplexSpectrum {
  std::size_t groups = 1;
  std::size_t length = 0;  // time-domain length n
  std::size_t bins = 0;
  std::size_t dims = 0;
  Tensor re;
  Tensor im;
};

// Learnable complex filter shaped like one group of a spectrum.
struct ComplexFilter {
  Tensor re;  // [bins x dims]
  Tensor im;  // [bins x dims]
};

namespace detail {

// Forward real transform of one [n x d] block into the first `bins` rows.
inline void rfft_block(const FftPlan& plan, const double* x, std::size_t d, double* out_re,
                       double* out_im, std::vector<double>& work_re, std::vector<double>& work_im) {
  const std::size_t n = plan.size(), bins = rfft_bins(n);
  work_re.assign(x, x + n * d);
  work_im.assign(n * d, 0.0);
  plan.transform(work_re.data(), work_im.data(), d, false);
  std::copy_n(work_re.begin(), bins * d, out_re);
  std::copy_n(work_im.begin(), bins * d, out_im);
}

// Real part of the unnormalized +i transform of a half spectrum zero-extended
// to length n. This is the adjoint of rfft_block.
inline void rfft_adjoint_block(const FftPlan& plan, const double* g_re, const double* g_im,
                               std::size_t d, double* out, std::vector<double>& work_re,
                               std::vector<double>& work_im, bool corrupt) {
  const std::size_t n = plan.size(), bins = rfft_bins(n);
  work_re.assign(n * d, 0.0);
  work_im.assign(n * d, 0.0);
  std::copy_n(g_re, bins * d, work_re.begin());
  std::copy_n(g_im, bins * d, work_im.begin());
  plan.transform(work_re.data(), work_im.data(), d, /*inverse=*/!corrupt);
  for (std::size_t i = 0; i < n * d; ++i) out[i] += work_re[i];
}

// Hermitian-extended inverse transform (with 1/n) of one half spectrum.
inline void irfft_block(const FftPlan& plan, const double* x_re, const double* x_im, std::size_t d,
                        double* out, std::vector<double>& work_re, std::vector<double>& work_im) {
  const std::size_t n = plan.size(), bins = rfft_bins(n);
  work_re.assign(n * d, 0.0);
  work_im.assign(n * d, 0.0);
  std::copy_n(x_re, bins * d, work_re.begin());
  std::copy_n(x_im, bins * d, work_im.begin());
  for (std::size_t k = bins; k < n; ++k)
    for (std::size_t c = 0; c < d; ++c) {
      work_re[k * d + c] = x_re[(n - k) * d + c];
      work_im[k * d + c] = -x_im[(n - k) * d + c];
    }
  plan.transform(work_re.data(), work_im.data(), d, true);
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n * d; ++i) out[i] = work_re[i] * inv_n;
}

// Multiplicity of bin k in the Hermitian extension: DC and Nyquist appear once.
inline double hermitian_weight(std::size_t k, std::size_t n) {
  if (k == 0) return 1.0;
  if (n % 2 == 0 && k == n / 2) return 1.0;
  return 2.0;
}

}  // namespace detail

// Real FFT along the row axis of x, treating x as `groups` stacked [n x d]
// blocks (x has groups*n rows). Returns floor(n/2)+1 bins per group.
inline ComplexSpectrum rfft(Graph& g, const Tensor& x, std::size_t groups = 1) {
  detail::require_rank2(x, "rfft");
  if (groups == 0 || x.rows() == 0 || x.rows() % groups != 0)
    throw DimensionError("rfft: " + shape_str(x.shape()) + " cannot be split into " +
                         std::to_string(groups) + " non-empty groups");
  const std::size_t n = x.rows() / groups, d = x.cols(), bins = rfft_bins(n);
  const FftPlan& plan = fft_plan(n);
  ComplexSpectrum s{groups, n, bins, d, Tensor::zeros({groups * bins, d}),
                    Tensor::zeros({groups * bins, d})};
  std::vector<double> wr, wi;
  for (std::size_t gi = 0; gi < groups; ++gi)
    detail::rfft_block(plan, x.data() + gi * n * d, d, s.re.data() + gi * bins * d,
                       s.im.data() + gi * bins * d, wr, wi);
  if (g.tracks(x)) {
    g.record("rfft", {x}, {s.re, s.im}, [x, re = s.re, im = s.im, groups, n, d, bins]() mutable {
      const FftPlan& p = fft_plan(n);
      const bool corrupt = debug::corrupt_fft_adjoint.load();
      std::vector<double> zeros;
      auto gre = re.grad_view(), gim = im.grad_view();
      if (gre.empty() || gim.empty()) zeros.assign(re.numel(), 0.0);
      const double* pre = gre.empty() ? zeros.data() : gre.data();
      const double* pim = gim.empty() ? zeros.data() : gim.data();
      auto gx = x.grad();
      std::vector<double> wr2, wi2;
      for (std::size_t gi = 0; gi < groups; ++gi)
        detail::rfft_adjoint_block(p, pre + gi * bins * d, pim + gi * bins * d, d,
                                   gx.data() + gi * n * d, wr2, wi2, corrupt);
    });
  }
  return s;
}

// Elementwise complex product of every group of `x` with the filter `w`.
inline ComplexSpectrum spectrum_filter_mul(Graph& g, const ComplexSpectrum& x,
                                           const ComplexFilter& w) {
  const Shape want{x.bins, x.dims};
  if (w.re.shape() != want || w.im.shape() != want)
    throw DimensionError("spectrum_filter_mul: filter " + shape_str(w.re.shape()) + "/" +
                         shape_str(w.im.shape()) + " does not match spectrum " + shape_str(want));
  const std::size_t per = x.bins * x.dims;
  ComplexSpectrum y{x.groups, x.length, x.bins, x.dims, Tensor::zeros(x.re.shape()),
                    Tensor::zeros(x.im.shape())};
  for (std::size_t gi = 0; gi < x.groups; ++gi)
    for (std::size_t i = 0; i < per; ++i) {
      const double a = x.re[gi * per + i], b = x.im[gi * per + i];
      const double c = w.re[i], d = w.im[i];
      y.re[gi * per + i] = a * c - b * d;
      y.im[gi * per + i] = a * d + b * c;
    }
  if (g.tracks(x.re, x.im, w.re, w.im)) {
    g.record("spectrum_filter_mul", {x.re, x.im, w.re, w.im}, {y.re, y.im},
             [xre = x.re, xim = x.im, wre = w.re, wim = w.im, yre = y.re, yim = y.im, per,
              groups = x.groups]() mutable {
               std::vector<double> zeros;
               auto gr = yre.grad_view(), gi_ = yim.grad_view();
               if (gr.empty() || gi_.empty()) zeros.assign(yre.numel(), 0.0);
               const double* pr = gr.empty() ? zeros.data() : gr.data();
               const double* pi = gi_.empty() ? zeros.data() : gi_.data();
               const bool dx = xre.requires_grad() || xim.requires_grad();
               const bool dw = wre.requires_grad() || wim.requires_grad();
               double* gxr = dx ? xre.grad_data() : nullptr;
               double* gxi = dx ? xim.grad_data() : nullptr;
               double* gwr = dw ? wre.grad_data() : nullptr;
               double* gwi = dw ? wim.grad_data() : nullptr;
               for (std::size_t gg = 0; gg < groups; ++gg)
                 for (std::size_t i = 0; i < per; ++i) {
                   const std::size_t j = gg * per + i;
                   const double r = pr[j], s = pi[j];
                   if (dx) {  // G * conj(W)
                     gxr[j] += r * wre[i] + s * wim[i];
                     gxi[j] += s * wre[i] - r * wim[i];
                   }
                   if (dw) {  // G * conj(X), summed over groups
                     gwr[i] += r * xre[j] + s * xim[j];
                     gwi[i] += s * xre[j] - r * xim[j];
                   }
                 }
             });
  }
  return y;
}

// Inverse real FFT back to `n` samples per group. Imaginary parts of the DC
// and (even n) Nyquist bins do not contribute, as in the Hermitian extension.
inline Tensor irfft(Graph& g, const ComplexSpectrum& x, std::size_t n) {
  if (n == 0) throw DimensionError("irfft: length must be positive");
  if (x.bins != rfft_bins(n))
    throw DimensionError("irfft: " + std::to_string(x.bins) + " bins do not match length " +
                         std::to_string(n) + " (expected " + std::to_string(rfft_bins(n)) + ")");
  if (x.re.rows() != x.groups * x.bins || x.re.cols() != x.dims || x.im.shape() != x.re.shape())
    throw DimensionError("irfft: malformed spectrum " + shape_str(x.re.shape()));
  const std::size_t d = x.dims, bins = x.bins, groups = x.groups;
  const FftPlan& plan = fft_plan(n);
  Tensor out = Tensor::zeros({groups * n, d});
  std::vector<double> wr, wi;
  for (std::size_t gi = 0; gi < groups; ++gi)
    detail::irfft_block(plan, x.re.data() + gi * bins * d, x.im.data() + gi * bins * d, d,
                        out.data() + gi * n * d, wr, wi);
  if (g.tracks(x.re, x.im)) {
    g.record("irfft", {x.re, x.im}, {out}, [re = x.re, im = x.im, out, n, d, bins, groups]() mutable {
      const FftPlan& p = fft_plan(n);
      const auto go = out.grad_view();
      double* gre = re.requires_grad() ? re.grad_data() : nullptr;
      double* gim = im.requires_grad() ? im.grad_data() : nullptr;
      std::vector<double> yr(bins * d), yi(bins * d), wr2, wi2;
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t gi = 0; gi < groups; ++gi) {
        detail::rfft_block(p, go.data() + gi * n * d, d, yr.data(), yi.data(), wr2, wi2);
        for (std::size_t k = 0; k < bins; ++k) {
          const double w = detail::hermitian_weight(k, n) * inv_n;
          const bool imag_free = k == 0 || (n % 2 == 0 && k == n / 2);
          for (std::size_t c = 0; c < d; ++c) {
            const std::size_t j = (gi * bins + k) * d + c;
            if (gre) gre[j] += w * yr[k * d + c];
            if (gim && !imag_free) gim[j] += w * yi[k * d + c];
          }
        }
      }
    });
  }
  return out;
}

// y[t] = sum_k taps[k] * x[t - k] column-wise, restarted at every sequence
// boundary. Rows of x are steps of consecutive sequences; `bounds` holds each
// sequence's first row plus an end sentinel.
inline Tensor causal_convolution(Graph& g, const Tensor& x, const Tensor& taps, const std::vector<std::size_t>& bounds) {
  const std::size_t d = x.cols(), window = taps.rows();
  if (taps.cols() != d)
    throw DimensionError("causal_convolution: taps " + shape_str(taps.shape()) + " do not match input " +
                         shape_str(x.shape()));
  if (bounds.empty() || bounds.front() != 0 || bounds.back() != x.rows() ||
      !std::is_sorted(bounds.begin(), bounds.end()))
    throw DimensionError("causal_convolution: sequence bounds do not cover " + std::to_string(x.rows()) + " rows");
  Tensor out = Tensor::zeros({x.rows(), d});
  // Calls visit(t, k) for every output row t and tap k that reaches inside t's sequence.
  auto each = [window](const std::vector<std::size_t>& seq, auto&& visit) {
    for (std::size_t s = 0; s + 1 < seq.size(); ++s)
      for (std::size_t t = seq[s]; t < seq[s + 1]; ++t)
        for (std::size_t k = 0; k < window && k <= t - seq[s]; ++k) visit(t, k);
  };
  const double* xv = x.data();
  const double* hv = taps.data();
  double* yv = out.data();
  each(bounds, [&](std::size_t t, std::size_t k) {
    for (std::size_t c = 0; c < d; ++c) yv[t * d + c] += hv[k * d + c] * xv[(t - k) * d + c];
  });
  if (g.tracks(x, taps)) {
    g.record("causal_convolution", {x, taps}, {out}, [x, taps, out, bounds, each, d]() {
      const double* go = out.grad_view().data();
      const double* xv = x.data();
      const double* hv = taps.data();
      double* gx = x.requires_grad() ? x.grad_data() : nullptr;
      double* gh = taps.requires_grad() ? taps.grad_data() : nullptr;
      each(bounds, [&](std::size_t t, std::size_t k) {
        for (std::size_t c = 0; c < d; ++c) {
          if (gx) gx[(t - k) * d + c] += hv[k * d + c] * go[t * d + c];
          if (gh) gh[k * d + c] += xv[(t - k) * d + c] * go[t * d + c];
        }
      });
    });
  }
  return out;
}

}  // namespace fetcm

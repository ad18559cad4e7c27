#pragma once

// Test-only reference implementations. These stay deliberately naive and
// independent of the library kernels: plain nested loops, no padding buffers,
// no parallelism, so they can serve as ground truth.

#include <cmath>
#include <functional>
#include <vector>

#include "eqprop/rng.hpp"
#include "eqprop/tensor.hpp"

namespace oracle {

using eqprop::Shape;
using eqprop::Tensor;

// Direct 7-loop convolution (batch, out channel, spatial, in channel, kernel).
template <typename Real>
Tensor<Real> conv2d_ref(const Tensor<Real>& w, const Tensor<Real>& x,
                        const Tensor<Real>* bias, long padding) {
  const bool batched = x.ndim() == 4;
  const std::size_t B = batched ? x.extent(0) : 1;
  const std::size_t C_in = x.extent(batched ? 1 : 0);
  const std::size_t H = x.extent(batched ? 2 : 1);
  const std::size_t W = x.extent(batched ? 3 : 2);
  const std::size_t C_out = w.extent(0), F = w.extent(2);
  const long p = padding;
  const std::size_t Ho = H + 2 * p - F + 1, Wo = W + 2 * p - F + 1;
  Tensor<Real> y(batched ? Shape{B, C_out, Ho, Wo} : Shape{C_out, Ho, Wo});
  auto xat = [&](std::size_t b, std::size_t c, long h, long ww) -> Real {
    if (h < 0 || ww < 0 || h >= static_cast<long>(H) || ww >= static_cast<long>(W))
      return Real(0);
    return x.data()[((b * C_in + c) * H + h) * W + ww];
  };
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C_out; ++c)
      for (std::size_t h = 0; h < Ho; ++h)
        for (std::size_t ww = 0; ww < Wo; ++ww) {
          Real acc = bias ? (*bias)[c] : Real(0);
          for (std::size_t i = 0; i < C_in; ++i)
            for (std::size_t j = 0; j < F; ++j)
              for (std::size_t k = 0; k < F; ++k)
                acc += w(c, i, j, k) *
                       xat(b, i, static_cast<long>(h + j) - p,
                           static_cast<long>(ww + k) - p);
          y.data()[((b * C_out + c) * Ho + h) * Wo + ww] = acc;
        }
  return y;
}

// Exhaustive window scan with first-occurrence tie break.
template <typename Real>
Tensor<Real> maxpool_ref(const Tensor<Real>& x, std::size_t F) {
  const bool batched = x.ndim() == 4;
  const std::size_t B = batched ? x.extent(0) : 1;
  const std::size_t C = x.extent(batched ? 1 : 0);
  const std::size_t H = x.extent(batched ? 2 : 1);
  const std::size_t W = x.extent(batched ? 3 : 2);
  const std::size_t Ho = H / F, Wo = W / F;
  Tensor<Real> y(batched ? Shape{B, C, Ho, Wo} : Shape{C, Ho, Wo});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ho = 0; ho < Ho; ++ho)
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          Real best = -std::numeric_limits<Real>::infinity();
          for (std::size_t i = 0; i < F; ++i)
            for (std::size_t j = 0; j < F; ++j)
              best = std::max(best, x.data()[((b * C + c) * H + ho * F + i) * W +
                                             wo * F + j]);
          y.data()[((b * C + c) * Ho + ho) * Wo + wo] = best;
        }
  return y;
}

template <typename Real>
Real gdot_ref(const Tensor<Real>& a, const Tensor<Real>& b) {
  Real acc = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i] * b[i];
  return acc;
}

// Central finite differences of a scalar function with respect to every entry
// of a tensor argument.
template <typename Real>
Tensor<Real> central_diff(const std::function<Real(const Tensor<Real>&)>& f,
                          const Tensor<Real>& at, Real eps = Real(1e-5)) {
  Tensor<Real> g(at.shape());
  Tensor<Real> x = at;
  for (std::size_t i = 0; i < at.numel(); ++i) {
    const Real orig = x[i];
    x[i] = orig + eps;
    const Real fp = f(x);
    x[i] = orig - eps;
    const Real fm = f(x);
    x[i] = orig;
    g[i] = (fp - fm) / (2 * eps);
  }
  return g;
}

template <typename Real>
Tensor<Real> random_tensor(Shape shape, eqprop::Rng& rng, Real lo = Real(-1),
                           Real hi = Real(1)) {
  Tensor<Real> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = static_cast<Real>(rng.uniform(lo, hi));
  return t;
}

template <typename Real>
Real max_rel_error(const Tensor<Real>& got, const Tensor<Real>& want) {
  Real m = 0;
  for (std::size_t i = 0; i < got.numel(); ++i) {
    const Real scale = std::max(std::abs(want[i]), Real(1));
    m = std::max(m, std::abs(got[i] - want[i]) / scale);
  }
  return m;
}

}  // namespace oracle

#pragma once

// Dense row-major tensor value type and the operator set used by the
// convergent-RNN dynamics: stride-1 2-D convolution with its adjoint and
// weight gradient, max pooling with argmax indices, unpooling, flatten,
// the generalized dot product, and the saturating activation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace eqprop {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

template <typename... Args>
std::string cat(Args&&... args) {
  std::ostringstream os;
  (os << ... << std::forward<Args>(args));
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

}  // namespace detail

template <typename Real>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(detail::shape_numel(shape_), Real(0)) {}
  Tensor(Shape shape, Real fill)
      : shape_(std::move(shape)), data_(detail::shape_numel(shape_), fill) {}

  static Tensor from_data(Shape shape, std::vector<Real> data) {
    if (detail::shape_numel(shape) != data.size())
      throw std::invalid_argument(detail::cat(
          "Tensor::from_data: shape ", detail::shape_str(shape), " holds ",
          detail::shape_numel(shape), " entries but ", data.size(), " were given"));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t extent(std::size_t i) const { return shape_[i]; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }
  std::vector<Real>& storage() { return data_; }
  const std::vector<Real>& storage() const { return data_; }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  Real operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  Real& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  Real operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  Real& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  Real operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor& operator+=(const Tensor& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    require_same_shape(o, "operator-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(Real a) {
    for (Real& v : data_) v *= a;
    return *this;
  }

  void fill(Real v) { std::fill(data_.begin(), data_.end(), v); }

  /// Throws if any entry is NaN or infinite; `what` names the offending value.
  void require_finite(const char* what) const {
    for (std::size_t i = 0; i < data_.size(); ++i)
      if (!std::isfinite(static_cast<double>(data_[i])))
        throw std::runtime_error(detail::cat(what, ": non-finite entry at flat index ",
                                             i, " in tensor ", detail::shape_str(shape_)));
  }

  bool all_finite() const {
    for (const Real& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void require_same_shape(const Tensor& o, const char* what) const {
    if (!same_shape(o))
      throw std::invalid_argument(detail::cat(what, ": shape mismatch ",
                                              detail::shape_str(shape_), " vs ",
                                              detail::shape_str(o.shape_)));
  }

 private:
  Shape shape_;
  std::vector<Real> data_;
};

template <typename Real>
Tensor<Real> operator+(Tensor<Real> a, const Tensor<Real>& b) {
  a += b;
  return a;
}
template <typename Real>
Tensor<Real> operator-(Tensor<Real> a, const Tensor<Real>& b) {
  a -= b;
  return a;
}
template <typename Real>
Tensor<Real> operator*(Tensor<Real> a, Real s) {
  a *= s;
  return a;
}

template <typename Real>
Tensor<Real> zeros_like(const Tensor<Real>& t) {
  return Tensor<Real>(t.shape());
}

/// y += a*x over all entries.
template <typename Real>
void axpy(Real a, const Tensor<Real>& x, Tensor<Real>& y) {
  y.require_same_shape(x, "axpy");
  const Real* xp = x.data();
  Real* yp = y.data();
  for (std::size_t i = 0; i < y.numel(); ++i) yp[i] += a * xp[i];
}

template <typename Real>
Real max_abs(const Tensor<Real>& t) {
  Real m = 0;
  for (std::size_t i = 0; i < t.numel(); ++i) m = std::max(m, std::abs(t[i]));
  return m;
}

template <typename Real>
Real l2_norm(const Tensor<Real>& t) {
  Real acc = 0;
  for (std::size_t i = 0; i < t.numel(); ++i) acc += t[i] * t[i];
  return std::sqrt(acc);
}

/// Dot product generalized to same-shape tensors of any rank.
template <typename Real>
Real gdot(const Tensor<Real>& a, const Tensor<Real>& b) {
  a.require_same_shape(b, "gdot");
  Real acc = 0;
  const Real* ap = a.data();
  const Real* bp = b.data();
  for (std::size_t i = 0; i < a.numel(); ++i) acc += ap[i] * bp[i];
  return acc;
}

// ---------------------------------------------------------------------------
// Pooling indices
// ---------------------------------------------------------------------------

/// Per-window argmax offsets of a max pooling pass. `shape` matches the
/// pooled output (batch included when present); offsets are within-window
/// row/column positions in [0, window-1].
struct PoolIndices {
  Shape shape;
  std::vector<std::uint8_t> row;
  std::vector<std::uint8_t> col;
  int window = 0;

  std::size_t numel() const { return row.size(); }
  bool same_layout(const PoolIndices& o) const {
    return shape == o.shape && window == o.window;
  }
};

// ---------------------------------------------------------------------------
// Activation
// ---------------------------------------------------------------------------

enum class Activation {
  HardSigmoidHalf,  // max(0, min(x/2, 1)), the half-slope saturating unit
  HardSigmoid,      // max(0, min(x, 1))
};

template <typename Real>
Real activation_scalar(Real x, Activation kind = Activation::HardSigmoidHalf) {
  if (kind == Activation::HardSigmoidHalf)
    return std::max(Real(0), std::min(x / Real(2), Real(1)));
  return std::max(Real(0), std::min(x, Real(1)));
}

/// Slope of the activation; defined as 0 at the kink points.
template <typename Real>
Real activation_deriv_scalar(Real x, Activation kind = Activation::HardSigmoidHalf) {
  if (kind == Activation::HardSigmoidHalf)
    return (x > Real(0) && x < Real(2)) ? Real(0.5) : Real(0);
  return (x > Real(0) && x < Real(1)) ? Real(1) : Real(0);
}

template <typename Real>
Tensor<Real> activation(const Tensor<Real>& x, Activation kind = Activation::HardSigmoidHalf) {
  Tensor<Real> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = activation_scalar(x[i], kind);
  return y;
}

template <typename Real>
Tensor<Real> activation_deriv(const Tensor<Real>& x,
                              Activation kind = Activation::HardSigmoidHalf) {
  Tensor<Real> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = activation_deriv_scalar(x[i], kind);
  return y;
}

// ---------------------------------------------------------------------------
// Convolution (stride 1, square kernel, symmetric zero padding)
// ---------------------------------------------------------------------------

namespace detail {

// Copies one (C,H,W) example into a zero-padded (C,H+2p,W+2p) buffer.
template <typename Real>
void pad_example(const Real* x, std::size_t C, std::size_t H, std::size_t W,
                 std::size_t p, Real* xp) {
  const std::size_t Hp = H + 2 * p, Wp = W + 2 * p;
  std::fill(xp, xp + C * Hp * Wp, Real(0));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H; ++h)
      std::copy(x + (c * H + h) * W, x + (c * H + h) * W + W,
                xp + (c * Hp + (h + p)) * Wp + p);
}

// y[c,h,:] += sum_{i,j,k} w[c,i,j,k] * xp[i,h+j,k:k+W_out]; y must be
// pre-initialized (bias or zero).
template <typename Real>
void conv2d_accum(const Real* w, const Real* xp, Real* y, std::size_t C_out,
                  std::size_t C_in, std::size_t F, std::size_t Hp, std::size_t Wp,
                  std::size_t H_out, std::size_t W_out) {
  for (std::size_t c = 0; c < C_out; ++c) {
    for (std::size_t i = 0; i < C_in; ++i) {
      const Real* wci = w + (c * C_in + i) * F * F;
      const Real* xi = xp + i * Hp * Wp;
      for (std::size_t j = 0; j < F; ++j) {
        for (std::size_t k = 0; k < F; ++k) {
          const Real s = wci[j * F + k];
          if (s == Real(0)) continue;
          for (std::size_t h = 0; h < H_out; ++h) {
            const Real* xrow = xi + (h + j) * Wp + k;
            Real* yrow = y + (c * H_out + h) * W_out;
            for (std::size_t ww = 0; ww < W_out; ++ww) yrow[ww] += s * xrow[ww];
          }
        }
      }
    }
  }
}

// xp[i,h+j,k:k+W_out] += sum_c w[c,i,j,k] * y[c,h,:]  (adjoint of conv2d_accum)
template <typename Real>
void conv2d_transpose_accum(const Real* w, const Real* y, Real* xp,
                            std::size_t C_out, std::size_t C_in, std::size_t F,
                            std::size_t Hp, std::size_t Wp, std::size_t H_out,
                            std::size_t W_out) {
  for (std::size_t c = 0; c < C_out; ++c) {
    for (std::size_t i = 0; i < C_in; ++i) {
      const Real* wci = w + (c * C_in + i) * F * F;
      Real* xi = xp + i * Hp * Wp;
      for (std::size_t j = 0; j < F; ++j) {
        for (std::size_t k = 0; k < F; ++k) {
          const Real s = wci[j * F + k];
          if (s == Real(0)) continue;
          for (std::size_t h = 0; h < H_out; ++h) {
            const Real* yrow = y + (c * H_out + h) * W_out;
            Real* xrow = xi + (h + j) * Wp + k;
            for (std::size_t ww = 0; ww < W_out; ++ww) xrow[ww] += s * yrow[ww];
          }
        }
      }
    }
  }
}

// wg[c,i,j,k] += sum_{h,w} up[c,h,w] * xp[i,h+j,w+k]
template <typename Real>
void conv2d_weight_accum(const Real* up, const Real* xp, Real* wg,
                         std::size_t C_out, std::size_t C_in, std::size_t F,
                         std::size_t Hp, std::size_t Wp, std::size_t H_out,
                         std::size_t W_out) {
  for (std::size_t c = 0; c < C_out; ++c) {
    for (std::size_t i = 0; i < C_in; ++i) {
      Real* wci = wg + (c * C_in + i) * F * F;
      const Real* xi = xp + i * Hp * Wp;
      for (std::size_t j = 0; j < F; ++j) {
        for (std::size_t k = 0; k < F; ++k) {
          Real acc = 0;
          for (std::size_t h = 0; h < H_out; ++h) {
            const Real* urow = up + (c * H_out + h) * W_out;
            const Real* xrow = xi + (h + j) * Wp + k;
            for (std::size_t ww = 0; ww < W_out; ++ww) acc += urow[ww] * xrow[ww];
          }
          wci[j * F + k] += acc;
        }
      }
    }
  }
}

struct ConvDims {
  std::size_t B, C_in, H, W, C_out, F, H_out, W_out;
  bool batched;
};

template <typename Real>
ConvDims conv_dims(const Tensor<Real>& w, const Tensor<Real>& x, long padding,
                   const char* what) {
  if (w.ndim() != 4)
    throw std::invalid_argument(cat(what, ": kernel must have rank 4, got ",
                                    shape_str(w.shape())));
  if (w.extent(2) != w.extent(3))
    throw std::invalid_argument(cat(what, ": kernel must be square, got ",
                                    shape_str(w.shape())));
  if (padding < 0)
    throw std::invalid_argument(cat(what, ": negative padding ", padding));
  ConvDims d{};
  d.batched = x.ndim() == 4;
  if (x.ndim() != 3 && x.ndim() != 4)
    throw std::invalid_argument(cat(what, ": input must have rank 3 or 4, got ",
                                    shape_str(x.shape())));
  d.B = d.batched ? x.extent(0) : 1;
  d.C_in = x.extent(d.batched ? 1 : 0);
  d.H = x.extent(d.batched ? 2 : 1);
  d.W = x.extent(d.batched ? 3 : 2);
  d.C_out = w.extent(0);
  d.F = w.extent(2);
  if (w.extent(1) != d.C_in)
    throw std::invalid_argument(cat(what, ": kernel ", shape_str(w.shape()),
                                    " expects ", w.extent(1), " input channels but input ",
                                    shape_str(x.shape()), " has ", d.C_in));
  const std::size_t p = static_cast<std::size_t>(padding);
  if (d.H + 2 * p < d.F || d.W + 2 * p < d.F)
    throw std::invalid_argument(cat(what, ": kernel size ", d.F,
                                    " exceeds padded input ", shape_str(x.shape()),
                                    " with padding ", padding));
  d.H_out = d.H + 2 * p - d.F + 1;
  d.W_out = d.W + 2 * p - d.F + 1;
  return d;
}

}  // namespace detail

/// 2-D convolution, stride 1. Kernel (C_out,C_in,F,F), input (C_in,H,W) or
/// batched (B,C_in,H,W), channel-wise bias added when given.
template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& w, const Tensor<Real>& x,
                    const Tensor<Real>* bias, long padding) {
  const auto d = detail::conv_dims(w, x, padding, "conv2d");
  if (bias && (bias->ndim() != 1 || bias->extent(0) != d.C_out))
    throw std::invalid_argument(detail::cat(
        "conv2d: bias shape ", detail::shape_str(bias->shape()),
        " does not match ", d.C_out, " output channels"));
  const std::size_t p = static_cast<std::size_t>(padding);
  const std::size_t Hp = d.H + 2 * p, Wp = d.W + 2 * p;
  Shape out_shape = d.batched ? Shape{d.B, d.C_out, d.H_out, d.W_out}
                              : Shape{d.C_out, d.H_out, d.W_out};
  Tensor<Real> y(std::move(out_shape));
  const std::size_t x_stride = d.C_in * d.H * d.W;
  const std::size_t y_stride = d.C_out * d.H_out * d.W_out;

#pragma omp parallel for schedule(static) if (d.B > 1 && y_stride * d.C_in * d.F * d.F > 16384)
  for (long long b = 0; b < static_cast<long long>(d.B); ++b) {
    std::vector<Real> xp(d.C_in * Hp * Wp);
    detail::pad_example(x.data() + b * x_stride, d.C_in, d.H, d.W, p, xp.data());
    Real* yb = y.data() + b * y_stride;
    if (bias) {
      for (std::size_t c = 0; c < d.C_out; ++c)
        std::fill(yb + c * d.H_out * d.W_out, yb + (c + 1) * d.H_out * d.W_out,
                  (*bias)[c]);
    }
    detail::conv2d_accum(w.data(), xp.data(), yb, d.C_out, d.C_in, d.F, Hp, Wp,
                         d.H_out, d.W_out);
  }
  return y;
}

template <typename Real>
Tensor<Real> conv2d(const Tensor<Real>& w, const Tensor<Real>& x,
                    const Tensor<Real>& bias, long padding) {
  return conv2d(w, x, &bias, padding);
}

/// Convolution without bias.
template <typename Real>
Tensor<Real> conv2d_nobias(const Tensor<Real>& w, const Tensor<Real>& x, long padding) {
  return conv2d<Real>(w, x, nullptr, padding);
}

/// Exact adjoint of conv2d (bias excluded) with respect to the input:
/// returns (d(w*x)/dx)^T . y, shaped like the conv2d input.
template <typename Real>
Tensor<Real> conv2d_transpose(const Tensor<Real>& w, const Tensor<Real>& y,
                              long padding, std::size_t H_in, std::size_t W_in) {
  if (w.ndim() != 4)
    throw std::invalid_argument(detail::cat("conv2d_transpose: kernel must have rank 4, got ",
                                            detail::shape_str(w.shape())));
  const bool batched = y.ndim() == 4;
  if (y.ndim() != 3 && y.ndim() != 4)
    throw std::invalid_argument(detail::cat("conv2d_transpose: input must have rank 3 or 4, got ",
                                            detail::shape_str(y.shape())));
  const std::size_t B = batched ? y.extent(0) : 1;
  const std::size_t C_out = y.extent(batched ? 1 : 0);
  const std::size_t H_out = y.extent(batched ? 2 : 1);
  const std::size_t W_out = y.extent(batched ? 3 : 2);
  if (padding < 0)
    throw std::invalid_argument(detail::cat("conv2d_transpose: negative padding ", padding));
  const std::size_t p = static_cast<std::size_t>(padding);
  const std::size_t C_in = w.extent(1), F = w.extent(2);
  if (w.extent(0) != C_out)
    throw std::invalid_argument(detail::cat(
        "conv2d_transpose: kernel ", detail::shape_str(w.shape()), " expects ",
        w.extent(0), " output channels but input ", detail::shape_str(y.shape()),
        " has ", C_out));
  if (H_in + 2 * p != H_out + F - 1 || W_in + 2 * p != W_out + F - 1)
    throw std::invalid_argument(detail::cat(
        "conv2d_transpose: output ", detail::shape_str(y.shape()),
        " is not conv2d(w, x) for an input of spatial size (", H_in, ",", W_in,
        ") with padding ", padding));
  const std::size_t Hp = H_in + 2 * p, Wp = W_in + 2 * p;
  Shape out_shape = batched ? Shape{B, C_in, H_in, W_in} : Shape{C_in, H_in, W_in};
  Tensor<Real> xg(std::move(out_shape));
  const std::size_t y_stride = C_out * H_out * W_out;
  const std::size_t x_stride = C_in * H_in * W_in;

#pragma omp parallel for schedule(static) if (B > 1 && y_stride * C_in * F * F > 16384)
  for (long long b = 0; b < static_cast<long long>(B); ++b) {
    std::vector<Real> xp(C_in * Hp * Wp, Real(0));
    detail::conv2d_transpose_accum(w.data(), y.data() + b * y_stride, xp.data(),
                                   C_out, C_in, F, Hp, Wp, H_out, W_out);
    // crop the padding
    Real* xb = xg.data() + b * x_stride;
    for (std::size_t c = 0; c < C_in; ++c)
      for (std::size_t h = 0; h < H_in; ++h)
        std::copy(xp.data() + (c * Hp + (h + p)) * Wp + p,
                  xp.data() + (c * Hp + (h + p)) * Wp + p + W_in,
                  xb + (c * H_in + h) * W_in);
  }
  return xg;
}

/// Adjoint of conv2d when the input spatial size can be inferred from the
/// output size (always possible for stride 1: H_in = H_out + F - 1 - 2p).
template <typename Real>
Tensor<Real> conv2d_transpose(const Tensor<Real>& w, const Tensor<Real>& y, long padding) {
  const bool batched = y.ndim() == 4;
  const std::size_t H_out = y.extent(batched ? 2 : 1);
  const std::size_t W_out = y.extent(batched ? 3 : 2);
  const std::size_t F = w.extent(2);
  const std::size_t p = static_cast<std::size_t>(padding < 0 ? 0 : padding);
  if (H_out + F < 1 + 2 * p || W_out + F < 1 + 2 * p)
    throw std::invalid_argument(detail::cat(
        "conv2d_transpose: cannot infer an input size for output ",
        detail::shape_str(y.shape()), " with padding ", padding));
  return conv2d_transpose(w, y, padding, H_out + F - 1 - 2 * p, W_out + F - 1 - 2 * p);
}

/// Gradients of conv2d with respect to the kernel and the channel bias, for a
/// given upstream cotangent. Batched inputs are summed over the batch.
template <typename Real>
std::pair<Tensor<Real>, Tensor<Real>> conv2d_weight_grad(const Tensor<Real>& upstream,
                                                         const Tensor<Real>& x,
                                                         long padding, std::size_t F) {
  const bool batched = x.ndim() == 4;
  if (x.ndim() != 3 && x.ndim() != 4)
    throw std::invalid_argument(detail::cat("conv2d_weight_grad: input must have rank 3 or 4, got ",
                                            detail::shape_str(x.shape())));
  if (upstream.ndim() != x.ndim())
    throw std::invalid_argument(detail::cat(
        "conv2d_weight_grad: upstream rank ", upstream.ndim(),
        " does not match input rank ", x.ndim()));
  if (padding < 0)
    throw std::invalid_argument(detail::cat("conv2d_weight_grad: negative padding ", padding));
  const std::size_t p = static_cast<std::size_t>(padding);
  const std::size_t B = batched ? x.extent(0) : 1;
  const std::size_t C_in = x.extent(batched ? 1 : 0);
  const std::size_t H = x.extent(batched ? 2 : 1);
  const std::size_t W = x.extent(batched ? 3 : 2);
  const std::size_t C_out = upstream.extent(batched ? 1 : 0);
  const std::size_t H_out = upstream.extent(batched ? 2 : 1);
  const std::size_t W_out = upstream.extent(batched ? 3 : 2);
  if (batched && upstream.extent(0) != B)
    throw std::invalid_argument(detail::cat("conv2d_weight_grad: batch mismatch ",
                                            upstream.extent(0), " vs ", B));
  if (H + 2 * p != H_out + F - 1 || W + 2 * p != W_out + F - 1)
    throw std::invalid_argument(detail::cat(
        "conv2d_weight_grad: upstream ", detail::shape_str(upstream.shape()),
        " inconsistent with input ", detail::shape_str(x.shape()),
        ", padding ", padding, ", kernel ", F));
  const std::size_t Hp = H + 2 * p, Wp = W + 2 * p;
  Tensor<Real> wg(Shape{C_out, C_in, F, F});
  Tensor<Real> bg(Shape{C_out});
  const std::size_t x_stride = C_in * H * W;
  const std::size_t u_stride = C_out * H_out * W_out;

  // Batch entries are reduced sequentially inside each (c,i,j,k) cell so the
  // result does not depend on the thread count.
  std::vector<Real> xp(B * C_in * Hp * Wp);
#pragma omp parallel for schedule(static) if (B > 1)
  for (long long b = 0; b < static_cast<long long>(B); ++b)
    detail::pad_example(x.data() + b * x_stride, C_in, H, W, p,
                        xp.data() + b * C_in * Hp * Wp);

#pragma omp parallel for schedule(static) if (C_out > 1 && B * u_stride > 16384)
  for (long long c = 0; c < static_cast<long long>(C_out); ++c) {
    for (std::size_t b = 0; b < B; ++b) {
      const Real* up = upstream.data() + b * u_stride;
      const Real* xpb = xp.data() + b * C_in * Hp * Wp;
      for (std::size_t i = 0; i < C_in; ++i) {
        Real* wci = wg.data() + (c * C_in + i) * F * F;
        const Real* xi = xpb + i * Hp * Wp;
        for (std::size_t j = 0; j < F; ++j)
          for (std::size_t k = 0; k < F; ++k) {
            Real acc = 0;
            for (std::size_t h = 0; h < H_out; ++h) {
              const Real* urow = up + (c * H_out + h) * W_out;
              const Real* xrow = xi + (h + j) * Wp + k;
              for (std::size_t ww = 0; ww < W_out; ++ww) acc += urow[ww] * xrow[ww];
            }
            wci[j * F + k] += acc;
          }
      }
      Real bacc = 0;
      const Real* uc = up + c * H_out * W_out;
      for (std::size_t i = 0; i < H_out * W_out; ++i) bacc += uc[i];
      bg[c] += bacc;
    }
  }
  return {std::move(wg), std::move(bg)};
}

// ---------------------------------------------------------------------------
// Max pooling / unpooling (window F, stride F)
// ---------------------------------------------------------------------------

/// Max pooling with window and stride F. Ties break to the first maximum in
/// row-major window order. Spatial extents must divide evenly by F.
template <typename Real>
std::pair<Tensor<Real>, PoolIndices> maxpool(const Tensor<Real>& x, std::size_t F) {
  const bool batched = x.ndim() == 4;
  if (x.ndim() != 3 && x.ndim() != 4)
    throw std::invalid_argument(detail::cat("maxpool: input must have rank 3 or 4, got ",
                                            detail::shape_str(x.shape())));
  if (F == 0) throw std::invalid_argument("maxpool: window must be positive");
  const std::size_t B = batched ? x.extent(0) : 1;
  const std::size_t C = x.extent(batched ? 1 : 0);
  const std::size_t H = x.extent(batched ? 2 : 1);
  const std::size_t W = x.extent(batched ? 3 : 2);
  if (H % F != 0 || W % F != 0)
    throw std::invalid_argument(detail::cat("maxpool: spatial extents of ",
                                            detail::shape_str(x.shape()),
                                            " are not divisible by window ", F));
  const std::size_t Ho = H / F, Wo = W / F;
  Shape out_shape = batched ? Shape{B, C, Ho, Wo} : Shape{C, Ho, Wo};
  Tensor<Real> y(out_shape);
  PoolIndices ind;
  ind.shape = out_shape;
  ind.window = static_cast<int>(F);
  ind.row.assign(y.numel(), 0);
  ind.col.assign(y.numel(), 0);

  const std::size_t x_stride = C * H * W;
  const std::size_t y_stride = C * Ho * Wo;
#pragma omp parallel for schedule(static) if (B > 1 && x_stride > 16384)
  for (long long b = 0; b < static_cast<long long>(B); ++b) {
    const Real* xb = x.data() + b * x_stride;
    Real* yb = y.data() + b * y_stride;
    std::uint8_t* rb = ind.row.data() + b * y_stride;
    std::uint8_t* cb = ind.col.data() + b * y_stride;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ho = 0; ho < Ho; ++ho)
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          Real best = xb[(c * H + ho * F) * W + wo * F];
          std::size_t bi = 0, bj = 0;
          for (std::size_t i = 0; i < F; ++i)
            for (std::size_t j = 0; j < F; ++j) {
              const Real v = xb[(c * H + ho * F + i) * W + wo * F + j];
              if (v > best) {
                best = v;
                bi = i;
                bj = j;
              }
            }
          const std::size_t o = (c * Ho + ho) * Wo + wo;
          yb[o] = best;
          rb[o] = static_cast<std::uint8_t>(bi);
          cb[o] = static_cast<std::uint8_t>(bj);
        }
  }
  return {std::move(y), std::move(ind)};
}

/// Scatters pooled values back to their argmax positions; zeros elsewhere.
template <typename Real>
Tensor<Real> unpool(const Tensor<Real>& y, const PoolIndices& ind, std::size_t F) {
  if (y.shape() != ind.shape)
    throw std::invalid_argument(detail::cat("unpool: value shape ",
                                            detail::shape_str(y.shape()),
                                            " does not match index shape ",
                                            detail::shape_str(ind.shape)));
  if (static_cast<int>(F) != ind.window)
    throw std::invalid_argument(detail::cat("unpool: window ", F,
                                            " does not match recorded window ",
                                            ind.window));
  const bool batched = y.ndim() == 4;
  const std::size_t B = batched ? y.extent(0) : 1;
  const std::size_t C = y.extent(batched ? 1 : 0);
  const std::size_t Ho = y.extent(batched ? 2 : 1);
  const std::size_t Wo = y.extent(batched ? 3 : 2);
  const std::size_t H = Ho * F, W = Wo * F;
  Shape out_shape = batched ? Shape{B, C, H, W} : Shape{C, H, W};
  Tensor<Real> x(std::move(out_shape));
  const std::size_t y_stride = C * Ho * Wo;
  const std::size_t x_stride = C * H * W;
  for (std::size_t b = 0; b < B; ++b) {
    const Real* yb = y.data() + b * y_stride;
    Real* xb = x.data() + b * x_stride;
    const std::uint8_t* rb = ind.row.data() + b * y_stride;
    const std::uint8_t* cb = ind.col.data() + b * y_stride;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ho = 0; ho < Ho; ++ho)
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          const std::size_t o = (c * Ho + ho) * Wo + wo;
          xb[(c * H + ho * F + rb[o]) * W + wo * F + cb[o]] = yb[o];
        }
  }
  return x;
}

/// Gathers entries at recorded argmax positions (adjoint of unpool; equals
/// maxpool values when the indices were taken from the same tensor).
template <typename Real>
Tensor<Real> pool_gather(const Tensor<Real>& x, const PoolIndices& ind, std::size_t F) {
  if (static_cast<int>(F) != ind.window)
    throw std::invalid_argument(detail::cat("pool_gather: window ", F,
                                            " does not match recorded window ",
                                            ind.window));
  const bool batched = x.ndim() == 4;
  if (x.ndim() != 3 && x.ndim() != 4)
    throw std::invalid_argument(detail::cat("pool_gather: input must have rank 3 or 4, got ",
                                            detail::shape_str(x.shape())));
  const std::size_t B = batched ? x.extent(0) : 1;
  const std::size_t C = x.extent(batched ? 1 : 0);
  const std::size_t H = x.extent(batched ? 2 : 1);
  const std::size_t W = x.extent(batched ? 3 : 2);
  Shape pooled = batched ? Shape{B, C, H / F, W / F} : Shape{C, H / F, W / F};
  if (pooled != ind.shape)
    throw std::invalid_argument(detail::cat("pool_gather: input ",
                                            detail::shape_str(x.shape()),
                                            " inconsistent with index shape ",
                                            detail::shape_str(ind.shape)));
  const std::size_t Ho = H / F, Wo = W / F;
  Tensor<Real> y(std::move(pooled));
  const std::size_t y_stride = C * Ho * Wo;
  const std::size_t x_stride = C * H * W;
  for (std::size_t b = 0; b < B; ++b) {
    const Real* xb = x.data() + b * x_stride;
    Real* yb = y.data() + b * y_stride;
    const std::uint8_t* rb = ind.row.data() + b * y_stride;
    const std::uint8_t* cb = ind.col.data() + b * y_stride;
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ho = 0; ho < Ho; ++ho)
        for (std::size_t wo = 0; wo < Wo; ++wo) {
          const std::size_t o = (c * Ho + ho) * Wo + wo;
          yb[o] = xb[(c * H + ho * F + rb[o]) * W + wo * F + cb[o]];
        }
  }
  return y;
}

// ---------------------------------------------------------------------------
// Flatten / unflatten
// ---------------------------------------------------------------------------

/// Row-major reshape (C,H,W) -> (CHW), or (B,C,H,W) -> (B,CHW).
template <typename Real>
Tensor<Real> flatten(const Tensor<Real>& x) {
  if (x.ndim() == 3)
    return Tensor<Real>::from_data(Shape{x.numel()}, x.storage());
  if (x.ndim() == 4)
    return Tensor<Real>::from_data(
        Shape{x.extent(0), x.extent(1) * x.extent(2) * x.extent(3)}, x.storage());
  if (x.ndim() <= 2) return x;
  throw std::invalid_argument(detail::cat("flatten: unsupported rank ", x.ndim()));
}

/// Inverse of flatten for a known per-example shape (batch preserved).
template <typename Real>
Tensor<Real> unflatten(const Tensor<Real>& x, const Shape& example_shape) {
  std::size_t per = detail::shape_numel(example_shape);
  if (x.ndim() == 1) {
    if (x.numel() != per)
      throw std::invalid_argument(detail::cat("unflatten: ", x.numel(),
                                              " entries cannot fill shape ",
                                              detail::shape_str(example_shape)));
    return Tensor<Real>::from_data(example_shape, x.storage());
  }
  if (x.ndim() == 2) {
    if (x.extent(1) != per)
      throw std::invalid_argument(detail::cat("unflatten: row size ", x.extent(1),
                                              " cannot fill shape ",
                                              detail::shape_str(example_shape)));
    Shape s{x.extent(0)};
    s.insert(s.end(), example_shape.begin(), example_shape.end());
    return Tensor<Real>::from_data(std::move(s), x.storage());
  }
  throw std::invalid_argument(detail::cat("unflatten: unsupported rank ", x.ndim()));
}

// ---------------------------------------------------------------------------
// Small dense linear algebra for the fully connected layers
// ---------------------------------------------------------------------------

/// y = W.x + b with W (out,in); x (in) or batched (B,in) -> (B,out).
template <typename Real>
Tensor<Real> matvec(const Tensor<Real>& W, const Tensor<Real>& x, const Tensor<Real>* bias) {
  if (W.ndim() != 2)
    throw std::invalid_argument(detail::cat("matvec: weight must have rank 2, got ",
                                            detail::shape_str(W.shape())));
  const std::size_t out = W.extent(0), in = W.extent(1);
  const bool batched = x.ndim() == 2;
  if (x.ndim() != 1 && x.ndim() != 2)
    throw std::invalid_argument(detail::cat("matvec: input must have rank 1 or 2, got ",
                                            detail::shape_str(x.shape())));
  const std::size_t B = batched ? x.extent(0) : 1;
  const std::size_t xin = x.extent(batched ? 1 : 0);
  if (xin != in)
    throw std::invalid_argument(detail::cat("matvec: weight ", detail::shape_str(W.shape()),
                                            " cannot act on input ", detail::shape_str(x.shape())));
  Tensor<Real> y(batched ? Shape{B, out} : Shape{out});
#pragma omp parallel for schedule(static) if (B > 1 && B * out * in > 16384)
  for (long long b = 0; b < static_cast<long long>(B); ++b) {
    const Real* xb = x.data() + b * in;
    Real* yb = y.data() + b * out;
    for (std::size_t o = 0; o < out; ++o) {
      Real acc = bias ? (*bias)[o] : Real(0);
      const Real* wrow = W.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) acc += wrow[i] * xb[i];
      yb[o] = acc;
    }
  }
  return y;
}

/// y = W^T.x; x (out) or (B,out) -> (in) or (B,in).
template <typename Real>
Tensor<Real> matvec_transpose(const Tensor<Real>& W, const Tensor<Real>& x) {
  if (W.ndim() != 2)
    throw std::invalid_argument(detail::cat("matvec_transpose: weight must have rank 2, got ",
                                            detail::shape_str(W.shape())));
  const std::size_t out = W.extent(0), in = W.extent(1);
  const bool batched = x.ndim() == 2;
  const std::size_t B = batched ? x.extent(0) : 1;
  const std::size_t xo = x.extent(batched ? 1 : 0);
  if (xo != out)
    throw std::invalid_argument(detail::cat("matvec_transpose: weight ",
                                            detail::shape_str(W.shape()),
                                            " cannot act on input ", detail::shape_str(x.shape())));
  Tensor<Real> y(batched ? Shape{B, in} : Shape{in});
#pragma omp parallel for schedule(static) if (B > 1 && B * out * in > 16384)
  for (long long b = 0; b < static_cast<long long>(B); ++b) {
    const Real* xb = x.data() + b * out;
    Real* yb = y.data() + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const Real s = xb[o];
      if (s == Real(0)) continue;
      const Real* wrow = W.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) yb[i] += s * wrow[i];
    }
  }
  return y;
}

/// Sum over batch of outer products a_b x_b^T; a (B,out), x (B,in) -> (out,in).
/// Unbatched rank-1 inputs give the plain outer product.
template <typename Real>
Tensor<Real> outer_batch_sum(const Tensor<Real>& a, const Tensor<Real>& x) {
  const bool batched = a.ndim() == 2;
  if (a.ndim() != x.ndim() || (batched && a.extent(0) != x.extent(0)))
    throw std::invalid_argument(detail::cat("outer_batch_sum: incompatible shapes ",
                                            detail::shape_str(a.shape()), " vs ",
                                            detail::shape_str(x.shape())));
  const std::size_t B = batched ? a.extent(0) : 1;
  const std::size_t out = a.extent(batched ? 1 : 0);
  const std::size_t in = x.extent(batched ? 1 : 0);
  Tensor<Real> W(Shape{out, in});
#pragma omp parallel for schedule(static) if (out > 1 && B * out * in > 16384)
  for (long long o = 0; o < static_cast<long long>(out); ++o) {
    Real* wrow = W.data() + o * in;
    for (std::size_t b = 0; b < B; ++b) {
      const Real s = a.data()[b * out + o];
      if (s == Real(0)) continue;
      const Real* xb = x.data() + b * in;
      for (std::size_t i = 0; i < in; ++i) wrow[i] += s * xb[i];
    }
  }
  return W;
}

/// Per-channel sums of a (C,H,W) or (B,C,H,W) tensor -> (C).
template <typename Real>
Tensor<Real> channel_sums(const Tensor<Real>& x) {
  const bool batched = x.ndim() == 4;
  if (x.ndim() != 3 && x.ndim() != 4)
    throw std::invalid_argument(detail::cat("channel_sums: input must have rank 3 or 4, got ",
                                            detail::shape_str(x.shape())));
  const std::size_t B = batched ? x.extent(0) : 1;
  const std::size_t C = x.extent(batched ? 1 : 0);
  const std::size_t HW = x.extent(batched ? 2 : 1) * x.extent(batched ? 3 : 2);
  Tensor<Real> s(Shape{C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const Real* p = x.data() + (b * C + c) * HW;
      Real acc = 0;
      for (std::size_t i = 0; i < HW; ++i) acc += p[i];
      s[c] += acc;
    }
  return s;
}

/// Sum over batch of a (B,D) tensor -> (D); identity for rank-1.
template <typename Real>
Tensor<Real> batch_sums(const Tensor<Real>& x) {
  if (x.ndim() == 1) return x;
  if (x.ndim() != 2)
    throw std::invalid_argument(detail::cat("batch_sums: input must have rank 1 or 2, got ",
                                            detail::shape_str(x.shape())));
  const std::size_t B = x.extent(0), D = x.extent(1);
  Tensor<Real> s(Shape{D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d) s[d] += x(b, d);
  return s;
}

}  // namespace eqprop

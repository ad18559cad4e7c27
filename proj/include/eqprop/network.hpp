#pragma once

// Architecture description, trainable parameters, the scalar primitive of
// the bidirectional dynamics, its layer-wise counterpart for unidirectional
// connections, the softmax readout, and the two loss heads.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "eqprop/rng.hpp"
#include "eqprop/tensor.hpp"

namespace eqprop {

enum class LossHead { SquaredError, SoftmaxReadout };
enum class ConnectionMode { Bidirectional, Unidirectional };

struct ConvLayerSpec {
  std::size_t channels = 0;  // output feature maps
  std::size_t kernel = 0;    // square kernel size
  long padding = 0;
  std::size_t pool = 1;      // max-pool window and stride (1 = no pooling)
};

/// Resolved per-layer shapes, derived once from the configuration.
struct LayerGeometry {
  bool conv = false;
  std::size_t in_channels = 0, in_h = 0, in_w = 0;  // shape fed from below
  std::size_t channels = 0;                         // conv output maps
  std::size_t pre_h = 0, pre_w = 0;                 // before pooling
  std::size_t pool = 1;
  std::size_t post_h = 0, post_w = 0;               // state spatial size
  std::size_t units = 0;                            // fc width
  long padding = 0;
  std::size_t kernel = 0;

  std::size_t flat() const { return conv ? channels * post_h * post_w : units; }
  Shape state_shape(std::size_t batch) const {
    if (conv) return Shape{batch, channels, post_h, post_w};
    return Shape{batch, units};
  }
};

struct ArchitectureConfig {
  std::size_t in_channels = 0, in_h = 0, in_w = 0;
  std::vector<ConvLayerSpec> conv;
  std::vector<std::size_t> fc;
  Activation activation = Activation::HardSigmoidHalf;
  LossHead head = LossHead::SoftmaxReadout;
  ConnectionMode mode = ConnectionMode::Bidirectional;
  std::size_t classes = 0;

  std::size_t num_layers() const { return conv.size() + fc.size(); }
  std::size_t num_conv() const { return conv.size(); }
  bool has_readout() const { return head == LossHead::SoftmaxReadout; }
  bool layer_is_conv(std::size_t n) const { return n < conv.size(); }
  /// Layers that carry a backward weight in unidirectional mode: every layer
  /// except the first (its input is clamped, so it is never used top-down).
  bool layer_has_backward(std::size_t n) const {
    return mode == ConnectionMode::Unidirectional && n > 0;
  }

  /// Resolves all layer shapes; throws on an invalid configuration.
  std::vector<LayerGeometry> geometry() const {
    if (num_layers() == 0)
      throw std::invalid_argument("ArchitectureConfig: at least one layer is required");
    if (in_channels == 0 || in_h == 0 || in_w == 0)
      throw std::invalid_argument("ArchitectureConfig: input shape must be positive");
    if (classes == 0)
      throw std::invalid_argument("ArchitectureConfig: class count must be positive");
    std::vector<LayerGeometry> g;
    g.reserve(num_layers());
    std::size_t C = in_channels, H = in_h, W = in_w;
    for (std::size_t n = 0; n < conv.size(); ++n) {
      const ConvLayerSpec& spec = conv[n];
      if (spec.channels == 0 || spec.kernel == 0 || spec.pool == 0)
        throw std::invalid_argument(detail::cat(
            "ArchitectureConfig: conv layer ", n, " has a zero field"));
      if (spec.padding < 0)
        throw std::invalid_argument(detail::cat(
            "ArchitectureConfig: conv layer ", n, " has negative padding"));
      LayerGeometry lg;
      lg.conv = true;
      lg.in_channels = C;
      lg.in_h = H;
      lg.in_w = W;
      lg.channels = spec.channels;
      lg.kernel = spec.kernel;
      lg.padding = spec.padding;
      lg.pool = spec.pool;
      const std::size_t p = static_cast<std::size_t>(spec.padding);
      if (H + 2 * p < spec.kernel || W + 2 * p < spec.kernel)
        throw std::invalid_argument(detail::cat(
            "ArchitectureConfig: conv layer ", n, " kernel ", spec.kernel,
            " exceeds its padded input ", H + 2 * p, "x", W + 2 * p));
      lg.pre_h = H + 2 * p - spec.kernel + 1;
      lg.pre_w = W + 2 * p - spec.kernel + 1;
      if (lg.pre_h % spec.pool != 0 || lg.pre_w % spec.pool != 0)
        throw std::invalid_argument(detail::cat(
            "ArchitectureConfig: conv layer ", n, " pre-pool extents (", lg.pre_h,
            ",", lg.pre_w, ") are not divisible by pool window ", spec.pool));
      lg.post_h = lg.pre_h / spec.pool;
      lg.post_w = lg.pre_w / spec.pool;
      C = spec.channels;
      H = lg.post_h;
      W = lg.post_w;
      g.push_back(lg);
    }
    std::size_t prev_flat = C * H * W;
    for (std::size_t i = 0; i < fc.size(); ++i) {
      if (fc[i] == 0)
        throw std::invalid_argument(detail::cat("ArchitectureConfig: fc layer ", i,
                                                " has zero units"));
      LayerGeometry lg;
      lg.conv = false;
      lg.in_channels = prev_flat;  // flat fan-in
      lg.units = fc[i];
      prev_flat = fc[i];
      g.push_back(lg);
    }
    if (head == LossHead::SquaredError && g.back().flat() != classes)
      throw std::invalid_argument(detail::cat(
          "ArchitectureConfig: squared-error head needs the last layer size (",
          g.back().flat(), ") to equal the class count (", classes, ")"));
    return g;
  }

  void validate() const { (void)geometry(); }
  std::size_t readout_inputs() const { return geometry().back().flat(); }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename Real>
struct LayerParams {
  Tensor<Real> weight;    // conv kernel (C_out,C_in,F,F) or fc matrix (out,in)
  Tensor<Real> bias;      // one entry per output channel / unit
  Tensor<Real> backward;  // backward weight, no bias; empty when unused
  bool has_backward() const { return !backward.empty(); }
};

/// All trainable tensors. Also used as the container for gradient estimates,
/// which are parameter-shaped by construction.
template <typename Real>
struct Parameters {
  std::vector<LayerParams<Real>> layers;
  Tensor<Real> readout;  // (classes, flat(last layer)); empty for squared error

  bool has_readout() const { return !readout.empty(); }

  bool congruent(const Parameters& o) const {
    if (layers.size() != o.layers.size()) return false;
    for (std::size_t n = 0; n < layers.size(); ++n) {
      if (!layers[n].weight.same_shape(o.layers[n].weight)) return false;
      if (!layers[n].bias.same_shape(o.layers[n].bias)) return false;
      if (layers[n].backward.shape() != o.layers[n].backward.shape()) return false;
    }
    return readout.shape() == o.readout.shape();
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (std::size_t n = 0; n < layers.size(); ++n) {
      fn(layers[n].weight);
      fn(layers[n].bias);
      if (layers[n].has_backward()) fn(layers[n].backward);
    }
    if (has_readout()) fn(readout);
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    for (std::size_t n = 0; n < layers.size(); ++n) {
      fn(layers[n].weight);
      fn(layers[n].bias);
      if (layers[n].has_backward()) fn(layers[n].backward);
    }
    if (has_readout()) fn(readout);
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const Tensor<Real>& t) { ok = ok && t.all_finite(); });
    return ok;
  }
};

template <typename Real>
Parameters<Real> zeros_like(const Parameters<Real>& p) {
  Parameters<Real> z;
  z.layers.resize(p.layers.size());
  for (std::size_t n = 0; n < p.layers.size(); ++n) {
    z.layers[n].weight = Tensor<Real>(p.layers[n].weight.shape());
    z.layers[n].bias = Tensor<Real>(p.layers[n].bias.shape());
    if (p.layers[n].has_backward())
      z.layers[n].backward = Tensor<Real>(p.layers[n].backward.shape());
  }
  if (p.has_readout()) z.readout = Tensor<Real>(p.readout.shape());
  return z;
}

/// dst += a * src over every tensor.
template <typename Real>
void axpy(Real a, const Parameters<Real>& src, Parameters<Real>& dst) {
  for (std::size_t n = 0; n < src.layers.size(); ++n) {
    axpy(a, src.layers[n].weight, dst.layers[n].weight);
    axpy(a, src.layers[n].bias, dst.layers[n].bias);
    if (src.layers[n].has_backward())
      axpy(a, src.layers[n].backward, dst.layers[n].backward);
  }
  if (src.has_readout()) axpy(a, src.readout, dst.readout);
}

template <typename Real>
void scale(Parameters<Real>& p, Real a) {
  p.for_each_tensor([&](Tensor<Real>& t) { t *= a; });
}

template <typename Real>
Real dot(const Parameters<Real>& a, const Parameters<Real>& b) {
  Real acc = 0;
  for (std::size_t n = 0; n < a.layers.size(); ++n) {
    acc += gdot(a.layers[n].weight, b.layers[n].weight);
    acc += gdot(a.layers[n].bias, b.layers[n].bias);
    if (a.layers[n].has_backward())
      acc += gdot(a.layers[n].backward, b.layers[n].backward);
  }
  if (a.has_readout()) acc += gdot(a.readout, b.readout);
  return acc;
}

template <typename Real>
Real l2_norm(const Parameters<Real>& p) {
  return std::sqrt(dot(p, p));
}

/// Kaiming-style uniform initialization: every weight and bias uniform in
/// +/- 1/sqrt(fan_in), forward and backward weights drawn independently.
/// Deterministic in the seed.
template <typename Real>
Parameters<Real> init_params(const ArchitectureConfig& config, std::uint64_t seed) {
  const auto geom = config.geometry();
  Rng rng(seed, /*stream=*/0x1A17);
  auto fill_uniform = [&](Tensor<Real>& t, double bound) {
    for (std::size_t i = 0; i < t.numel(); ++i)
      t[i] = static_cast<Real>(rng.uniform(-bound, bound));
  };
  Parameters<Real> p;
  p.layers.resize(geom.size());
  for (std::size_t n = 0; n < geom.size(); ++n) {
    const LayerGeometry& lg = geom[n];
    double bound;
    if (lg.conv) {
      p.layers[n].weight =
          Tensor<Real>(Shape{lg.channels, lg.in_channels, lg.kernel, lg.kernel});
      p.layers[n].bias = Tensor<Real>(Shape{lg.channels});
      bound = 1.0 / std::sqrt(double(lg.in_channels * lg.kernel * lg.kernel));
    } else {
      p.layers[n].weight = Tensor<Real>(Shape{lg.units, lg.in_channels});
      p.layers[n].bias = Tensor<Real>(Shape{lg.units});
      bound = 1.0 / std::sqrt(double(lg.in_channels));
    }
    fill_uniform(p.layers[n].weight, bound);
    fill_uniform(p.layers[n].bias, bound);
    if (config.layer_has_backward(n)) {
      p.layers[n].backward = Tensor<Real>(p.layers[n].weight.shape());
      fill_uniform(p.layers[n].backward, bound);
    }
  }
  if (config.has_readout()) {
    const std::size_t in = geom.back().flat();
    p.readout = Tensor<Real>(Shape{config.classes, in});
    fill_uniform(p.readout, 1.0 / std::sqrt(double(in)));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Network state
// ---------------------------------------------------------------------------

/// Per-layer neuron activations; every tensor carries a leading batch extent.
template <typename Real>
struct NetworkState {
  std::vector<Tensor<Real>> layers;

  static NetworkState zeros(const ArchitectureConfig& config, std::size_t batch) {
    const auto geom = config.geometry();
    NetworkState s;
    s.layers.reserve(geom.size());
    for (const LayerGeometry& lg : geom) s.layers.emplace_back(lg.state_shape(batch));
    return s;
  }

  std::size_t batch() const {
    return layers.empty() ? 0 : layers.front().extent(0);
  }
};

/// Max over layers of the entrywise max-abs difference.
template <typename Real>
Real residual(const NetworkState<Real>& a, const NetworkState<Real>& b) {
  if (a.layers.size() != b.layers.size())
    throw std::invalid_argument("residual: states have different layer counts");
  Real m = 0;
  for (std::size_t n = 0; n < a.layers.size(); ++n) {
    a.layers[n].require_same_shape(b.layers[n], "residual");
    const Real* ap = a.layers[n].data();
    const Real* bp = b.layers[n].data();
    for (std::size_t i = 0; i < a.layers[n].numel(); ++i)
      m = std::max(m, std::abs(ap[i] - bp[i]));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Readout and losses
// ---------------------------------------------------------------------------

namespace detail {

/// Sum of a.b over the non-batch dimensions, one value per example.
template <typename Real>
Tensor<Real> per_example_dot(const Tensor<Real>& a, const Tensor<Real>& b) {
  a.require_same_shape(b, "per_example_dot");
  const std::size_t B = a.extent(0);
  const std::size_t stride = a.numel() / B;
  Tensor<Real> out(Shape{B});
  for (std::size_t e = 0; e < B; ++e) {
    const Real* ap = a.data() + e * stride;
    const Real* bp = b.data() + e * stride;
    Real acc = 0;
    for (std::size_t i = 0; i < stride; ++i) acc += ap[i] * bp[i];
    out[e] = acc;
  }
  return out;
}

template <typename Real>
Tensor<Real> softmax_rows(const Tensor<Real>& logits) {
  const std::size_t B = logits.extent(0), C = logits.extent(1);
  Tensor<Real> p(logits.shape());
  for (std::size_t b = 0; b < B; ++b) {
    const Real* z = logits.data() + b * C;
    Real* pb = p.data() + b * C;
    Real zmax = z[0];
    for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
    Real sum = 0;
    for (std::size_t c = 0; c < C; ++c) {
      pb[c] = std::exp(z[c] - zmax);
      sum += pb[c];
    }
    for (std::size_t c = 0; c < C; ++c) pb[c] /= sum;
  }
  return p;
}

}  // namespace detail

/// Class probabilities of the external readout: softmax(w_out . flat(s)),
/// computed with max subtraction.
template <typename Real>
Tensor<Real> readout(const Tensor<Real>& s_last, const Tensor<Real>& w_out) {
  Tensor<Real> flat = flatten(s_last);
  if (flat.ndim() != 2)
    throw std::invalid_argument("readout: state must carry a batch dimension");
  Tensor<Real> logits = matvec<Real>(w_out, flat, nullptr);
  return detail::softmax_rows(logits);
}

/// Per-example squared-error loss 0.5 * ||prediction - y||^2.
template <typename Real>
Tensor<Real> squared_error_loss(const Tensor<Real>& prediction, const Tensor<Real>& y) {
  Tensor<Real> p = flatten(prediction);
  p.require_same_shape(y, "squared_error_loss");
  const std::size_t B = p.extent(0), D = p.extent(1);
  Tensor<Real> out(Shape{B});
  for (std::size_t b = 0; b < B; ++b) {
    Real acc = 0;
    for (std::size_t d = 0; d < D; ++d) {
      const Real diff = p(b, d) - y(b, d);
      acc += diff * diff;
    }
    out[b] = acc / 2;
  }
  return out;
}

/// Per-example cross-entropy of the softmax readout against one-hot targets,
/// evaluated from logits for numerical stability.
template <typename Real>
Tensor<Real> cross_entropy_loss(const Tensor<Real>& s_last, const Tensor<Real>& w_out,
                                const Tensor<Real>& y) {
  Tensor<Real> flat = flatten(s_last);
  Tensor<Real> logits = matvec<Real>(w_out, flat, nullptr);
  logits.require_same_shape(y, "cross_entropy_loss");
  const std::size_t B = logits.extent(0), C = logits.extent(1);
  Tensor<Real> out(Shape{B});
  for (std::size_t b = 0; b < B; ++b) {
    const Real* z = logits.data() + b * C;
    Real zmax = z[0];
    for (std::size_t c = 1; c < C; ++c) zmax = std::max(zmax, z[c]);
    Real lse = 0;
    for (std::size_t c = 0; c < C; ++c) lse += std::exp(z[c] - zmax);
    lse = std::log(lse) + zmax;
    Real acc = 0;
    for (std::size_t c = 0; c < C; ++c) acc -= y(b, c) * (z[c] - lse);
    out[b] = acc;
  }
  return out;
}

/// Per-example loss of the configured head at a given state.
template <typename Real>
Tensor<Real> head_loss(const ArchitectureConfig& config, const NetworkState<Real>& s,
                       const Parameters<Real>& params, const Tensor<Real>& y) {
  if (config.head == LossHead::SquaredError)
    return squared_error_loss(s.layers.back(), y);
  return cross_entropy_loss(s.layers.back(), params.readout, y);
}

// ---------------------------------------------------------------------------
// Primitive function (bidirectional mode)
// ---------------------------------------------------------------------------

/// Scalar primitive of the bidirectional dynamics, one value per batch
/// element. Conv terms contract the layer state with the pooled forward
/// drive; fc terms are bilinear with the bias folded into the pre-activation.
template <typename Real>
Tensor<Real> phi(const Tensor<Real>& x, const NetworkState<Real>& state,
                 const Parameters<Real>& params, const ArchitectureConfig& config) {
  if (config.mode != ConnectionMode::Bidirectional)
    throw std::invalid_argument(
        "phi: no scalar primitive exists in unidirectional mode; use phi_tilde");
  const auto geom = config.geometry();
  if (state.layers.size() != geom.size())
    throw std::invalid_argument(detail::cat("phi: state has ", state.layers.size(),
                                            " layers, expected ", geom.size()));
  const std::size_t B = state.batch();
  Tensor<Real> total(Shape{B});
  const Tensor<Real>* below = &x;
  for (std::size_t n = 0; n < geom.size(); ++n) {
    const LayerGeometry& lg = geom[n];
    Tensor<Real> drive;
    if (lg.conv) {
      auto pooled = maxpool(
          conv2d(params.layers[n].weight, *below, params.layers[n].bias, lg.padding),
          lg.pool);
      drive = std::move(pooled.first);
    } else {
      drive = matvec(params.layers[n].weight, flatten(*below), &params.layers[n].bias);
    }
    total += detail::per_example_dot(state.layers[n], drive);
    below = &state.layers[n];
  }
  return total;
}

// ---------------------------------------------------------------------------
// Layer-wise quantities (unidirectional mode)
// ---------------------------------------------------------------------------

/// Layer-wise scalar whose state derivative reproduces the unidirectional
/// pre-activation of layer n: the forward drive through w_f[n] plus the
/// coupling to layer n+1 through w_b[n+1] (at the top layer, the nudging
/// loss term -beta * loss instead). One value per batch element.
template <typename Real>
Tensor<Real> phi_tilde(std::size_t n, const Parameters<Real>& params,
                       const NetworkState<Real>& state, const Tensor<Real>& x,
                       const Tensor<Real>& y, Real beta,
                       const ArchitectureConfig& config) {
  if (config.mode != ConnectionMode::Unidirectional)
    throw std::invalid_argument("phi_tilde: defined for unidirectional mode only");
  const auto geom = config.geometry();
  if (n >= geom.size())
    throw std::invalid_argument(detail::cat("phi_tilde: layer index ", n,
                                            " out of range [0,", geom.size() - 1, "]"));
  const std::size_t B = state.batch();
  const Tensor<Real>& below = (n == 0) ? x : state.layers[n - 1];

  Tensor<Real> total(Shape{B});
  if (geom[n].conv) {
    auto pooled = maxpool(
        conv2d(params.layers[n].weight, below, params.layers[n].bias, geom[n].padding),
        geom[n].pool);
    total += detail::per_example_dot(state.layers[n], pooled.first);
  } else {
    total += detail::per_example_dot(
        state.layers[n],
        matvec(params.layers[n].weight, flatten(below), &params.layers[n].bias));
  }

  const std::size_t last = geom.size() - 1;
  if (n < last) {
    // coupling to the layer above through its backward weight (bias-free)
    const Tensor<Real>& wb = params.layers[n + 1].backward;
    if (geom[n + 1].conv) {
      auto pooled = maxpool(conv2d_nobias(wb, state.layers[n], geom[n + 1].padding),
                            geom[n + 1].pool);
      total += detail::per_example_dot(state.layers[n + 1], pooled.first);
    } else {
      total += detail::per_example_dot(
          state.layers[n + 1], matvec<Real>(wb, flatten(state.layers[n]), nullptr));
    }
  } else if (beta != Real(0)) {
    Tensor<Real> loss = head_loss(config, state, params, y);
    axpy(-beta, loss, total);
  }
  return total;
}

}  // namespace eqprop

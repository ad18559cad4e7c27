#pragma once

// Free and nudged relaxation of the convergent network. All layers update
// synchronously: every right-hand side reads the state at time t and writes
// t+1. Pool argmax indices are recomputed each step from the current
// pre-pool activations.

#include <optional>
#include <vector>

#include "eqprop/network.hpp"
#include "eqprop/tensor.hpp"

namespace eqprop {

template <typename Real>
struct Nudge {
  Real beta = 0;
  Tensor<Real> y;  // targets (B, classes)
};

/// Pool indices in effect during one transition: `fwd[n]` for the forward
/// drive of conv layer n; `back[n]` for the top-down coupling through the
/// backward kernel of conv layer n (unidirectional mode only, n >= 1).
struct StepIndices {
  std::vector<PoolIndices> fwd;
  std::vector<PoolIndices> back;
};

template <typename Real>
struct Trajectory {
  std::vector<NetworkState<Real>> states;  // s_0 .. s_steps
  std::vector<StepIndices> indices;        // one record per transition
  Real beta = 0;
};

template <typename Real>
struct RelaxReport {
  NetworkState<Real> final_state;
  Real residual = 0;  // max over layers of |s_T - s_{T-1}|_inf
  std::size_t steps = 0;
};

namespace detail {

template <typename Real>
void check_nudge(const Nudge<Real>& nudge, const ArchitectureConfig& config,
                 std::size_t batch) {
  if (nudge.y.ndim() != 2 || nudge.y.extent(0) != batch ||
      nudge.y.extent(1) != config.classes)
    throw std::invalid_argument(cat("nudge: target shape ", shape_str(nudge.y.shape()),
                                    " does not match (batch=", batch,
                                    ", classes=", config.classes, ")"));
}

template <typename Real>
const Tensor<Real>* layer_mask(const std::vector<Tensor<Real>>* masks, std::size_t n) {
  if (!masks || n >= masks->size() || (*masks)[n].empty()) return nullptr;
  return &(*masks)[n];
}

template <typename Real>
Tensor<Real> masked(const Tensor<Real>& s, const Tensor<Real>* m) {
  if (!m) return s;
  s.require_same_shape(*m, "dropout mask");
  Tensor<Real> out(s.shape());
  for (std::size_t i = 0; i < s.numel(); ++i) out[i] = s[i] * (*m)[i];
  return out;
}

}  // namespace detail

/// One synchronous update of all layers. `indices_out`, when given, receives
/// the pool indices used by this transition (needed for trajectory replay);
/// `pre_out` receives the per-layer activation arguments (the nudging term is
/// added after the activation and is not part of them).
template <typename Real>
NetworkState<Real> step(const Tensor<Real>& x, const NetworkState<Real>& state,
                        const Parameters<Real>& params, const ArchitectureConfig& config,
                        const Nudge<Real>* nudge,
                        const std::vector<LayerGeometry>& geom,
                        const std::vector<Tensor<Real>>* masks = nullptr,
                        StepIndices* indices_out = nullptr,
                        std::vector<Tensor<Real>>* pre_out = nullptr) {
  const std::size_t L = geom.size();
  const std::size_t B = state.batch();
  if (state.layers.size() != L)
    throw std::invalid_argument(detail::cat("step: state has ", state.layers.size(),
                                            " layers, expected ", L));
  if (nudge && nudge->beta != Real(0)) detail::check_nudge(*nudge, config, B);
  const bool uni = config.mode == ConnectionMode::Unidirectional;

  // Masked views of the state (dropout); identical to the state when unused.
  std::vector<Tensor<Real>> ms(L);
  for (std::size_t n = 0; n < L; ++n)
    ms[n] = detail::masked(state.layers[n], detail::layer_mask(masks, n));

  // Bottom-up drives and forward pool indices, all read from time t.
  std::vector<Tensor<Real>> drive(L);
  StepIndices ind;
  ind.fwd.resize(config.num_conv());
  if (uni) ind.back.resize(config.num_conv());
  const Tensor<Real>* below = &x;
  for (std::size_t n = 0; n < L; ++n) {
    if (geom[n].conv) {
      auto pooled = maxpool(
          conv2d(params.layers[n].weight, *below, params.layers[n].bias, geom[n].padding),
          geom[n].pool);
      drive[n] = std::move(pooled.first);
      ind.fwd[n] = std::move(pooled.second);
      if (uni && n >= 1) {
        auto bp = maxpool(
            conv2d_nobias(params.layers[n].backward, *below, geom[n].padding),
            geom[n].pool);
        ind.back[n] = std::move(bp.second);
      }
    } else {
      drive[n] = matvec(params.layers[n].weight, flatten(*below), &params.layers[n].bias);
    }
    below = &ms[n];
  }

  NetworkState<Real> next;
  next.layers.resize(L);
  for (std::size_t n = 0; n < L; ++n) {
    Tensor<Real> pre = std::move(drive[n]);
    if (n + 1 < L) {
      // top-down coupling from layer n+1 (transposed weights; in
      // unidirectional mode the backward kernel and its own pool indices)
      const Tensor<Real>& w_up =
          uni ? params.layers[n + 1].backward : params.layers[n + 1].weight;
      if (geom[n + 1].conv) {
        const PoolIndices& pind = uni ? ind.back[n + 1] : ind.fwd[n + 1];
        Tensor<Real> scattered = unpool(ms[n + 1], pind, geom[n + 1].pool);
        pre += conv2d_transpose(w_up, scattered, geom[n + 1].padding, geom[n].post_h,
                                geom[n].post_w);
      } else {
        Tensor<Real> td = matvec_transpose(w_up, ms[n + 1]);
        if (geom[n].conv)
          pre += unflatten(td, Shape{geom[n].channels, geom[n].post_h, geom[n].post_w});
        else
          pre += td;
      }
    }
    const Tensor<Real>* m = detail::layer_mask(masks, n);
    if (m) {
      pre.require_same_shape(*m, "dropout mask");
      for (std::size_t i = 0; i < pre.numel(); ++i) pre[i] *= (*m)[i];
    }
    next.layers[n] = activation(pre, config.activation);
    if (pre_out) {
      if (pre_out->size() != L) pre_out->resize(L);
      (*pre_out)[n] = std::move(pre);
    }
  }

  // Nudging enters the top layer after the activation.
  if (nudge && nudge->beta != Real(0)) {
    const std::size_t top = L - 1;
    Tensor<Real> term;
    if (config.head == LossHead::SquaredError) {
      Tensor<Real> pred = flatten(state.layers[top]);
      term = nudge->y;
      term -= pred;
    } else {
      Tensor<Real> yhat = readout(detail::masked(state.layers[top],
                                                 detail::layer_mask(masks, top)),
                                  params.readout);
      Tensor<Real> err = nudge->y;
      err -= yhat;
      term = matvec_transpose(params.readout, err);
    }
    const Tensor<Real>* m = detail::layer_mask(masks, top);
    if (m) {
      Tensor<Real> mflat = flatten(*m);
      for (std::size_t i = 0; i < term.numel(); ++i) term[i] *= mflat[i];
    }
    Tensor<Real>& s_top = next.layers[top];
    if (geom[top].conv)
      term = unflatten(term, Shape{geom[top].channels, geom[top].post_h, geom[top].post_w});
    axpy(nudge->beta, term, s_top);
  }

  if (indices_out) *indices_out = std::move(ind);
  return next;
}

template <typename Real>
NetworkState<Real> step(const Tensor<Real>& x, const NetworkState<Real>& state,
                        const Parameters<Real>& params, const ArchitectureConfig& config,
                        const Nudge<Real>* nudge = nullptr,
                        const std::vector<Tensor<Real>>* masks = nullptr,
                        StepIndices* indices_out = nullptr) {
  return step(x, state, params, config, nudge, config.geometry(), masks, indices_out);
}

template <typename Real>
struct RelaxOptions {
  bool record = false;
  Real stop_residual = 0;  // early stop threshold; 0 disables it
  const std::vector<Tensor<Real>>* masks = nullptr;
};

/// Applies `step` repeatedly from `state0`. Residual is the max-abs change of
/// the last transition taken. Throws naming the step and layer if the state
/// leaves the finite range.
template <typename Real>
std::pair<RelaxReport<Real>, std::optional<Trajectory<Real>>> relax(
    const Tensor<Real>& x, const NetworkState<Real>& state0,
    const Parameters<Real>& params, const ArchitectureConfig& config,
    std::size_t steps, const Nudge<Real>* nudge = nullptr,
    const RelaxOptions<Real>& options = {}) {
  if (steps < 1) throw std::invalid_argument("relax: steps must be >= 1");
  const auto geom = config.geometry();
  std::optional<Trajectory<Real>> traj;
  if (options.record) {
    traj.emplace();
    traj->beta = nudge ? nudge->beta : Real(0);
    traj->states.reserve(steps + 1);
    traj->states.push_back(state0);
    traj->indices.reserve(steps);
  }
  NetworkState<Real> prev = state0;
  NetworkState<Real> cur = state0;
  Real res = 0;
  std::size_t taken = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    StepIndices ind;
    NetworkState<Real> next = step(x, cur, params, config, nudge, geom, options.masks,
                                   options.record ? &ind : nullptr);
    for (std::size_t n = 0; n < next.layers.size(); ++n)
      if (!next.layers[n].all_finite())
        throw std::runtime_error(detail::cat("relax: non-finite state at step ", t + 1,
                                             ", layer ", n));
    prev = std::move(cur);
    cur = std::move(next);
    ++taken;
    if (options.record) {
      traj->states.push_back(cur);
      traj->indices.push_back(std::move(ind));
    }
    res = residual(cur, prev);
    if (options.stop_residual > Real(0) && res < options.stop_residual) break;
  }
  RelaxReport<Real> report{std::move(cur), res, taken};
  return {std::move(report), std::move(traj)};
}

}  // namespace eqprop

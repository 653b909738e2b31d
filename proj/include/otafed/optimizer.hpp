#pragma once

// Fed-Sophia update pieces (gradient/curvature EMAs, clipping, the
// preconditioned clipped step) and the proximal gradient used by FedProx.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

#include "otafed/model.hpp"

namespace otafed {

struct SophiaConfig {
  double eta = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double gamma = 0.01;
  double epsilon = 1e-12;
  std::int64_t tau = 10;

  void validate() const {
    // eta == 0 is allowed here (a frozen model); experiment configs require > 0.
    if (!(eta >= 0.0) || !std::isfinite(eta)) throw std::invalid_argument("eta must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("beta2 must lie in [0, 1)");
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw std::invalid_argument("gamma must be > 0");
    if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw std::invalid_argument("epsilon must be > 0");
    if (tau < 1) throw std::invalid_argument("tau must be >= 1");
  }

  friend bool operator==(const SophiaConfig&, const SophiaConfig&) = default;
};

/// Per-client moving averages; both start at zero.
struct EmaState {
  ParamVector m;
  ParamVector h;
  std::int64_t last_h_round = -1;

  static EmaState zeros(std::size_t d) { return {ParamVector(d, 0.0), ParamVector(d, 0.0), -1}; }
};

namespace detail {
inline void check_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw std::invalid_argument(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " +
                                std::to_string(b) + ")");
}
}  // namespace detail

inline ParamVector ema_moment(std::span<const double> m_prev, std::span<const double> g_hat, double beta1) {
  detail::check_same_length(m_prev.size(), g_hat.size(), "ema_moment");
  ParamVector m(m_prev.size());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = beta1 * m_prev[i] + (1.0 - beta1) * g_hat[i];
  return m;
}

/// Curvature EMA. Refreshes only on rounds with k mod tau == 0; otherwise
/// the previous h is returned untouched.
inline ParamVector ema_hessian(const EmaState& state, std::span<const double> h_hat, double beta2, std::int64_t k,
                               std::int64_t tau) {
  if (tau < 1) throw std::invalid_argument("ema_hessian: tau must be >= 1");
  detail::check_same_length(state.h.size(), h_hat.size(), "ema_hessian");
  if (k % tau != 0) return state.h;
  ParamVector h(state.h.size());
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = beta2 * state.h[i] + (1.0 - beta2) * h_hat[i];
  return h;
}

inline ParamVector clip_elementwise(std::span<const double> z, double threshold) {
  if (!(threshold > 0.0)) throw std::invalid_argument("clip_elementwise: threshold must be > 0");
  ParamVector out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = std::max(std::min(z[i], threshold), -threshold);
  return out;
}

/// clip(m / max(gamma * h, epsilon), 1); every coordinate lands in [-1, 1].
inline ParamVector sophia_direction(std::span<const double> m_bar, std::span<const double> h_bar, double gamma,
                                    double epsilon) {
  detail::check_same_length(m_bar.size(), h_bar.size(), "sophia_direction");
  if (!(gamma > 0.0) || !(epsilon > 0.0)) throw std::invalid_argument("sophia_direction: gamma and epsilon must be > 0");
  ParamVector dir(m_bar.size());
  for (std::size_t i = 0; i < dir.size(); ++i) {
    const double z = m_bar[i] / std::max(gamma * h_bar[i], epsilon);
    dir[i] = std::max(std::min(z, 1.0), -1.0);
  }
  return dir;
}

inline ParamVector apply_step(std::span<const double> theta, std::span<const double> direction, double eta) {
  detail::check_same_length(theta.size(), direction.size(), "apply_step");
  ParamVector out(theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = theta[i] - eta * direction[i];
  return out;
}

/// g + mu (theta - theta_global).
inline ParamVector fedprox_grad(std::span<const double> g, std::span<const double> theta,
                                std::span<const double> theta_global, double mu) {
  detail::check_same_length(g.size(), theta.size(), "fedprox_grad");
  detail::check_same_length(theta.size(), theta_global.size(), "fedprox_grad");
  if (!(mu >= 0.0)) throw std::invalid_argument("fedprox_grad: mu must be >= 0");
  ParamVector out(g.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = g[i] + mu * (theta[i] - theta_global[i]);
  return out;
}

}  // namespace otafed

#pragma once

// Independent reference computations used by the unit and acceptance suites.
// Everything here runs in 64-bit and shares no code path with the library's
// scan, discretization or autodiff implementations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "ssmr/ssm.hpp"
#include "ssmr/tensor.hpp"

namespace oracle {

// Integrates h' = a h + b x from h(0) = h_start over [0, duration] with a
// fixed RK4 step (the last step is shortened to land on `duration`).
inline double integrate_linear_ode(double a, double b, double x, double h_start, double duration, double step) {
  double h = h_start;
  double t = 0.0;
  auto f = [&](double hv) { return a * hv + b * x; };
  while (t < duration) {
    const double dt = std::min(step, duration - t);
    const double k1 = f(h);
    const double k2 = f(h + 0.5 * dt * k1);
    const double k3 = f(h + 0.5 * dt * k2);
    const double k4 = f(h + dt * k3);
    h += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    t += dt;
  }
  return h;
}

struct ZohReference {
  double a_bar;
  double b_bar;
};

// Discrete transition over one hold interval, measured by integration:
// a_bar from the homogeneous response to h(0)=1, b_bar from the response to a
// unit input held constant from h(0)=0.
inline ZohReference integrate_zoh(double a, double b, double delta, double step = 1e-6) {
  return {integrate_linear_ode(a, 0.0, 0.0, 1.0, delta, step), integrate_linear_ode(a, b, 1.0, 0.0, delta, step)};
}

inline double rel_error(double got, double want) {
  const double denom = std::max(std::abs(want), 1e-30);
  return std::abs(got - want) / denom;
}

// max_i |a_i - b_i| / max(||a||_inf, ||b||_inf)
inline double max_rel_error(const std::vector<double>& a, const std::vector<double>& b) {
  double scale = 0.0, err = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    scale = std::max({scale, std::abs(a[i]), std::abs(b[i])});
    err = std::max(err, std::abs(a[i] - b[i]));
  }
  return scale > 0.0 ? err / scale : 0.0;
}

template <typename T>
std::vector<double> to_double(const ssmr::BasicTensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

// Central differences of a scalar function of a flat vector.
inline std::vector<double> central_differences(const std::function<double(const std::vector<double>&)>& f,
                                               const std::vector<double>& point, double h) {
  std::vector<double> g(point.size());
  for (std::size_t i = 0; i < point.size(); ++i) {
    auto p = point;
    auto m = point;
    p[i] += h;
    m[i] -= h;
    g[i] = (f(p) - f(m)) / (2.0 * h);
  }
  return g;
}

// Reference single-direction selective SSM over one sequence, written with
// plain loops. `frozen` names a stream whose computation reads the frozen
// tokens instead of the live ones, which is the forward function whose
// derivative a masked backward pass must reproduce.
//   A:     delta*a uses delta(frozen); the delta*b factor still uses live delta
//   B/C:   b_t / c_t from frozen tokens
//   Delta: delta from frozen tokens everywhere
//   Input: the state update reads frozen tokens
struct RefParams {
  std::int64_t len, dim, state;
  std::vector<double> a_log, b_proj, c_proj, delta_proj;
  double delta_bias;

  static RefParams from(const ssmr::ssm::SsmBlockParams& p, std::int64_t len) {
    return {len,
            p.model_dim(),
            p.state_dim(),
            to_double(p.a_log),
            to_double(p.b_proj),
            to_double(p.c_proj),
            to_double(p.delta_proj),
            static_cast<double>(p.delta_bias[0])};
  }
};

inline double softplus(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }

inline std::vector<double> reference_selective_scan(const RefParams& p, const std::vector<double>& live,
                                                    const std::vector<double>& frozen,
                                                    std::optional<ssmr::StreamTag> frozen_stream) {
  using ssmr::StreamTag;
  auto src = [&](StreamTag tag) -> const std::vector<double>& {
    return frozen_stream && *frozen_stream == tag ? frozen : live;
  };
  auto project = [&](const std::vector<double>& tok, const std::vector<double>& w, std::int64_t t, std::int64_t n,
                     std::int64_t cols) {
    double acc = 0.0;
    for (std::int64_t d = 0; d < p.dim; ++d) acc += tok[t * p.dim + d] * w[d * cols + n];
    return acc;
  };
  auto delta_of = [&](const std::vector<double>& tok, std::int64_t t) {
    return softplus(project(tok, p.delta_proj, t, 0, 1) + p.delta_bias);
  };
  const auto& delta_src = src(StreamTag::Delta);
  const auto& a_delta_src = frozen_stream && (*frozen_stream == StreamTag::A) ? frozen : delta_src;

  std::vector<double> h(static_cast<std::size_t>(p.dim * p.state), 0.0);
  std::vector<double> y(static_cast<std::size_t>(p.len * p.dim), 0.0);
  for (std::int64_t t = 0; t < p.len; ++t) {
    const double delta = delta_of(delta_src, t);
    const double delta_for_a = delta_of(a_delta_src, t);
    for (std::int64_t n = 0; n < p.state; ++n) {
      const double a = -std::exp(p.a_log[n]);
      const double z = delta_for_a * a;
      const double ratio = std::abs(z) < 1e-4 ? 1.0 + z / 2.0 : std::expm1(z) / z;
      const double a_bar = std::exp(z);
      const double b = project(src(StreamTag::B), p.b_proj, t, n, p.state);
      const double c = project(src(StreamTag::C), p.c_proj, t, n, p.state);
      const double b_bar = ratio * delta * b;
      for (std::int64_t d = 0; d < p.dim; ++d) {
        const double x = src(StreamTag::Input)[t * p.dim + d];
        double& hv = h[d * p.state + n];
        hv = a_bar * hv + b_bar * x;
        y[t * p.dim + d] += c * hv;
      }
    }
  }
  return y;
}

}  // namespace oracle

#pragma once

// Selective state-space building blocks.
//
// Continuous dynamics h' = A h + B x, y = C h with diagonal A = -exp(a_log),
// discretized per step by zero-order hold over a positive timestep delta:
//   a_bar = exp(delta * a)
//   b_bar = (exp(delta * a) - 1) / (delta * a) * delta * b
// and rolled out as h_t = a_bar_t * h_{t-1} + b_bar_t * x_t, y_t = <c_t, h_t>.
//
// Stream tags used for gradient masking:
//   A      the delta*a product feeding both a_bar and b_bar
//   B, C   the token projections producing b_t and c_t
//   Delta  the softplus timestep sequence
//   Input  the token sequence entering the state update

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "ssmr/ops.hpp"
#include "ssmr/random.hpp"
#include "ssmr/tensor.hpp"

namespace ssmr::ssm {

template <typename T>
struct BasicSsmBlockParams {
  TensorOf<T> a_log;       // [N]
  TensorOf<T> b_proj;      // [D x N]
  TensorOf<T> c_proj;      // [D x N]
  TensorOf<T> delta_proj;  // [D x 1]
  TensorOf<T> delta_bias;  // [1]
  TensorOf<T> d_skip;      // [D]

  std::int64_t model_dim() const { return b_proj.dim(0); }
  std::int64_t state_dim() const { return a_log.dim(0); }

  template <typename U>
  BasicSsmBlockParams<U> cast() const {
    return {a_log.template cast<U>(),      b_proj.template cast<U>(),     c_proj.template cast<U>(),
            delta_proj.template cast<U>(), delta_bias.template cast<U>(), d_skip.template cast<U>()};
  }
};

using SsmBlockParams = BasicSsmBlockParams<float>;

// Standard real initialization: a_log = log(1..N), projections uniform in
// +-1/sqrt(D), delta_bias such that softplus(delta_bias) is log-uniform in
// [1e-3, 0.1], d_skip = 1.
SsmBlockParams init_block_params(std::int64_t model_dim, std::int64_t state_dim, Rng& rng);

// Inverse of softplus for positive y.
double inverse_softplus(double y);

// ---------------------------------------------------------------------------
// Discretization and scans

template <typename T>
struct ZohResult {
  TensorOf<T> a_bar;
  TensorOf<T> b_bar;
};

// a [N] (negative), b_t [N], delta_t > 0. Uses the series form of the ratio
// (e^z - 1)/z when |delta_t * a| < 1e-4.
template <typename T>
ZohResult<T> discretize_zoh(const TensorOf<T>& a, const TensorOf<T>& b_t, T delta_t);

// Recurrent rollout over `segments` independent sequences stacked row-wise.
// a_bar, b_bar, c: [S*L x N]; x: [S*L x D] (or [L] for a single channel);
// h0: optional [D x N] initial state shared by all segments (zeros if absent).
// Returns y with the shape of x. Differentiable in every argument.
template <typename T>
TensorOf<T> scan_recurrent(const TensorOf<T>& a_bar, const TensorOf<T>& b_bar, const TensorOf<T>& c,
                           const TensorOf<T>& x, std::int64_t segments = 1,
                           const std::optional<TensorOf<T>>& h0 = std::nullopt);

// K = (c.b_bar, c.(a_bar b_bar), ..., c.(a_bar^{L-1} b_bar)).
Tensor64 conv_kernel(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, std::int64_t length);

// Time-invariant parameters only ([N] each); x [L]. Causal convolution of x
// with the kernel above. Rejects per-step (rank-2, L > 1) parameters.
Tensor scan_convolutional(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& x);

template <typename T>
struct SelectiveParams {
  TensorOf<T> b_seq;      // [L x N], tag B
  TensorOf<T> c_seq;      // [L x N], tag C
  TensorOf<T> delta_seq;  // [L], tag Delta
};

// tokens [L x D] -> input-dependent B, C and delta.
template <typename T>
SelectiveParams<T> selective_params(const TensorOf<T>& tokens, const BasicSsmBlockParams<T>& params);

// One selective SSM over stacked token sequences (no skip term):
// projections, per-step ZOH and the recurrent scan. tokens [S*L x D].
template <typename T>
TensorOf<T> selective_scan(const TensorOf<T>& tokens, const BasicSsmBlockParams<T>& params,
                           std::int64_t segments = 1);

// ---------------------------------------------------------------------------
// Scan orderings

enum class ScanKind { row_fwd, row_bwd, col_fwd, col_bwd, seq_fwd, seq_bwd };
enum class ScanMode { cross2d, bidir1d };

std::string_view to_string(ScanKind kind);

struct ScanPlan {
  ScanKind kind;
  // Sequence position t visits token permutation[t]; inverse[permutation[t]] == t.
  std::vector<std::int64_t> permutation;
  std::vector<std::int64_t> inverse;
};

std::vector<ScanPlan> plan_scans(std::int64_t height, std::int64_t width, ScanMode mode);

// Reorders the rows of x [S*L x D] within each of the S segments:
// out[s*L + t] = x[s*L + order[t]].
template <typename T>
TensorOf<T> permute_rows(const TensorOf<T>& x, const std::vector<std::int64_t>& order, std::int64_t segments);

// ---------------------------------------------------------------------------
// Multi-direction mixer (cross-scan 2D or bidirectional 1D)

template <typename T>
struct BasicMixerParams {
  TensorOf<T> norm_gamma;  // [D]
  TensorOf<T> norm_beta;   // [D]
  TensorOf<T> gate_proj;   // [D x D]
  std::vector<BasicSsmBlockParams<T>> directions;

  template <typename U>
  BasicMixerParams<U> cast() const {
    BasicMixerParams<U> out{norm_gamma.template cast<U>(), norm_beta.template cast<U>(),
                            gate_proj.template cast<U>(), {}};
    for (const auto& d : directions) out.directions.push_back(d.template cast<U>());
    return out;
  }
};

using MixerParams = BasicMixerParams<float>;

MixerParams init_mixer_params(std::int64_t model_dim, std::int64_t state_dim, ScanMode mode, Rng& rng);

// Per-direction scan outputs, each restored to token order. u [S*L x D] is
// the normalized input.
template <typename T>
std::vector<TensorOf<T>> cross_scan_directions(const TensorOf<T>& u, const BasicMixerParams<T>& params,
                                               const std::vector<ScanPlan>& plans, std::int64_t segments);

// x [S*H*W x D] -> [S*H*W x D]:
//   u = LayerNorm(x)
//   y = sum_k inverse_perm_k(scan_k(perm_k(u))) + (sum_k d_skip_k) * u
//   out = y * silu(u . gate_proj)
template <typename T>
TensorOf<T> selective_mixer(const TensorOf<T>& x, const BasicMixerParams<T>& params,
                            const std::vector<ScanPlan>& plans, std::int64_t segments);

// The 2D cross-scan block on a [H x W x D] feature map (or a stacked batch
// [S*H*W x D] when `segments` > 1).
template <typename T>
TensorOf<T> ss2d_block(const TensorOf<T>& feature_map, std::int64_t height, std::int64_t width,
                       const BasicMixerParams<T>& params, std::int64_t segments = 1);

}  // namespace ssmr::ssm

#include "ssmr/ssm.hpp"

#include <cmath>
#include <string>

namespace ssmr::ssm {

double inverse_softplus(double y) {
  if (!(y > 0.0)) throw ValidationError("inverse_softplus: argument must be positive");
  return y > 20.0 ? y : std::log(std::expm1(y));
}

namespace {

Tensor uniform_tensor(Rng& rng, Shape shape, double bound) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

SsmBlockParams init_block_params(std::int64_t model_dim, std::int64_t state_dim, Rng& rng) {
  if (model_dim <= 0 || state_dim <= 0) throw ValidationError("init_block_params: dims must be positive");
  std::vector<float> a_log(static_cast<std::size_t>(state_dim));
  for (std::int64_t n = 0; n < state_dim; ++n) a_log[n] = static_cast<float>(std::log(static_cast<double>(n + 1)));
  const double bound = 1.0 / std::sqrt(static_cast<double>(model_dim));
  const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(0.1)));
  return SsmBlockParams{
      Tensor({state_dim}, std::move(a_log)),
      uniform_tensor(rng, {model_dim, state_dim}, bound),
      uniform_tensor(rng, {model_dim, state_dim}, bound),
      uniform_tensor(rng, {model_dim, 1}, bound),
      Tensor({1}, {static_cast<float>(inverse_softplus(dt))}),
      Tensor::full({model_dim}, 1.f),
  };
}

// ---------------------------------------------------------------------------

template <typename T>
ZohResult<T> discretize_zoh(const TensorOf<T>& a, const TensorOf<T>& b_t, T delta_t) {
  if (!(delta_t > T(0))) throw ValidationError("discretize_zoh: delta must be positive, got " + std::to_string(delta_t));
  if (a.rank() != 1 || a.shape() != b_t.shape()) {
    throw ShapeError("discretize_zoh: a " + shape_to_string(a.shape()) + " and b " + shape_to_string(b_t.shape()) +
                     " must be matching vectors");
  }
  for (T v : a.data()) {
    if (!(v < T(0))) throw ValidationError("discretize_zoh: a must be strictly negative");
  }
  const auto da = scale(a, delta_t);
  return {exp(da), mul(scale(expm1_ratio(da), delta_t), b_t)};
}

template <typename T>
TensorOf<T> scan_recurrent(const TensorOf<T>& a_bar, const TensorOf<T>& b_bar, const TensorOf<T>& c,
                           const TensorOf<T>& x, std::int64_t segments, const std::optional<TensorOf<T>>& h0) {
  if (a_bar.rank() != 2 || b_bar.shape() != a_bar.shape() || c.shape() != a_bar.shape()) {
    throw ShapeError("scan_recurrent: a_bar " + shape_to_string(a_bar.shape()) + ", b_bar " +
                     shape_to_string(b_bar.shape()) + ", c " + shape_to_string(c.shape()) +
                     " must share one [L x N] shape");
  }
  const std::int64_t rows = a_bar.dim(0);
  const std::int64_t n_state = a_bar.dim(1);
  const bool vector_x = x.rank() == 1;
  const std::int64_t channels = vector_x ? 1 : x.dim(1);
  if ((x.rank() != 1 && x.rank() != 2) || x.dim(0) != rows) {
    throw ShapeError("scan_recurrent: x " + shape_to_string(x.shape()) + " does not match sequence length " +
                     std::to_string(rows));
  }
  if (segments <= 0 || rows % segments != 0) {
    throw ShapeError("scan_recurrent: " + std::to_string(rows) + " rows do not split into " +
                     std::to_string(segments) + " segments");
  }
  const std::int64_t len = rows / segments;
  const std::int64_t dn = channels * n_state;
  TensorOf<T> init = TensorOf<T>::zeros({channels, n_state});
  if (h0) {
    if (h0->numel() != dn) {
      throw ShapeError("scan_recurrent: h0 " + shape_to_string(h0->shape()) + " must hold D*N = " +
                       std::to_string(dn) + " values");
    }
    init = *h0;
  }

  const auto av = a_bar.data();
  const auto bv = b_bar.data();
  const auto cv = c.data();
  const auto xv = x.data();
  const auto h0v = init.data();
  std::vector<T> states(static_cast<std::size_t>(rows * dn));
  std::vector<T> y(static_cast<std::size_t>(rows * channels));
  for (std::int64_t s = 0; s < segments; ++s) {
    const T* prev = h0v.data();
    for (std::int64_t t = 0; t < len; ++t) {
      const std::int64_t r = s * len + t;
      T* h = states.data() + r * dn;
      const T* ar = av.data() + r * n_state;
      const T* br = bv.data() + r * n_state;
      const T* cr = cv.data() + r * n_state;
      for (std::int64_t d = 0; d < channels; ++d) {
        const T xd = xv[r * channels + d];
        T acc = 0;
        for (std::int64_t n = 0; n < n_state; ++n) {
          const T hv = ar[n] * prev[d * n_state + n] + br[n] * xd;
          h[d * n_state + n] = hv;
          acc += cr[n] * hv;
        }
        y[r * channels + d] = acc;
      }
      prev = h;
    }
  }

  TensorOf<T> out(x.shape(), std::move(y));
  const TensorOf<T>* h0_ptr = h0 ? &*h0 : &init;
  const bool tracked = a_bar.tracked() || b_bar.tracked() || c.tracked() || x.tracked() || h0_ptr->tracked();
  if (!tracked) return out;

  auto* tape = a_bar.tracked()   ? a_bar.tape()
               : b_bar.tracked() ? b_bar.tape()
               : c.tracked()     ? c.tape()
               : x.tracked()     ? x.tape()
                                 : h0_ptr->tape();
  auto sa = a_bar.detach();
  auto sb = b_bar.detach();
  auto sc = c.detach();
  auto sx = x.detach();
  auto sh0 = init.detach();
  return tape->record(
      out, {&a_bar, &b_bar, &c, &x, h0_ptr},
      [sa, sb, sc, sx, sh0, states = std::move(states), segments, len, channels, n_state, dn](
          std::span<const T> gy, auto& sink) {
        auto ga = sink[0];
        auto gb = sink[1];
        auto gc = sink[2];
        auto gx = sink[3];
        auto gh0 = sink[4];
        const auto av = sa.data();
        const auto bv = sb.data();
        const auto cv = sc.data();
        const auto xv = sx.data();
        const auto h0v = sh0.data();
        std::vector<T> carry(static_cast<std::size_t>(dn));
        for (std::int64_t s = 0; s < segments; ++s) {
          std::fill(carry.begin(), carry.end(), T{0});
          for (std::int64_t t = len - 1; t >= 0; --t) {
            const std::int64_t r = s * len + t;
            const T* h = states.data() + r * dn;
            const T* prev = t > 0 ? states.data() + (r - 1) * dn : h0v.data();
            const T* ar = av.data() + r * n_state;
            const T* br = bv.data() + r * n_state;
            const T* cr = cv.data() + r * n_state;
            for (std::int64_t d = 0; d < channels; ++d) {
              const T g_out = gy[r * channels + d];
              const T xd = xv[r * channels + d];
              T gx_acc = 0;
              for (std::int64_t n = 0; n < n_state; ++n) {
                const std::int64_t k = d * n_state + n;
                const T g = g_out * cr[n] + carry[k];
                if (!gc.empty()) gc[r * n_state + n] += g_out * h[k];
                if (!ga.empty()) ga[r * n_state + n] += g * prev[k];
                if (!gb.empty()) gb[r * n_state + n] += g * xd;
                gx_acc += g * br[n];
                carry[k] = g * ar[n];
              }
              if (!gx.empty()) gx[r * channels + d] += gx_acc;
            }
          }
          if (!gh0.empty())
            for (std::int64_t k = 0; k < dn; ++k) gh0[k] += carry[k];
        }
      });
}

Tensor64 conv_kernel(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, std::int64_t length) {
  if (a_bar.rank() != 1 || b_bar.shape() != a_bar.shape() || c.shape() != a_bar.shape()) {
    throw ValidationError("conv_kernel: parameters must be time-invariant [N] vectors; got a_bar " +
                          shape_to_string(a_bar.shape()));
  }
  if (length <= 0) throw ValidationError("conv_kernel: length must be positive");
  const auto n_state = a_bar.dim(0);
  std::vector<double> k(static_cast<std::size_t>(length), 0.0);
  std::vector<double> power(static_cast<std::size_t>(n_state));
  for (std::int64_t n = 0; n < n_state; ++n) power[n] = b_bar[n];
  for (std::int64_t j = 0; j < length; ++j) {
    double acc = 0.0;
    for (std::int64_t n = 0; n < n_state; ++n) {
      acc += static_cast<double>(c[n]) * power[n];
      power[n] *= a_bar[n];
    }
    k[j] = acc;
  }
  return Tensor64({length}, std::move(k));
}

Tensor scan_convolutional(const Tensor& a_bar, const Tensor& b_bar, const Tensor& c, const Tensor& x) {
  for (const Tensor* p : {&a_bar, &b_bar, &c}) {
    if (p->rank() != 1) {
      throw ValidationError("scan_convolutional: got per-step parameters of shape " + shape_to_string(p->shape()) +
                            "; the kernel form is undefined for selective (time-varying) parameters");
    }
  }
  if (x.rank() != 1) throw ShapeError("scan_convolutional: x must be [L], got " + shape_to_string(x.shape()));
  const auto len = x.dim(0);
  const auto kernel = conv_kernel(a_bar, b_bar, c, len);
  std::vector<float> y(static_cast<std::size_t>(len));
  for (std::int64_t t = 0; t < len; ++t) {
    double acc = 0.0;
    for (std::int64_t j = 0; j <= t; ++j) acc += kernel[j] * static_cast<double>(x[t - j]);
    y[t] = static_cast<float>(acc);
  }
  return Tensor({len}, std::move(y));
}

template <typename T>
SelectiveParams<T> selective_params(const TensorOf<T>& tokens, const BasicSsmBlockParams<T>& params) {
  if (tokens.rank() != 2 || tokens.dim(1) != params.model_dim()) {
    throw ShapeError("selective_params: tokens " + shape_to_string(tokens.shape()) + " vs projection " +
                     shape_to_string(params.b_proj.shape()));
  }
  const auto rows = tokens.dim(0);
  auto b_seq = tag_stream(matmul(tokens, params.b_proj), StreamTag::B);
  auto c_seq = tag_stream(matmul(tokens, params.c_proj), StreamTag::C);
  auto delta =
      tag_stream(reshape(softplus(add_bias(matmul(tokens, params.delta_proj), params.delta_bias)), {rows}),
                 StreamTag::Delta);
  return {b_seq, c_seq, delta};
}

template <typename T>
TensorOf<T> selective_scan(const TensorOf<T>& tokens, const BasicSsmBlockParams<T>& params, std::int64_t segments) {
  const auto sel = selective_params(tokens, params);
  const auto a = scale(exp(params.a_log), T(-1));
  const auto delta_a = tag_stream(outer(sel.delta_seq, a), StreamTag::A);
  const auto a_bar = exp(delta_a);
  const auto b_bar = mul(expm1_ratio(delta_a), mul_rows(sel.b_seq, sel.delta_seq));
  const auto state_input = tag_stream(scale(tokens, T(1)), StreamTag::Input);
  return scan_recurrent(a_bar, b_bar, sel.c_seq, state_input, segments);
}

// ---------------------------------------------------------------------------

std::string_view to_string(ScanKind kind) {
  switch (kind) {
    case ScanKind::row_fwd: return "row_fwd";
    case ScanKind::row_bwd: return "row_bwd";
    case ScanKind::col_fwd: return "col_fwd";
    case ScanKind::col_bwd: return "col_bwd";
    case ScanKind::seq_fwd: return "seq_fwd";
    case ScanKind::seq_bwd: return "seq_bwd";
  }
  return "?";
}

namespace {

ScanPlan make_plan(ScanKind kind, std::vector<std::int64_t> perm) {
  std::vector<std::int64_t> inv(perm.size());
  for (std::size_t t = 0; t < perm.size(); ++t) inv[static_cast<std::size_t>(perm[t])] = static_cast<std::int64_t>(t);
  return {kind, std::move(perm), std::move(inv)};
}

}  // namespace

std::vector<ScanPlan> plan_scans(std::int64_t height, std::int64_t width, ScanMode mode) {
  if (height < 1 || width < 1) throw ValidationError("plan_scans: grid must be at least 1x1");
  const std::int64_t len = height * width;
  std::vector<std::int64_t> rows(static_cast<std::size_t>(len));
  for (std::int64_t t = 0; t < len; ++t) rows[t] = t;
  std::vector<std::int64_t> rows_rev(rows.rbegin(), rows.rend());
  std::vector<ScanPlan> plans;
  if (mode == ScanMode::bidir1d) {
    plans.push_back(make_plan(ScanKind::seq_fwd, rows));
    plans.push_back(make_plan(ScanKind::seq_bwd, rows_rev));
    return plans;
  }
  std::vector<std::int64_t> cols(static_cast<std::size_t>(len));
  for (std::int64_t t = 0; t < len; ++t) cols[t] = (t % height) * width + t / height;
  std::vector<std::int64_t> cols_rev(cols.rbegin(), cols.rend());
  plans.push_back(make_plan(ScanKind::row_fwd, rows));
  plans.push_back(make_plan(ScanKind::row_bwd, rows_rev));
  plans.push_back(make_plan(ScanKind::col_fwd, cols));
  plans.push_back(make_plan(ScanKind::col_bwd, cols_rev));
  return plans;
}

template <typename T>
TensorOf<T> permute_rows(const TensorOf<T>& x, const std::vector<std::int64_t>& order, std::int64_t segments) {
  const auto len = static_cast<std::int64_t>(order.size());
  if (x.rank() != 2 || x.dim(0) != len * segments) {
    throw ShapeError("permute_rows: tensor " + shape_to_string(x.shape()) + " is not " + std::to_string(segments) +
                     " segments of " + std::to_string(len) + " rows");
  }
  const auto width = x.dim(1);
  std::vector<std::int64_t> index(static_cast<std::size_t>(x.numel()));
  for (std::int64_t s = 0; s < segments; ++s)
    for (std::int64_t t = 0; t < len; ++t)
      for (std::int64_t j = 0; j < width; ++j)
        index[(s * len + t) * width + j] = (s * len + order[t]) * width + j;
  return gather(x, index, x.shape());
}

MixerParams init_mixer_params(std::int64_t model_dim, std::int64_t state_dim, ScanMode mode, Rng& rng) {
  MixerParams p;
  p.norm_gamma = Tensor::full({model_dim}, 1.f);
  p.norm_beta = Tensor::zeros({model_dim});
  p.gate_proj = uniform_tensor(rng, {model_dim, model_dim}, 1.0 / std::sqrt(static_cast<double>(model_dim)));
  const int directions = mode == ScanMode::cross2d ? 4 : 2;
  for (int k = 0; k < directions; ++k) {
    auto d = init_block_params(model_dim, state_dim, rng);
    // The skip coefficients of all directions add up; keep their total at 1.
    d.d_skip = Tensor::full({model_dim}, 1.f / static_cast<float>(directions));
    p.directions.push_back(std::move(d));
  }
  return p;
}

template <typename T>
std::vector<TensorOf<T>> cross_scan_directions(const TensorOf<T>& u, const BasicMixerParams<T>& params,
                                               const std::vector<ScanPlan>& plans, std::int64_t segments) {
  if (plans.size() != params.directions.size()) {
    throw ValidationError("cross_scan_directions: " + std::to_string(plans.size()) + " scan plans but " +
                          std::to_string(params.directions.size()) + " direction parameter sets");
  }
  std::vector<TensorOf<T>> outs;
  outs.reserve(plans.size());
  for (std::size_t k = 0; k < plans.size(); ++k) {
    const auto seq = permute_rows(u, plans[k].permutation, segments);
    const auto y = selective_scan(seq, params.directions[k], segments);
    outs.push_back(permute_rows(y, plans[k].inverse, segments));
  }
  return outs;
}

template <typename T>
TensorOf<T> selective_mixer(const TensorOf<T>& x, const BasicMixerParams<T>& params,
                            const std::vector<ScanPlan>& plans, std::int64_t segments) {
  const auto u = layer_norm(x, params.norm_gamma, params.norm_beta);
  const auto gate = silu(matmul(u, params.gate_proj));
  const auto dirs = cross_scan_directions(u, params, plans, segments);
  TensorOf<T> merged = dirs.front();
  TensorOf<T> skip = params.directions.front().d_skip;
  for (std::size_t k = 1; k < dirs.size(); ++k) {
    merged = add(merged, dirs[k]);
    skip = add(skip, params.directions[k].d_skip);
  }
  const auto y = add(merged, mul_bias(u, skip));
  return mul(y, gate);
}

template <typename T>
TensorOf<T> ss2d_block(const TensorOf<T>& feature_map, std::int64_t height, std::int64_t width,
                       const BasicMixerParams<T>& params, std::int64_t segments) {
  TensorOf<T> x = feature_map;
  if (feature_map.rank() == 3) {
    if (segments != 1 || feature_map.dim(0) != height || feature_map.dim(1) != width) {
      throw ShapeError("ss2d_block: feature map " + shape_to_string(feature_map.shape()) + " is not " +
                       std::to_string(height) + "x" + std::to_string(width) + "xD");
    }
    x = reshape(feature_map, {height * width, feature_map.dim(2)});
  }
  const auto plans = plan_scans(height, width, ScanMode::cross2d);
  auto out = selective_mixer(x, params, plans, segments);
  if (feature_map.rank() == 3) out = reshape(out, feature_map.shape());
  return out;
}

#define SSMR_INSTANTIATE_SSM(T)                                                                               \
  template ZohResult<T> discretize_zoh(const TensorOf<T>&, const TensorOf<T>&, T);                            \
  template TensorOf<T> scan_recurrent(const TensorOf<T>&, const TensorOf<T>&, const TensorOf<T>&,             \
                                      const TensorOf<T>&, std::int64_t, const std::optional<TensorOf<T>>&);   \
  template SelectiveParams<T> selective_params(const TensorOf<T>&, const BasicSsmBlockParams<T>&);            \
  template TensorOf<T> selective_scan(const TensorOf<T>&, const BasicSsmBlockParams<T>&, std::int64_t);       \
  template TensorOf<T> permute_rows(const TensorOf<T>&, const std::vector<std::int64_t>&, std::int64_t);      \
  template std::vector<TensorOf<T>> cross_scan_directions(const TensorOf<T>&, const BasicMixerParams<T>&,     \
                                                          const std::vector<ScanPlan>&, std::int64_t);        \
  template TensorOf<T> selective_mixer(const TensorOf<T>&, const BasicMixerParams<T>&,                        \
                                       const std::vector<ScanPlan>&, std::int64_t);                           \
  template TensorOf<T> ss2d_block(const TensorOf<T>&, std::int64_t, std::int64_t, const BasicMixerParams<T>&, \
                                  std::int64_t);

SSMR_INSTANTIATE_SSM(float)
SSMR_INSTANTIATE_SSM(double)

#undef SSMR_INSTANTIATE_SSM

}  // namespace ssmr::ssm

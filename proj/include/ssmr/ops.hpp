#pragma once

// Differentiable tensor ops. Every op computes its forward value eagerly and,
// when any input is tracked, records a backward closure on that input's tape.
// No implicit broadcasting: the few broadcast patterns the models need have
// their own named ops (add_bias, mul_bias, mul_rows, outer).

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "ssmr/tensor.hpp"

namespace ssmr {

enum class OpKind {
  add,
  sub,
  mul,
  matmul,
  exp,
  log,
  softplus,
  sigmoid,
  silu,
  mean,
  sum,
  reshape,
  transpose2d,
  slice,
  concat,
  softmax,
  cross_entropy,
};

std::string_view to_string(OpKind kind);

enum class Reduction { mean, sum };

template <typename T>
using TensorOf = BasicTensor<T>;

// Elementwise, identical shapes.
template <typename T> TensorOf<T> add(const TensorOf<T>& a, const TensorOf<T>& b);
template <typename T> TensorOf<T> sub(const TensorOf<T>& a, const TensorOf<T>& b);
template <typename T> TensorOf<T> mul(const TensorOf<T>& a, const TensorOf<T>& b);
template <typename T> TensorOf<T> scale(const TensorOf<T>& a, T factor);
template <typename T> TensorOf<T> exp(const TensorOf<T>& a);
template <typename T> TensorOf<T> log(const TensorOf<T>& a);
// log(1 + e^x); returns x directly above 20.
template <typename T> TensorOf<T> softplus(const TensorOf<T>& a);
template <typename T> TensorOf<T> sigmoid(const TensorOf<T>& a);
template <typename T> TensorOf<T> silu(const TensorOf<T>& a);
// (e^z - 1) / z, with the series 1 + z/2 for |z| < 1e-4.
template <typename T> TensorOf<T> expm1_ratio(const TensorOf<T>& a);

// [M x K] . [K x N]
template <typename T> TensorOf<T> matmul(const TensorOf<T>& a, const TensorOf<T>& b);
// [G x M x K] . [G x K x N]
template <typename T> TensorOf<T> bmm(const TensorOf<T>& a, const TensorOf<T>& b);
// [M] (x) [N] -> [M x N]
template <typename T> TensorOf<T> outer(const TensorOf<T>& a, const TensorOf<T>& b);

// Full reductions to a scalar.
template <typename T> TensorOf<T> sum(const TensorOf<T>& a);
template <typename T> TensorOf<T> mean(const TensorOf<T>& a);

template <typename T> TensorOf<T> reshape(const TensorOf<T>& a, Shape shape);
// Swaps the last two axes of a rank-2 or rank-3 tensor.
template <typename T> TensorOf<T> transpose2d(const TensorOf<T>& a);
// Half-open [begin, end) along `axis`.
template <typename T>
TensorOf<T> slice(const TensorOf<T>& a, std::size_t axis, std::int64_t begin, std::int64_t end);
template <typename T>
TensorOf<T> concat(std::span<const TensorOf<T>> parts, std::size_t axis);

// Along the last axis.
template <typename T> TensorOf<T> softmax(const TensorOf<T>& a);
// logits [B x K], labels in [0, K).
template <typename T>
TensorOf<T> cross_entropy(const TensorOf<T>& logits, std::span<const int> labels,
                          Reduction reduction = Reduction::mean);

// x [M x K] + bias [K] broadcast over rows.
template <typename T> TensorOf<T> add_bias(const TensorOf<T>& x, const TensorOf<T>& bias);
// x [M x K] * v [K] broadcast over rows.
template <typename T> TensorOf<T> mul_bias(const TensorOf<T>& x, const TensorOf<T>& v);
// x [M x K] * s [M] broadcast over columns.
template <typename T> TensorOf<T> mul_rows(const TensorOf<T>& x, const TensorOf<T>& s);
// Row-wise normalization of x [M x K] followed by gamma/beta [K].
template <typename T>
TensorOf<T> layer_norm(const TensorOf<T>& x, const TensorOf<T>& gamma, const TensorOf<T>& beta,
                       T eps = T(1e-5));
// out[i] = a[index[i]] (flat indices); backward scatter-adds.
template <typename T>
TensorOf<T> gather(const TensorOf<T>& a, std::span<const std::int64_t> index, Shape out_shape);
// x [S*R x K] -> [S x K], mean over each block of R consecutive rows.
template <typename T> TensorOf<T> segment_mean(const TensorOf<T>& x, std::int64_t segments);

// Generic dispatcher over the core op set. Unary kinds take one input,
// binary kinds two. `reshape` takes a second tensor whose values are the
// target dims; `slice` takes a 3-value tensor (axis, begin, end); `concat`
// joins all inputs along axis 0; `cross_entropy` takes logits (rank 1 or 2)
// and a tensor of integer labels and averages over rows.
template <typename T>
TensorOf<T> apply(OpKind kind, std::span<const TensorOf<T>> inputs);

}  // namespace ssmr

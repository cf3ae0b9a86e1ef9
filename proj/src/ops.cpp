#include "ssmr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace ssmr {

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::matmul: return "matmul";
    case OpKind::exp: return "exp";
    case OpKind::log: return "log";
    case OpKind::softplus: return "softplus";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::silu: return "silu";
    case OpKind::mean: return "mean";
    case OpKind::sum: return "sum";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose2d: return "transpose2d";
    case OpKind::slice: return "slice";
    case OpKind::concat: return "concat";
    case OpKind::softmax: return "softmax";
    case OpKind::cross_entropy: return "cross_entropy";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                   shape_to_string(b));
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, std::string_view want) {
  throw ShapeError(std::string(op) + ": shape " + shape_to_string(a) + " is not " + std::string(want));
}

template <typename T>
TensorOf<T> finish(TensorOf<T> out, std::initializer_list<const TensorOf<T>*> inputs,
                   typename BasicTape<T>::BackwardFn backward) {
  for (const auto* in : inputs) {
    if (in->tracked()) return in->tape()->record(out, inputs, std::move(backward));
  }
  return out;
}

template <typename T>
bool any_tracked(std::initializer_list<const TensorOf<T>*> inputs) {
  return std::any_of(inputs.begin(), inputs.end(), [](const auto* t) { return t->tracked(); });
}

template <typename T, typename Fwd, typename Deriv>
TensorOf<T> unary(const TensorOf<T>& a, Fwd fwd, Deriv deriv) {
  const auto x = a.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  TensorOf<T> out(a.shape(), std::move(y));
  if (!a.tracked()) return out;
  auto saved_x = a.detach();
  auto saved_y = out.detach();
  return finish<T>(out, {&a}, [saved_x, saved_y, deriv](std::span<const T> g, auto& sink) {
    auto ga = sink[0];
    if (ga.empty()) return;
    const auto xv = saved_x.data();
    const auto yv = saved_y.data();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

template <typename T>
T stable_softplus(T x) {
  if (x > T(20)) return x;
  return std::log1p(std::exp(x));
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
TensorOf<T> add(const TensorOf<T>& a, const TensorOf<T>& b) {
  if (a.shape() != b.shape()) shape_fail("add", a.shape(), b.shape());
  const auto x = a.data();
  const auto z = b.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + z[i];
  return finish<T>(TensorOf<T>(a.shape(), std::move(y)), {&a, &b}, [](std::span<const T> g, auto& sink) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto gk = sink[k];
      for (std::size_t i = 0; i < gk.size(); ++i) gk[i] += g[i];
    }
  });
}

template <typename T>
TensorOf<T> sub(const TensorOf<T>& a, const TensorOf<T>& b) {
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  const auto x = a.data();
  const auto z = b.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] - z[i];
  return finish<T>(TensorOf<T>(a.shape(), std::move(y)), {&a, &b}, [](std::span<const T> g, auto& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    auto gb = sink[1];
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
  });
}

template <typename T>
TensorOf<T> mul(const TensorOf<T>& a, const TensorOf<T>& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  const auto x = a.data();
  const auto z = b.data();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] * z[i];
  TensorOf<T> out(a.shape(), std::move(y));
  if (!any_tracked<T>({&a, &b})) return out;
  auto sa = a.detach();
  auto sb = b.detach();
  return finish<T>(out, {&a, &b}, [sa, sb](std::span<const T> g, auto& sink) {
    auto ga = sink[0];
    const auto bv = sb.data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    auto gb = sink[1];
    const auto av = sa.data();
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
  });
}

template <typename T>
TensorOf<T> scale(const TensorOf<T>& a, T factor) {
  return unary<T>(a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
TensorOf<T> exp(const TensorOf<T>& a) {
  return unary<T>(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
TensorOf<T> log(const TensorOf<T>& a) {
  for (T v : a.data()) {
    if (!(v > T(0))) throw NumericError("log: non-positive input " + std::to_string(v));
  }
  return unary<T>(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
TensorOf<T> softplus(const TensorOf<T>& a) {
  return unary<T>(a, [](T x) { return stable_softplus(x); }, [](T x, T) { return sigmoid_scalar(x); });
}

template <typename T>
TensorOf<T> sigmoid(const TensorOf<T>& a) {
  return unary<T>(a, [](T x) { return sigmoid_scalar(x); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
TensorOf<T> silu(const TensorOf<T>& a) {
  return unary<T>(
      a, [](T x) { return x * sigmoid_scalar(x); },
      [](T x, T) {
        const T s = sigmoid_scalar(x);
        return s * (T(1) + x * (T(1) - s));
      });
}

template <typename T>
TensorOf<T> expm1_ratio(const TensorOf<T>& a) {
  return unary<T>(
      a,
      [](T z) {
        if (std::abs(z) < T(1e-4)) return T(1) + z / T(2);
        return std::expm1(z) / z;
      },
      [](T z, T) {
        // d/dz (e^z - 1)/z = (e^z - (e^z - 1)/z) / z; the difference cancels
        // badly in float near the branch point, so evaluate it in double.
        const double zd = z;
        if (std::abs(zd) < 1e-4) return static_cast<T>(0.5 + zd / 3.0);
        return static_cast<T>((std::exp(zd) - std::expm1(zd) / zd) / zd);
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

namespace {

// c[M x N] += a[M x K] . b[K x N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// ga[M x K] += g[M x N] . b[K x N]^T
// b is transposed once so the inner loop runs over contiguous memory; each
// output still accumulates over j in ascending order.
template <typename T>
void gemm_nt(const T* g, const T* b, T* ga, std::int64_t m, std::int64_t k, std::int64_t n) {
  std::vector<T> bt(static_cast<std::size_t>(k * n));
  for (std::int64_t p = 0; p < k; ++p)
    for (std::int64_t j = 0; j < n; ++j) bt[static_cast<std::size_t>(j * k + p)] = b[p * n + j];
  std::vector<T> acc(static_cast<std::size_t>(k));
  for (std::int64_t i = 0; i < m; ++i) {
    const T* grow = g + i * n;
    std::fill(acc.begin(), acc.end(), T{0});
    for (std::int64_t j = 0; j < n; ++j) {
      const T gv = grow[j];
      const T* brow = bt.data() + j * k;
      for (std::int64_t p = 0; p < k; ++p) acc[static_cast<std::size_t>(p)] += gv * brow[p];
    }
    T* out = ga + i * k;
    for (std::int64_t p = 0; p < k; ++p) out[p] += acc[static_cast<std::size_t>(p)];
  }
}

// gb[K x N] += a[M x K]^T . g[M x N]
template <typename T>
void gemm_tn(const T* a, const T* g, T* gb, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* out = gb + p * n;
      for (std::int64_t j = 0; j < n; ++j) out[j] += av * grow[j];
    }
  }
}

}  // namespace

template <typename T>
TensorOf<T> matmul(const TensorOf<T>& a, const TensorOf<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_fail("matmul", a.shape(), b.shape());
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> y(static_cast<std::size_t>(m * n), T{0});
  gemm_nn(a.data().data(), b.data().data(), y.data(), m, k, n);
  TensorOf<T> out({m, n}, std::move(y));
  if (!any_tracked<T>({&a, &b})) return out;
  auto sa = a.detach();
  auto sb = b.detach();
  return finish<T>(out, {&a, &b}, [sa, sb, m, k, n](std::span<const T> g, auto& sink) {
    if (auto ga = sink[0]; !ga.empty()) gemm_nt(g.data(), sb.data().data(), ga.data(), m, k, n);
    if (auto gb = sink[1]; !gb.empty()) gemm_tn(sa.data().data(), g.data(), gb.data(), m, k, n);
  });
}

template <typename T>
TensorOf<T> bmm(const TensorOf<T>& a, const TensorOf<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    shape_fail("bmm", a.shape(), b.shape());
  }
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> y(static_cast<std::size_t>(batch * m * n), T{0});
  for (std::int64_t s = 0; s < batch; ++s) {
    gemm_nn(a.data().data() + s * m * k, b.data().data() + s * k * n, y.data() + s * m * n, m, k, n);
  }
  TensorOf<T> out({batch, m, n}, std::move(y));
  if (!any_tracked<T>({&a, &b})) return out;
  auto sa = a.detach();
  auto sb = b.detach();
  return finish<T>(out, {&a, &b}, [sa, sb, batch, m, k, n](std::span<const T> g, auto& sink) {
    auto ga = sink[0];
    auto gb = sink[1];
    for (std::int64_t s = 0; s < batch; ++s) {
      const T* gs = g.data() + s * m * n;
      if (!ga.empty()) gemm_nt(gs, sb.data().data() + s * k * n, ga.data() + s * m * k, m, k, n);
      if (!gb.empty()) gemm_tn(sa.data().data() + s * m * k, gs, gb.data() + s * k * n, m, k, n);
    }
  });
}

template <typename T>
TensorOf<T> outer(const TensorOf<T>& a, const TensorOf<T>& b) {
  if (a.rank() != 1 || b.rank() != 1) shape_fail("outer", a.shape(), b.shape());
  const auto m = a.dim(0), n = b.dim(0);
  const auto x = a.data();
  const auto z = b.data();
  std::vector<T> y(static_cast<std::size_t>(m * n));
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) y[i * n + j] = x[i] * z[j];
  TensorOf<T> out({m, n}, std::move(y));
  if (!any_tracked<T>({&a, &b})) return out;
  auto sa = a.detach();
  auto sb = b.detach();
  return finish<T>(out, {&a, &b}, [sa, sb, m, n](std::span<const T> g, auto& sink) {
    const auto x = sa.data();
    const auto z = sb.data();
    if (auto ga = sink[0]; !ga.empty()) {
      for (std::int64_t i = 0; i < m; ++i) {
        T acc = 0;
        for (std::int64_t j = 0; j < n; ++j) acc += g[i * n + j] * z[j];
        ga[i] += acc;
      }
    }
    if (auto gb = sink[1]; !gb.empty()) {
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) gb[j] += g[i * n + j] * x[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions and layout

template <typename T>
TensorOf<T> sum(const TensorOf<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return finish<T>(TensorOf<T>::scalar(acc), {&a}, [](std::span<const T> g, auto& sink) {
    auto ga = sink[0];
    for (auto& v : ga) v += g[0];
  });
}

template <typename T>
TensorOf<T> mean(const TensorOf<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  const T n = static_cast<T>(a.numel());
  return finish<T>(TensorOf<T>::scalar(acc / n), {&a}, [n](std::span<const T> g, auto& sink) {
    auto ga = sink[0];
    for (auto& v : ga) v += g[0] / n;
  });
}

template <typename T>
TensorOf<T> reshape(const TensorOf<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
  return finish<T>(TensorOf<T>(std::move(shape), a.to_vector()), {&a}, [](std::span<const T> g, auto& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

template <typename T>
TensorOf<T> transpose2d(const TensorOf<T>& a) {
  if (a.rank() != 2 && a.rank() != 3) shape_fail("transpose2d", a.shape(), "rank 2 or 3");
  const std::int64_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::int64_t r = a.dim(a.rank() - 2), c = a.dim(a.rank() - 1);
  const auto x = a.data();
  std::vector<T> y(x.size());
  for (std::int64_t s = 0; s < batch; ++s)
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j) y[s * r * c + j * r + i] = x[s * r * c + i * c + j];
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  return finish<T>(TensorOf<T>(std::move(shape), std::move(y)), {&a},
                   [batch, r, c](std::span<const T> g, auto& sink) {
                     auto ga = sink[0];
                     for (std::int64_t s = 0; s < batch; ++s)
                       for (std::int64_t i = 0; i < r; ++i)
                         for (std::int64_t j = 0; j < c; ++j)
                           ga[s * r * c + i * c + j] += g[s * r * c + j * r + i];
                   });
}

namespace {

struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t len = 1;
  std::int64_t inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

template <typename T>
TensorOf<T> slice(const TensorOf<T>& a, std::size_t axis, std::int64_t begin, std::int64_t end) {
  if (axis >= a.rank() || begin < 0 || end > a.dim(axis) || begin >= end) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " invalid for shape " + shape_to_string(a.shape()));
  }
  const auto sp = split_axis(a.shape(), axis);
  const auto width = end - begin;
  const auto x = a.data();
  std::vector<T> y(static_cast<std::size_t>(sp.outer * width * sp.inner));
  for (std::int64_t o = 0; o < sp.outer; ++o)
    std::copy_n(x.data() + (o * sp.len + begin) * sp.inner, width * sp.inner, y.data() + o * width * sp.inner);
  Shape shape = a.shape();
  shape[axis] = width;
  return finish<T>(TensorOf<T>(std::move(shape), std::move(y)), {&a},
                   [sp, begin, width](std::span<const T> g, auto& sink) {
                     auto ga = sink[0];
                     for (std::int64_t o = 0; o < sp.outer; ++o)
                       for (std::int64_t i = 0; i < width * sp.inner; ++i)
                         ga[(o * sp.len + begin) * sp.inner + i] += g[o * width * sp.inner + i];
                   });
}

template <typename T>
TensorOf<T> concat(std::span<const TensorOf<T>> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) shape_fail("concat", first, "long enough for the concat axis");
  std::int64_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != first.size()) shape_fail("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) shape_fail("concat", first, s);
    total += s[axis];
  }
  Shape shape = first;
  shape[axis] = total;
  const auto out_split = split_axis(shape, axis);
  std::vector<T> y(static_cast<std::size_t>(shape_numel(shape)));
  std::vector<std::int64_t> offsets;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const auto sp = split_axis(p.shape(), axis);
    const auto x = p.data();
    for (std::int64_t o = 0; o < sp.outer; ++o)
      std::copy_n(x.data() + o * sp.len * sp.inner, sp.len * sp.inner,
                  y.data() + (o * out_split.len + off) * out_split.inner);
    off += sp.len;
  }
  TensorOf<T> out(std::move(shape), std::move(y));
  std::vector<const TensorOf<T>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  if (std::none_of(ptrs.begin(), ptrs.end(), [](const auto* t) { return t->tracked(); })) return out;
  std::vector<AxisSplit> splits;
  for (const auto& p : parts) splits.push_back(split_axis(p.shape(), axis));
  auto* tape = (*std::find_if(ptrs.begin(), ptrs.end(), [](const auto* t) { return t->tracked(); }))->tape();
  return tape->record(out, std::span<const TensorOf<T>* const>(ptrs.data(), ptrs.size()),
                      [splits, offsets, out_split](std::span<const T> g, auto& sink) {
                        for (std::size_t k = 0; k < splits.size(); ++k) {
                          auto gk = sink[k];
                          if (gk.empty()) continue;
                          const auto& sp = splits[k];
                          for (std::int64_t o = 0; o < sp.outer; ++o)
                            for (std::int64_t i = 0; i < sp.len * sp.inner; ++i)
                              gk[o * sp.len * sp.inner + i] +=
                                  g[(o * out_split.len + offsets[k]) * out_split.inner + i];
                        }
                      });
}

// ---------------------------------------------------------------------------
// Softmax / loss

template <typename T>
TensorOf<T> softmax(const TensorOf<T>& a) {
  if (a.rank() == 0) shape_fail("softmax", a.shape(), "rank >= 1");
  const std::int64_t k = a.dim(a.rank() - 1);
  const std::int64_t rows = a.numel() / k;
  const auto x = a.data();
  std::vector<T> y(x.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * k;
    T* yr = y.data() + r * k;
    const T mx = *std::max_element(xr, xr + k);
    T z = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (std::int64_t j = 0; j < k; ++j) yr[j] /= z;
  }
  TensorOf<T> out(a.shape(), std::move(y));
  if (!a.tracked()) return out;
  auto sy = out.detach();
  return finish<T>(out, {&a}, [sy, rows, k](std::span<const T> g, auto& sink) {
    auto ga = sink[0];
    const auto yv = sy.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::int64_t j = 0; j < k; ++j) dot += g[r * k + j] * yv[r * k + j];
      for (std::int64_t j = 0; j < k; ++j) ga[r * k + j] += yv[r * k + j] * (g[r * k + j] - dot);
    }
  });
}

template <typename T>
TensorOf<T> cross_entropy(const TensorOf<T>& logits, std::span<const int> labels, Reduction reduction) {
  if (logits.rank() != 2) shape_fail("cross_entropy", logits.shape(), "rank 2 [batch x classes]");
  const auto rows = logits.dim(0), k = logits.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_to_string(logits.shape()));
  }
  const auto x = logits.data();
  std::vector<T> probs(x.size());
  T total = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const int label = labels[static_cast<std::size_t>(r)];
    if (label < 0 || label >= k) throw ValidationError("cross_entropy: label " + std::to_string(label) + " out of range");
    const T* xr = x.data() + r * k;
    const T mx = *std::max_element(xr, xr + k);
    T z = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      probs[r * k + j] = std::exp(xr[j] - mx);
      z += probs[r * k + j];
    }
    for (std::int64_t j = 0; j < k; ++j) probs[r * k + j] /= z;
    total += (mx + std::log(z)) - xr[label];
  }
  const T norm = reduction == Reduction::mean ? T(1) / static_cast<T>(rows) : T(1);
  TensorOf<T> out = TensorOf<T>::scalar(total * norm);
  if (!logits.tracked()) return out;
  std::vector<int> saved_labels(labels.begin(), labels.end());
  return finish<T>(out, {&logits},
                   [probs = std::move(probs), saved_labels, norm, k](std::span<const T> g, auto& sink) {
                     auto ga = sink[0];
                     const T s = g[0] * norm;
                     for (std::size_t r = 0; r < saved_labels.size(); ++r) {
                       for (std::int64_t j = 0; j < k; ++j) ga[r * k + j] += s * probs[r * k + j];
                       ga[r * k + saved_labels[r]] -= s;
                     }
                   });
}

// ---------------------------------------------------------------------------
// Broadcast helpers and fused layers

template <typename T>
TensorOf<T> add_bias(const TensorOf<T>& x, const TensorOf<T>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) shape_fail("add_bias", x.shape(), bias.shape());
  const auto m = x.dim(0), k = x.dim(1);
  const auto xv = x.data();
  const auto bv = bias.data();
  std::vector<T> y(xv.size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < k; ++j) y[i * k + j] = xv[i * k + j] + bv[j];
  return finish<T>(TensorOf<T>(x.shape(), std::move(y)), {&x, &bias}, [m, k](std::span<const T> g, auto& sink) {
    if (auto gx = sink[0]; !gx.empty())
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
    if (auto gb = sink[1]; !gb.empty())
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
  });
}

template <typename T>
TensorOf<T> mul_bias(const TensorOf<T>& x, const TensorOf<T>& v) {
  if (x.rank() != 2 || v.rank() != 1 || v.dim(0) != x.dim(1)) shape_fail("mul_bias", x.shape(), v.shape());
  const auto m = x.dim(0), k = x.dim(1);
  const auto xv = x.data();
  const auto vv = v.data();
  std::vector<T> y(xv.size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < k; ++j) y[i * k + j] = xv[i * k + j] * vv[j];
  TensorOf<T> out(x.shape(), std::move(y));
  if (!any_tracked<T>({&x, &v})) return out;
  auto sx = x.detach();
  auto sv = v.detach();
  return finish<T>(out, {&x, &v}, [sx, sv, m, k](std::span<const T> g, auto& sink) {
    const auto xv = sx.data();
    const auto vv = sv.data();
    if (auto gx = sink[0]; !gx.empty())
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < k; ++j) gx[i * k + j] += g[i * k + j] * vv[j];
    if (auto gv = sink[1]; !gv.empty())
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < k; ++j) gv[j] += g[i * k + j] * xv[i * k + j];
  });
}

template <typename T>
TensorOf<T> mul_rows(const TensorOf<T>& x, const TensorOf<T>& s) {
  if (x.rank() != 2 || s.rank() != 1 || s.dim(0) != x.dim(0)) shape_fail("mul_rows", x.shape(), s.shape());
  const auto m = x.dim(0), k = x.dim(1);
  const auto xv = x.data();
  const auto sv = s.data();
  std::vector<T> y(xv.size());
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < k; ++j) y[i * k + j] = xv[i * k + j] * sv[i];
  TensorOf<T> out(x.shape(), std::move(y));
  if (!any_tracked<T>({&x, &s})) return out;
  auto sx = x.detach();
  auto ss = s.detach();
  return finish<T>(out, {&x, &s}, [sx, ss, m, k](std::span<const T> g, auto& sink) {
    const auto xv = sx.data();
    const auto sv = ss.data();
    if (auto gx = sink[0]; !gx.empty())
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < k; ++j) gx[i * k + j] += g[i * k + j] * sv[i];
    if (auto gs = sink[1]; !gs.empty())
      for (std::int64_t i = 0; i < m; ++i) {
        T acc = 0;
        for (std::int64_t j = 0; j < k; ++j) acc += g[i * k + j] * xv[i * k + j];
        gs[i] += acc;
      }
  });
}

template <typename T>
TensorOf<T> layer_norm(const TensorOf<T>& x, const TensorOf<T>& gamma, const TensorOf<T>& beta, T eps) {
  if (x.rank() != 2 || gamma.rank() != 1 || gamma.dim(0) != x.dim(1)) shape_fail("layer_norm", x.shape(), gamma.shape());
  if (beta.shape() != gamma.shape()) shape_fail("layer_norm", gamma.shape(), beta.shape());
  const auto m = x.dim(0), k = x.dim(1);
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();
  // Statistics and the backward pass run in double: for short rows the input
  // gradient is a near-total cancellation of O(1) terms.
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(static_cast<std::size_t>(m));
  std::vector<T> y(xv.size());
  for (std::int64_t i = 0; i < m; ++i) {
    const T* row = xv.data() + i * k;
    double mu = 0;
    for (std::int64_t j = 0; j < k; ++j) mu += row[j];
    mu /= static_cast<double>(k);
    double var = 0;
    for (std::int64_t j = 0; j < k; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(k);
    const double is = 1.0 / std::sqrt(var + static_cast<double>(eps));
    inv_std[i] = is;
    for (std::int64_t j = 0; j < k; ++j) {
      xhat[i * k + j] = (row[j] - mu) * is;
      y[i * k + j] = static_cast<T>(xhat[i * k + j] * gv[j] + bv[j]);
    }
  }
  TensorOf<T> out(x.shape(), std::move(y));
  if (!any_tracked<T>({&x, &gamma, &beta})) return out;
  auto sg = gamma.detach();
  return finish<T>(out, {&x, &gamma, &beta},
                   [xhat = std::move(xhat), inv_std = std::move(inv_std), sg, m, k](std::span<const T> g, auto& sink) {
                     const auto gv = sg.data();
                     if (auto gx = sink[0]; !gx.empty()) {
                       const double inv_k = 1.0 / static_cast<double>(k);
                       for (std::int64_t i = 0; i < m; ++i) {
                         double sum_d = 0, sum_dx = 0;
                         for (std::int64_t j = 0; j < k; ++j) {
                           const double d = static_cast<double>(g[i * k + j]) * gv[j];
                           sum_d += d;
                           sum_dx += d * xhat[i * k + j];
                         }
                         for (std::int64_t j = 0; j < k; ++j) {
                           const double d = static_cast<double>(g[i * k + j]) * gv[j];
                           gx[i * k + j] += static_cast<T>(inv_std[i] * (d - inv_k * sum_d - xhat[i * k + j] * inv_k * sum_dx));
                         }
                       }
                     }
                     if (auto gg = sink[1]; !gg.empty())
                       for (std::int64_t i = 0; i < m; ++i)
                         for (std::int64_t j = 0; j < k; ++j) gg[j] += static_cast<T>(g[i * k + j] * xhat[i * k + j]);
                     if (auto gb = sink[2]; !gb.empty())
                       for (std::int64_t i = 0; i < m; ++i)
                         for (std::int64_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
                   });
}

template <typename T>
TensorOf<T> gather(const TensorOf<T>& a, std::span<const std::int64_t> index, Shape out_shape) {
  if (shape_numel(out_shape) != static_cast<std::int64_t>(index.size())) {
    throw ShapeError("gather: " + std::to_string(index.size()) + " indices for output " + shape_to_string(out_shape));
  }
  const auto x = a.data();
  std::vector<T> y(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto src = index[i];
    if (src < 0 || src >= a.numel()) {
      throw ShapeError("gather: index " + std::to_string(src) + " out of range for " + shape_to_string(a.shape()));
    }
    y[i] = x[static_cast<std::size_t>(src)];
  }
  TensorOf<T> out(std::move(out_shape), std::move(y));
  if (!a.tracked()) return out;
  std::vector<std::int64_t> saved(index.begin(), index.end());
  return finish<T>(out, {&a}, [saved = std::move(saved)](std::span<const T> g, auto& sink) {
    auto ga = sink[0];
    for (std::size_t i = 0; i < saved.size(); ++i) ga[saved[i]] += g[i];
  });
}

template <typename T>
TensorOf<T> segment_mean(const TensorOf<T>& x, std::int64_t segments) {
  if (x.rank() != 2 || segments <= 0 || x.dim(0) % segments != 0) {
    shape_fail("segment_mean", x.shape(), "[segments*rows x K]");
  }
  const auto rows = x.dim(0) / segments, k = x.dim(1);
  const auto xv = x.data();
  std::vector<T> y(static_cast<std::size_t>(segments * k), T{0});
  for (std::int64_t s = 0; s < segments; ++s) {
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < k; ++j) y[s * k + j] += xv[(s * rows + r) * k + j];
    for (std::int64_t j = 0; j < k; ++j) y[s * k + j] /= static_cast<T>(rows);
  }
  return finish<T>(TensorOf<T>({segments, k}, std::move(y)), {&x},
                   [segments, rows, k](std::span<const T> g, auto& sink) {
                     auto gx = sink[0];
                     const T inv = T(1) / static_cast<T>(rows);
                     for (std::int64_t s = 0; s < segments; ++s)
                       for (std::int64_t r = 0; r < rows; ++r)
                         for (std::int64_t j = 0; j < k; ++j) gx[(s * rows + r) * k + j] += g[s * k + j] * inv;
                   });
}

// ---------------------------------------------------------------------------
// Dispatcher

template <typename T>
TensorOf<T> apply(OpKind kind, std::span<const TensorOf<T>> inputs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ShapeError(std::string(to_string(kind)) + ": expected " + std::to_string(n) + " inputs, got " +
                       std::to_string(inputs.size()));
    }
  };
  switch (kind) {
    case OpKind::add: need(2); return add(inputs[0], inputs[1]);
    case OpKind::sub: need(2); return sub(inputs[0], inputs[1]);
    case OpKind::mul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::matmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::exp: need(1); return exp(inputs[0]);
    case OpKind::log: need(1); return log(inputs[0]);
    case OpKind::softplus: need(1); return softplus(inputs[0]);
    case OpKind::sigmoid: need(1); return sigmoid(inputs[0]);
    case OpKind::silu: need(1); return silu(inputs[0]);
    case OpKind::mean: need(1); return mean(inputs[0]);
    case OpKind::sum: need(1); return sum(inputs[0]);
    case OpKind::transpose2d: need(1); return transpose2d(inputs[0]);
    case OpKind::softmax: need(1); return softmax(inputs[0]);
    case OpKind::reshape: {
      need(2);
      Shape shape;
      for (T v : inputs[1].data()) shape.push_back(static_cast<std::int64_t>(std::lround(v)));
      return reshape(inputs[0], std::move(shape));
    }
    case OpKind::slice: {
      need(2);
      if (inputs[1].numel() != 3) throw ShapeError("slice: spec tensor must hold (axis, begin, end)");
      const auto s = inputs[1].data();
      return slice(inputs[0], static_cast<std::size_t>(std::lround(s[0])), std::lround(s[1]), std::lround(s[2]));
    }
    case OpKind::concat:
      return concat(inputs, 0);
    case OpKind::cross_entropy: {
      need(2);
      const auto& logits = inputs[0];
      std::vector<int> labels;
      for (T v : inputs[1].data()) labels.push_back(static_cast<int>(std::lround(v)));
      if (logits.rank() == 1) return cross_entropy(reshape(logits, {1, logits.dim(0)}), labels);
      return cross_entropy(logits, labels);
    }
  }
  throw ValidationError("apply: unknown op kind");
}

#define SSMR_INSTANTIATE_OPS(T)                                                                       \
  template TensorOf<T> add(const TensorOf<T>&, const TensorOf<T>&);                                   \
  template TensorOf<T> sub(const TensorOf<T>&, const TensorOf<T>&);                                   \
  template TensorOf<T> mul(const TensorOf<T>&, const TensorOf<T>&);                                   \
  template TensorOf<T> scale(const TensorOf<T>&, T);                                                  \
  template TensorOf<T> exp(const TensorOf<T>&);                                                       \
  template TensorOf<T> log(const TensorOf<T>&);                                                       \
  template TensorOf<T> softplus(const TensorOf<T>&);                                                  \
  template TensorOf<T> sigmoid(const TensorOf<T>&);                                                   \
  template TensorOf<T> silu(const TensorOf<T>&);                                                      \
  template TensorOf<T> expm1_ratio(const TensorOf<T>&);                                               \
  template TensorOf<T> matmul(const TensorOf<T>&, const TensorOf<T>&);                                \
  template TensorOf<T> bmm(const TensorOf<T>&, const TensorOf<T>&);                                   \
  template TensorOf<T> outer(const TensorOf<T>&, const TensorOf<T>&);                                 \
  template TensorOf<T> sum(const TensorOf<T>&);                                                       \
  template TensorOf<T> mean(const TensorOf<T>&);                                                      \
  template TensorOf<T> reshape(const TensorOf<T>&, Shape);                                            \
  template TensorOf<T> transpose2d(const TensorOf<T>&);                                               \
  template TensorOf<T> slice(const TensorOf<T>&, std::size_t, std::int64_t, std::int64_t);            \
  template TensorOf<T> concat(std::span<const TensorOf<T>>, std::size_t);                             \
  template TensorOf<T> softmax(const TensorOf<T>&);                                                   \
  template TensorOf<T> cross_entropy(const TensorOf<T>&, std::span<const int>, Reduction);            \
  template TensorOf<T> add_bias(const TensorOf<T>&, const TensorOf<T>&);                              \
  template TensorOf<T> mul_bias(const TensorOf<T>&, const TensorOf<T>&);                              \
  template TensorOf<T> mul_rows(const TensorOf<T>&, const TensorOf<T>&);                              \
  template TensorOf<T> layer_norm(const TensorOf<T>&, const TensorOf<T>&, const TensorOf<T>&, T);     \
  template TensorOf<T> gather(const TensorOf<T>&, std::span<const std::int64_t>, Shape);              \
  template TensorOf<T> segment_mean(const TensorOf<T>&, std::int64_t);                                \
  template TensorOf<T> apply(OpKind, std::span<const TensorOf<T>>);

SSMR_INSTANTIATE_OPS(float)
SSMR_INSTANTIATE_OPS(double)

#undef SSMR_INSTANTIATE_OPS

}  // namespace ssmr

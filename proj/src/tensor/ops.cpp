#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "gsau/tensor.hpp"

namespace gsau {

namespace {

thread_local std::size_t g_l2_guard_hits = 0;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using ArrMap = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ConstArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

template <typename T>
void require_same_shape(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    shape_fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(std::string_view op, const Tensor<T>& a, std::size_t rank) {
  if (a.rank() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got shape " + shape_str(a.shape()));
  }
}

template <typename T>
bool needs_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!grad_enabled()) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> make_output(std::string_view op, Shape shape, Buffer<T> data) {
  // x * 0 is NaN exactly when x is NaN or infinite.
  if (std::isnan((ConstArrMap<T>(data.data(), static_cast<Eigen::Index>(data.size())) * T(0)).sum())) {
    throw NumericError(std::string(op) + ": non-finite output");
  }
  return Tensor<T>::from_data(std::move(shape), std::move(data));
}

/// Grad buffer of an input if it participates in differentiation, else null.
template <typename T>
T* grad_of(TensorImpl<T>& impl) {
  if (!impl.requires_grad) return nullptr;
  impl.ensure_grad();
  return impl.grad.data();
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

std::size_t l2_guard_hits() { return g_l2_guard_hits; }
void reset_l2_guard_hits() { g_l2_guard_hits = 0; }

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr std::string_view op = "matmul";
  std::size_t batch = 1, n, k, m;
  Shape out_shape;
  if (a.rank() == 2 && b.rank() == 2) {
    n = a.dim(0), k = a.dim(1), m = b.dim(1);
    if (b.dim(0) != k) shape_fail(op, "inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    out_shape = {n, m};
  } else if (a.rank() == 3 && b.rank() == 3) {
    batch = a.dim(0), n = a.dim(1), k = a.dim(2), m = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k) {
      shape_fail(op, "incompatible batched shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    out_shape = {batch, n, m};
  } else {
    shape_fail(op, "unsupported ranks " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }

  Buffer<T> out(batch * n * m);
  for (std::size_t s = 0; s < batch; ++s) {
    ConstMatMap<T> A(a.data().data() + s * n * k, n, k);
    ConstMatMap<T> B(b.data().data() + s * k * m, k, m);
    MatMap<T> C(out.data() + s * n * m, n, m);
    C.noalias() = A * B;
  }
  auto result = make_output<T>(op, out_shape, std::move(out));
  if (needs_grad({&a, &b})) {
    Tape<T>::active().record(op, result, [pa = a.impl(), pb = b.impl(), batch, n, k, m](TensorImpl<T>& o) {
      T* ga = grad_of(*pa);
      T* gb = grad_of(*pb);
      for (std::size_t s = 0; s < batch; ++s) {
        ConstMatMap<T> G(o.grad.data() + s * n * m, n, m);
        if (ga) {
          ConstMatMap<T> B(pb->data.data() + s * k * m, k, m);
          MatMap<T>(ga + s * n * k, n, k).noalias() += G * B.transpose();
        }
        if (gb) {
          ConstMatMap<T> A(pa->data.data() + s * n * k, n, k);
          MatMap<T>(gb + s * k * m, k, m).noalias() += A.transpose() * G;
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto result = make_output<T>("add", a.shape(), std::move(out));
  if (needs_grad({&a, &b})) {
    Tape<T>::active().record("add", result, [pa = a.impl(), pb = b.impl()](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
      if (T* g = grad_of(*pb)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  auto result = make_output<T>("sub", a.shape(), std::move(out));
  if (needs_grad({&a, &b})) {
    Tape<T>::active().record("sub", result, [pa = a.impl(), pb = b.impl()](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
      if (T* g = grad_of(*pb)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  auto result = make_output<T>("mul", a.shape(), std::move(out));
  if (needs_grad({&a, &b})) {
    Tape<T>::active().record("mul", result, [pa = a.impl(), pb = b.impl()](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pb->data[i];
      if (T* g = grad_of(*pb)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * pa->data[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  auto result = make_output<T>("scale", a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("scale", result, [pa = a.impl(), factor](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * factor;
    });
  }
  return result;
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data()[i]);
  auto result = make_output<T>("exp", a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("exp", result, [pa = a.impl()](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * o.data[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data()[i]);
  auto result = make_output<T>("log", a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("log", result, [pa = a.impl()](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] / pa->data[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const std::size_t d = last_dim(a.shape());
  const std::size_t rows = d ? a.size() / d : 0;
  Buffer<T> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * d;
    T* y = out.data() + r * d;
    const T mx = *std::max_element(x, x + d);
    for (std::size_t j = 0; j < d; ++j) y[j] = x[j] - mx;
  }
  ArrMap<T> e(out.data(), static_cast<Eigen::Index>(out.size()));
  e = e.exp();
  for (std::size_t r = 0; r < rows; ++r) {
    T* y = out.data() + r * d;
    T z = 0;
    for (std::size_t j = 0; j < d; ++j) z += y[j];
    const T inv = T(1) / z;
    for (std::size_t j = 0; j < d; ++j) y[j] *= inv;
  }
  auto result = make_output<T>("softmax", a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("softmax", result, [pa = a.impl(), rows, d](TensorImpl<T>& o) {
      T* g = grad_of(*pa);
      if (!g) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = o.data.data() + r * d;
        const T* gy = o.grad.data() + r * d;
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += y[j] * (gy[j] - dot);
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a) {
  const std::size_t d = last_dim(a.shape());
  const std::size_t rows = d ? a.size() / d : 0;
  Buffer<T> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * d;
    T* y = out.data() + r * d;
    T mx = *std::max_element(x, x + d);
    T z = 0;
    for (std::size_t j = 0; j < d; ++j) z += std::exp(x[j] - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < d; ++j) y[j] = x[j] - lse;
  }
  auto result = make_output<T>("log_softmax", a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("log_softmax", result, [pa = a.impl(), rows, d](TensorImpl<T>& o) {
      T* g = grad_of(*pa);
      if (!g) return;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = o.data.data() + r * d;
        const T* gy = o.grad.data() + r * d;
        T total = 0;
        for (std::size_t j = 0; j < d; ++j) total += gy[j];
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += gy[j] - std::exp(y[j]) * total;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const std::int64_t> indices) {
  constexpr std::string_view op = "embedding_lookup";
  require_rank(op, table, 2);
  const std::size_t rows = table.dim(0), d = table.dim(1);
  Buffer<T> out(indices.size() * d, T(0));
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const auto idx = indices[r];
    if (idx < 0) continue;
    if (static_cast<std::size_t>(idx) >= rows) {
      shape_fail(op, "index " + std::to_string(idx) + " out of range for table " + shape_str(table.shape()));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(idx) * d, d, out.data() + r * d);
  }
  auto result = make_output<T>(op, {indices.size(), d}, std::move(out));
  if (needs_grad({&table})) {
    Tape<T>::active().record(op, result, [pt = table.impl(), idx = std::vector<std::int64_t>(indices.begin(), indices.end()), d](TensorImpl<T>& o) {
      T* g = grad_of(*pt);
      if (!g) return;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0) continue;
        T* dst = g + static_cast<std::size_t>(idx[r]) * d;
        const T* src = o.grad.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a) {
  const std::size_t d = last_dim(a.shape());
  const std::size_t rows = d ? a.size() / d : 0;
  Buffer<T> out(a.size());
  Buffer<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * d;
    T ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += x[j] * x[j];
    const T n = std::sqrt(ss);
    norms[r] = n;
    if (static_cast<double>(n) < kL2NormalizeGuard) {
      ++g_l2_guard_hits;
      std::copy_n(x, d, out.data() + r * d);
    } else {
      for (std::size_t j = 0; j < d; ++j) out[r * d + j] = x[j] / n;
    }
  }
  auto result = make_output<T>("l2_normalize", a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("l2_normalize", result, [pa = a.impl(), norms = std::move(norms), rows, d](TensorImpl<T>& o) {
      T* g = grad_of(*pa);
      if (!g) return;
      for (std::size_t r = 0; r < rows; ++r) {
        if (static_cast<double>(norms[r]) < kL2NormalizeGuard) continue;
        const T* y = o.data.data() + r * d;
        const T* gy = o.grad.data() + r * d;
        T dot = 0;
        for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
        for (std::size_t j = 0; j < d; ++j) g[r * d + j] += (gy[j] - y[j] * dot) / norms[r];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> squared_row_distance(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr std::string_view op = "squared_row_distance";
  require_rank(op, a, 2);
  require_same_shape(op, a, b);
  const std::size_t n = a.dim(0), d = a.dim(1);
  Buffer<T> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) {
      const T diff = a.data()[r * d + j] - b.data()[r * d + j];
      s += diff * diff;
    }
    out[r] = s;
  }
  auto result = make_output<T>(op, {n}, std::move(out));
  if (needs_grad({&a, &b})) {
    Tape<T>::active().record(op, result, [pa = a.impl(), pb = b.impl(), n, d](TensorImpl<T>& o) {
      T* ga = grad_of(*pa);
      T* gb = grad_of(*pb);
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          const T v = T(2) * o.grad[r] * (pa->data[r * d + j] - pb->data[r * d + j]);
          if (ga) ga[r * d + j] += v;
          if (gb) gb[r * d + j] -= v;
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> pairwise_squared_distance(const Tensor<T>& a, const Tensor<T>& b) {
  constexpr std::string_view op = "pairwise_squared_distance";
  require_rank(op, a, 2);
  require_rank(op, b, 2);
  if (a.dim(1) != b.dim(1)) {
    shape_fail(op, "row widths differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  const auto ni = static_cast<Eigen::Index>(n), mi = static_cast<Eigen::Index>(m),
             di = static_cast<Eigen::Index>(d);
  Buffer<T> out(n * m);
  {
    ConstMatMap<T> x(a.data().data(), ni, di), y(b.data().data(), mi, di);
    MatMap<T> dist(out.data(), ni, mi);
    // |x|^2 + |y|^2 - 2 x.y, clamped against rounding below zero.
    dist.noalias() = T(-2) * x * y.transpose();
    dist.colwise() += x.rowwise().squaredNorm();
    dist.rowwise() += y.rowwise().squaredNorm().transpose();
    dist = dist.cwiseMax(T(0));
  }
  auto result = make_output<T>(op, {n, m}, std::move(out));
  if (needs_grad({&a, &b})) {
    Tape<T>::active().record(op, result, [pa = a.impl(), pb = b.impl(), ni, mi, di](TensorImpl<T>& o) {
      T* ga = grad_of(*pa);
      T* gb = grad_of(*pb);
      ConstMatMap<T> x(pa->data.data(), ni, di), y(pb->data.data(), mi, di), g(o.grad.data(), ni, mi);
      // d/dx_i = 2 sum_j g_ij (x_i - y_j); d/dy_j = -2 sum_i g_ij (x_i - y_j)
      if (ga) {
        MatMap<T> gx(ga, ni, di);
        RowMat<T> gy_prod(ni, di);
        gy_prod.noalias() = g * y;
        gx += T(2) * (g.rowwise().sum().asDiagonal() * x - gy_prod);
      }
      if (gb) {
        MatMap<T> gy(gb, mi, di);
        RowMat<T> gx_prod(mi, di);
        gx_prod.noalias() = g.transpose() * x;
        gy += T(2) * (g.colwise().sum().transpose().asDiagonal() * y - gx_prod);
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& a, std::span<const std::size_t> flat) {
  Buffer<T> out(flat.size());
  for (std::size_t k = 0; k < flat.size(); ++k) {
    if (flat[k] >= a.size()) {
      shape_fail("gather", "flat index " + std::to_string(flat[k]) + " out of range for " + shape_str(a.shape()));
    }
    out[k] = a.data()[flat[k]];
  }
  auto result = make_output<T>("gather", {flat.size()}, std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("gather", result, [pa = a.impl(), idx = std::vector<std::size_t>(flat.begin(), flat.end())](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t k = 0; k < idx.size(); ++k) g[idx[k]] += o.grad[k];
    });
  }
  return result;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const T s = ConstArrMap<T>(a.data().data(), static_cast<Eigen::Index>(a.size())).sum();
  auto result = make_output<T>("sum", {}, {s});
  if (needs_grad({&a})) {
    Tape<T>::active().record("sum", result, [pa = a.impl()](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < pa->data.size(); ++i) g[i] += o.grad[0];
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) shape_fail("mean", "empty input");
  T s = 0;
  for (T v : a.data()) s += v;
  const T inv = T(1) / static_cast<T>(a.size());
  auto result = make_output<T>("mean", {}, {s * inv});
  if (needs_grad({&a})) {
    Tape<T>::active().record("mean", result, [pa = a.impl(), inv](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < pa->data.size(); ++i) g[i] += o.grad[0] * inv;
    });
  }
  return result;
}

template <typename T>
Tensor<T> log_mean_exp(const Tensor<T>& a) {
  if (a.size() == 0) shape_fail("log_mean_exp", "empty input");
  const auto x = a.data();
  const T mx = *std::max_element(x.begin(), x.end());
  T s = 0;
  for (T v : x) s += std::exp(v - mx);
  const T value = mx + std::log(s / static_cast<T>(x.size()));
  auto result = make_output<T>("log_mean_exp", {}, {value});
  if (needs_grad({&a})) {
    Tape<T>::active().record("log_mean_exp", result, [pa = a.impl(), value](TensorImpl<T>& o) {
      T* g = grad_of(*pa);
      if (!g) return;
      const T inv_n = T(1) / static_cast<T>(pa->data.size());
      for (std::size_t i = 0; i < pa->data.size(); ++i) {
        g[i] += o.grad[0] * std::exp(pa->data[i] - value) * inv_n;
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  constexpr std::string_view op = "layer_norm";
  const std::size_t d = last_dim(a.shape());
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    shape_fail(op, "gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                       " do not match input " + shape_str(a.shape()));
  }
  const std::size_t rows = d ? a.size() / d : 0;
  Buffer<T> out(a.size()), normalized(a.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.data().data() + r * d;
    T mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += x[j];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const T xh = (x[j] - mu) * is;
      normalized[r * d + j] = xh;
      out[r * d + j] = xh * gain.data()[j] + bias.data()[j];
    }
  }
  auto result = make_output<T>(op, a.shape(), std::move(out));
  if (needs_grad({&a, &gain, &bias})) {
    Tape<T>::active().record(op, result, [pa = a.impl(), pg = gain.impl(), pb = bias.impl(), normalized = std::move(normalized), inv_std = std::move(inv_std), rows, d](TensorImpl<T>& o) {
      T* ga = grad_of(*pa);
      T* gg = grad_of(*pg);
      T* gb = grad_of(*pb);
      Buffer<T> dxh(d);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gy = o.grad.data() + r * d;
        const T* xh = normalized.data() + r * d;
        T mean_dxh = 0, mean_dxh_xh = 0;
        for (std::size_t j = 0; j < d; ++j) {
          if (gg) gg[j] += gy[j] * xh[j];
          if (gb) gb[j] += gy[j];
          dxh[j] = gy[j] * pg->data[j];
          mean_dxh += dxh[j];
          mean_dxh_xh += dxh[j] * xh[j];
        }
        if (!ga) continue;
        mean_dxh /= static_cast<T>(d);
        mean_dxh_xh /= static_cast<T>(d);
        for (std::size_t j = 0; j < d; ++j) {
          ga[r * d + j] += inv_std[r] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(a.data()[i], T(0));
  auto result = make_output<T>("relu", a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("relu", result, [pa = a.impl()](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          if (pa->data[i] > T(0)) g[i] += o.grad[i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  const auto n = static_cast<Eigen::Index>(a.size());
  Buffer<T> out(a.size());
  ConstArrMap<T> x(a.data().data(), n);
  ArrMap<T>(out.data(), n) = T(0.5) * x * (T(1) + (x * inv_sqrt2).erf());
  auto result = make_output<T>("gelu", a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("gelu", result, [pa = a.impl(), inv_sqrt2, n](TensorImpl<T>& o) {
      T* g = grad_of(*pa);
      if (!g) return;
      const T inv_sqrt_2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
      ConstArrMap<T> x(pa->data.data(), n);
      ConstArrMap<T> gy(o.grad.data(), n);
      ArrMap<T>(g, n) += gy * (T(0.5) * (T(1) + (x * inv_sqrt2).erf()) + x * (T(-0.5) * x.square()).exp() * inv_sqrt_2pi);
    });
  }
  return result;
}

template <typename T>
Tensor<T> masked_fill(const Tensor<T>& a, std::span<const std::uint8_t> mask, T value) {
  if (mask.size() != a.size()) {
    shape_fail("masked_fill", "mask of " + std::to_string(mask.size()) + " entries for input " + shape_str(a.shape()));
  }
  Buffer<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask[i]) out[i] = value;
  }
  auto result = make_output<T>("masked_fill", a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("masked_fill", result, [pa = a.impl(), m = std::vector<std::uint8_t>(mask.begin(), mask.end())](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) {
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
          if (!m[i]) g[i] += o.grad[i];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2 && a.rank() != 3) shape_fail("transpose", "expected rank 2 or 3, got " + shape_str(a.shape()));
  const std::size_t batch = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t n = a.dim(a.rank() - 2), m = a.dim(a.rank() - 1);
  Buffer<T> out(a.size());
  for (std::size_t s = 0; s < batch; ++s) {
    ConstMatMap<T> A(a.data().data() + s * n * m, n, m);
    MatMap<T>(out.data() + s * n * m, m, n) = A.transpose();
  }
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  auto result = make_output<T>("transpose", std::move(shape), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("transpose", result, [pa = a.impl(), batch, n, m](TensorImpl<T>& o) {
      T* g = grad_of(*pa);
      if (!g) return;
      for (std::size_t s = 0; s < batch; ++s) {
        ConstMatMap<T> G(o.grad.data() + s * n * m, m, n);
        MatMap<T>(g + s * n * m, n, m) += G.transpose();
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    shape_fail("reshape", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  auto result = Tensor<T>::from_data(std::move(shape), Buffer<T>(a.data().begin(), a.data().end()));
  if (needs_grad({&a})) {
    Tape<T>::active().record("reshape", result, [pa = a.impl()](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
  constexpr std::string_view op = "concat";
  if (parts.empty()) shape_fail(op, "no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty()) shape_fail(op, "scalar inputs cannot be concatenated");
  Shape lead(first.begin(), first.end() - 1);
  const std::size_t outer = shape_numel(lead);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size() || !std::equal(lead.begin(), lead.end(), s.begin())) {
      shape_fail(op, "leading dimensions differ " + shape_str(first) + " vs " + shape_str(s));
    }
    widths.push_back(s.back());
    total += s.back();
  }
  Buffer<T> out(outer * total);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const T* src = parts[p].data().data();
    for (std::size_t r = 0; r < outer; ++r) {
      std::copy_n(src + r * widths[p], widths[p], out.data() + r * total + offset);
    }
    offset += widths[p];
  }
  Shape shape = lead;
  shape.push_back(total);
  auto result = make_output<T>(op, std::move(shape), std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || needs_grad({&p});
  if (any) {
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    Tape<T>::active().record(op, result, [impls = std::move(impls), widths, outer, total](TensorImpl<T>& o) {
      std::size_t offset = 0;
      for (std::size_t p = 0; p < impls.size(); ++p) {
        if (T* g = grad_of(*impls[p])) {
          for (std::size_t r = 0; r < outer; ++r) {
            for (std::size_t j = 0; j < widths[p]; ++j) g[r * widths[p] + j] += o.grad[r * total + offset + j];
          }
        }
        offset += widths[p];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& a, std::size_t start, std::size_t len) {
  const std::size_t d = last_dim(a.shape());
  if (a.rank() == 0 || start + len > d) {
    shape_fail("slice_last", "range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                                 ") outside " + shape_str(a.shape()));
  }
  const std::size_t outer = a.size() / d;
  Buffer<T> out(outer * len);
  for (std::size_t r = 0; r < outer; ++r) std::copy_n(a.data().data() + r * d + start, len, out.data() + r * len);
  Shape shape = a.shape();
  shape.back() = len;
  auto result = make_output<T>("slice_last", std::move(shape), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("slice_last", result, [pa = a.impl(), outer, d, start, len](TensorImpl<T>& o) {
      T* g = grad_of(*pa);
      if (!g) return;
      for (std::size_t r = 0; r < outer; ++r) {
        for (std::size_t j = 0; j < len; ++j) g[r * d + start + j] += o.grad[r * len + j];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t start, std::size_t count) {
  require_rank("slice_rows", a, 2);
  if (start + count > a.dim(0)) {
    shape_fail("slice_rows", "rows [" + std::to_string(start) + ", " + std::to_string(start + count) +
                                 ") outside " + shape_str(a.shape()));
  }
  const std::size_t d = a.dim(1);
  Buffer<T> out(a.data().begin() + static_cast<std::ptrdiff_t>(start * d),
                     a.data().begin() + static_cast<std::ptrdiff_t>((start + count) * d));
  auto result = make_output<T>("slice_rows", {count, d}, std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("slice_rows", result, [pa = a.impl(), offset = start * d](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[offset + i] += o.grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  const std::size_t d = last_dim(a.shape());
  if (a.rank() == 0 || bias.shape() != Shape{d}) {
    shape_fail("add_bias", "bias " + shape_str(bias.shape()) + " does not match input " + shape_str(a.shape()));
  }
  const std::size_t rows = a.size() / d;
  Buffer<T> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = a.data()[r * d + j] + bias.data()[j];
  }
  auto result = make_output<T>("add_bias", a.shape(), std::move(out));
  if (needs_grad({&a, &bias})) {
    Tape<T>::active().record("add_bias", result, [pa = a.impl(), pb = bias.impl(), rows, d](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
      if (T* g = grad_of(*pb)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < d; ++j) g[j] += o.grad[r * d + j];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> spmm(const SparseMatrix& adj, const Tensor<T>& a) {
  require_rank("spmm", a, 2);
  if (adj.cols() != a.dim(0)) {
    shape_fail("spmm", "adjacency " + std::to_string(adj.rows()) + "x" + std::to_string(adj.cols()) +
                           " cannot multiply " + shape_str(a.shape()));
  }
  const std::size_t d = a.dim(1);
  const auto& rp = adj.row_ptr();
  const auto& ci = adj.col_idx();
  const auto& vals = adj.values();
  Buffer<T> out(adj.rows() * d, T(0));
  for (std::size_t r = 0; r < adj.rows(); ++r) {
    T* dst = out.data() + r * d;
    for (std::size_t k = rp[r]; k < rp[r + 1]; ++k) {
      const T w = static_cast<T>(vals[k]);
      const T* src = a.data().data() + ci[k] * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += w * src[j];
    }
  }
  auto result = make_output<T>("spmm", {adj.rows(), d}, std::move(out));
  if (needs_grad({&a})) {
    // The adjacency must outlive the backward pass.
    Tape<T>::active().record("spmm", result, [pa = a.impl(), adjp = &adj, d](TensorImpl<T>& o) {
      T* g = grad_of(*pa);
      if (!g) return;
      const auto& rp = adjp->row_ptr();
      const auto& ci = adjp->col_idx();
      const auto& vals = adjp->values();
      for (std::size_t r = 0; r < adjp->rows(); ++r) {
        const T* src = o.grad.data() + r * d;
        for (std::size_t k = rp[r]; k < rp[r + 1]; ++k) {
          const T w = static_cast<T>(vals[k]);
          T* dst = g + ci[k] * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += w * src[j];
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double rate, std::mt19937_64& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) shape_fail("dropout", "rate must be < 1");
  // The engine seeds a splitmix64 stream; each draw yields two 32-bit uniforms.
  const auto threshold = static_cast<std::uint64_t>(rate * 4294967296.0);
  const T kept = static_cast<T>(1.0 / (1.0 - rate));
  Buffer<T> mask(a.size());
  std::uint64_t state = rng();
  for (std::size_t i = 0; i < mask.size(); i += 2) {
    std::uint64_t bits = (state += 0x9e3779b97f4a7c15ULL);
    bits = (bits ^ (bits >> 30)) * 0xbf58476d1ce4e5b9ULL;
    bits = (bits ^ (bits >> 27)) * 0x94d049bb133111ebULL;
    bits ^= bits >> 31;
    mask[i] = (bits & 0xffffffffULL) >= threshold ? kept : T(0);
    if (i + 1 < mask.size()) mask[i + 1] = (bits >> 32) >= threshold ? kept : T(0);
  }
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * mask[i];
  auto result = make_output<T>("dropout", a.shape(), std::move(out));
  if (needs_grad({&a})) {
    Tape<T>::active().record("dropout", result, [pa = a.impl(), mask = std::move(mask)](TensorImpl<T>& o) {
      if (T* g = grad_of(*pa)) for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * mask[i];
    });
  }
  return result;
}

#define GSAU_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                  \
  template Tensor<T> exp(const Tensor<T>&);                                                       \
  template Tensor<T> log(const Tensor<T>&);                                                       \
  template Tensor<T> softmax(const Tensor<T>&);                                                   \
  template Tensor<T> log_softmax(const Tensor<T>&);                                               \
  template Tensor<T> embedding_lookup(const Tensor<T>&, std::span<const std::int64_t>);           \
  template Tensor<T> l2_normalize(const Tensor<T>&);                                              \
  template Tensor<T> squared_row_distance(const Tensor<T>&, const Tensor<T>&);                    \
  template Tensor<T> pairwise_squared_distance(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> gather(const Tensor<T>&, std::span<const std::size_t>);                      \
  template Tensor<T> sum(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&);                                                      \
  template Tensor<T> log_mean_exp(const Tensor<T>&);                                              \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);         \
  template Tensor<T> relu(const Tensor<T>&);                                                      \
  template Tensor<T> gelu(const Tensor<T>&);                                                      \
  template Tensor<T> masked_fill(const Tensor<T>&, std::span<const std::uint8_t>, T);             \
  template Tensor<T> transpose(const Tensor<T>&);                                                 \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                            \
  template Tensor<T> concat(const std::vector<Tensor<T>>&);                                       \
  template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> slice_rows(const Tensor<T>&, std::size_t, std::size_t);                      \
  template Tensor<T> add_bias(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> spmm(const SparseMatrix&, const Tensor<T>&);                                 \
  template Tensor<T> dropout(const Tensor<T>&, double, std::mt19937_64&);

GSAU_INSTANTIATE_OPS(float)
GSAU_INSTANTIATE_OPS(double)

#undef GSAU_INSTANTIATE_OPS

}  // namespace gsau

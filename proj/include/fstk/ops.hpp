#pragma once

#include <cmath>
#include <string>

#include "fstk/common.hpp"
#include "fstk/tape.hpp"

// Differentiable elementwise and reduction primitives. Every op appends one
// node to the tape; backward rules read parent values from the tape itself,
// so closures only capture node ids (plus small saved state where needed).

namespace fstk {
namespace detail {

template <typename T>
void require_same_tape(Var<T> a, Var<T> b, const char* op) {
  if (a.tape != b.tape)
    check_arg(false, std::string(op) + ": operands live on different tapes");
}

template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (!a.value().same_shape(b.value()))
    check_arg(false, std::string(op) + ": shape mismatch " + shape_str(a.value().shape()) +
                         " vs " + shape_str(b.value().shape()));
}

}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "add");
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = pa[i] + pb[i];
  const int ia = a.id, ib = b.id;
  return a.tape->emit("add", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const TapeNode<T>& n) {
    t.accumulate(ia, n.grad);
    t.accumulate(ib, n.grad);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "sub");
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = pa[i] - pb[i];
  const int ia = a.id, ib = b.id;
  return a.tape->emit("sub", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const TapeNode<T>& n) {
    t.accumulate(ia, n.grad);
    if (t.node(ib).requires_grad) {
      Tensor<T>& gb = t.grad_buf(ib);
      const T* g = n.grad.data();
      T* dst = gb.data();
      for (long long i = 0; i < gb.numel(); ++i) dst[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "mul");
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = pa[i] * pb[i];
  const int ia = a.id, ib = b.id;
  return a.tape->emit("mul", std::move(out), {ia, ib}, [ia, ib](Tape<T>& t, const TapeNode<T>& n) {
    const T* g = n.grad.data();
    if (t.node(ia).requires_grad) {
      Tensor<T>& ga = t.grad_buf(ia);
      const T* vb = t.node(ib).value.data();
      T* dst = ga.data();
      for (long long i = 0; i < ga.numel(); ++i) dst[i] += g[i] * vb[i];
    }
    if (t.node(ib).requires_grad) {
      Tensor<T>& gb = t.grad_buf(ib);
      const T* va = t.node(ia).value.data();
      T* dst = gb.data();
      for (long long i = 0; i < gb.numel(); ++i) dst[i] += g[i] * va[i];
    }
  });
}

template <typename T>
Var<T> divide(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "divide");
  detail::require_same_shape(a, b, "divide");
  const T* pb = b.value().data();
  for (long long i = 0; i < b.value().numel(); ++i)
    check_numeric(pb[i] != T{0}, "divide: zero denominator at flat index " + std::to_string(i));
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  const T* pa = a.value().data();
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = pa[i] / pb[i];
  const int ia = a.id, ib = b.id;
  return a.tape->emit("divide", std::move(out), {ia, ib},
                      [ia, ib](Tape<T>& t, const TapeNode<T>& n) {
                        const T* g = n.grad.data();
                        const T* vb = t.node(ib).value.data();
                        if (t.node(ia).requires_grad) {
                          Tensor<T>& ga = t.grad_buf(ia);
                          T* dst = ga.data();
                          for (long long i = 0; i < ga.numel(); ++i) dst[i] += g[i] / vb[i];
                        }
                        if (t.node(ib).requires_grad) {
                          Tensor<T>& gb = t.grad_buf(ib);
                          const T* va = t.node(ia).value.data();
                          T* dst = gb.data();
                          for (long long i = 0; i < gb.numel(); ++i)
                            dst[i] -= g[i] * va[i] / (vb[i] * vb[i]);
                        }
                      });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  const T* pa = a.value().data();
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = pa[i] * c;
  const int ia = a.id;
  return a.tape->emit("scale", std::move(out), {ia}, [ia, c](Tape<T>& t, const TapeNode<T>& n) {
    Tensor<T>& ga = t.grad_buf(ia);
    const T* g = n.grad.data();
    T* dst = ga.data();
    for (long long i = 0; i < ga.numel(); ++i) dst[i] += g[i] * c;
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T c) {
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  const T* pa = a.value().data();
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = pa[i] + c;
  const int ia = a.id;
  return a.tape->emit("add_scalar", std::move(out), {ia},
                      [ia](Tape<T>& t, const TapeNode<T>& n) { t.accumulate(ia, n.grad); });
}

template <typename T>
Var<T> neg(Var<T> a) {
  return scale(a, T{-1});
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  const T* pa = a.value().data();
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = pa[i] > T{0} ? pa[i] : T{0};
  const int ia = a.id;
  // Subgradient at exactly zero is taken as zero.
  return a.tape->emit("relu", std::move(out), {ia}, [ia](Tape<T>& t, const TapeNode<T>& n) {
    Tensor<T>& ga = t.grad_buf(ia);
    const T* g = n.grad.data();
    const T* va = t.node(ia).value.data();
    T* dst = ga.data();
    // Branchless: the sign pattern is data-dependent and defeats prediction.
    for (long long i = 0; i < ga.numel(); ++i)
      dst[i] += static_cast<T>(va[i] > T{0}) * g[i];
  });
}

// Overflow-safe softplus: log(1 + e^x) computed as x + log1p(e^-x) for x > 0.
template <typename T>
T softplus_scalar(T x) {
  return x > T{0} ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <typename T>
Var<T> softplus(Var<T> a) {
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  const T* pa = a.value().data();
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = softplus_scalar(pa[i]);
  const int ia = a.id;
  return a.tape->emit("softplus", std::move(out), {ia}, [ia](Tape<T>& t, const TapeNode<T>& n) {
    Tensor<T>& ga = t.grad_buf(ia);
    const T* g = n.grad.data();
    const T* va = t.node(ia).value.data();
    T* dst = ga.data();
    for (long long i = 0; i < ga.numel(); ++i) dst[i] += g[i] * sigmoid_scalar(va[i]);
  });
}

template <typename T>
Var<T> log_op(Var<T> a) {
  const T* pa = a.value().data();
  for (long long i = 0; i < a.value().numel(); ++i)
    check_numeric(pa[i] > T{0}, "log: non-positive input at flat index " + std::to_string(i));
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = std::log(pa[i]);
  const int ia = a.id;
  return a.tape->emit("log", std::move(out), {ia}, [ia](Tape<T>& t, const TapeNode<T>& n) {
    Tensor<T>& ga = t.grad_buf(ia);
    const T* g = n.grad.data();
    const T* va = t.node(ia).value.data();
    T* dst = ga.data();
    for (long long i = 0; i < ga.numel(); ++i) dst[i] += g[i] / va[i];
  });
}

template <typename T>
Var<T> exp_op(Var<T> a) {
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  const T* pa = a.value().data();
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = std::exp(pa[i]);
  const int ia = a.id;
  return a.tape->emit("exp", std::move(out), {ia}, [ia](Tape<T>& t, const TapeNode<T>& n) {
    Tensor<T>& ga = t.grad_buf(ia);
    const T* g = n.grad.data();
    const T* vo = n.value.data();
    T* dst = ga.data();
    for (long long i = 0; i < ga.numel(); ++i) dst[i] += g[i] * vo[i];
  });
}

template <typename T>
Var<T> square(Var<T> a) {
  Tensor<T> out = Tensor<T>::zeros_like(a.value());
  const T* pa = a.value().data();
  T* po = out.data();
  for (long long i = 0; i < out.numel(); ++i) po[i] = pa[i] * pa[i];
  const int ia = a.id;
  return a.tape->emit("square", std::move(out), {ia}, [ia](Tape<T>& t, const TapeNode<T>& n) {
    Tensor<T>& ga = t.grad_buf(ia);
    const T* g = n.grad.data();
    const T* va = t.node(ia).value.data();
    T* dst = ga.data();
    for (long long i = 0; i < ga.numel(); ++i) dst[i] += T{2} * g[i] * va[i];
  });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T acc{0};
  const T* pa = a.value().data();
  for (long long i = 0; i < a.value().numel(); ++i) acc += pa[i];
  const int ia = a.id;
  return a.tape->emit("sum", Tensor<T>::scalar(acc), {ia},
                      [ia](Tape<T>& t, const TapeNode<T>& n) {
                        Tensor<T>& ga = t.grad_buf(ia);
                        const T g = n.grad.data()[0];
                        T* dst = ga.data();
                        for (long long i = 0; i < ga.numel(); ++i) dst[i] += g;
                      });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const long long m = a.value().numel();
  T acc{0};
  const T* pa = a.value().data();
  for (long long i = 0; i < m; ++i) acc += pa[i];
  const int ia = a.id;
  return a.tape->emit("mean", Tensor<T>::scalar(acc / static_cast<T>(m)), {ia},
                      [ia, m](Tape<T>& t, const TapeNode<T>& n) {
                        Tensor<T>& ga = t.grad_buf(ia);
                        const T g = n.grad.data()[0] / static_cast<T>(m);
                        T* dst = ga.data();
                        for (long long i = 0; i < ga.numel(); ++i) dst[i] += g;
                      });
}

// Mean squared error over all elements: (1/N) sum (a - b)^2.
template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "mse");
  detail::require_same_shape(a, b, "mse");
  const long long m = a.value().numel();
  const T* pa = a.value().data();
  const T* pb = b.value().data();
  T acc{0};
  for (long long i = 0; i < m; ++i) {
    const T d = pa[i] - pb[i];
    acc += d * d;
  }
  const int ia = a.id, ib = b.id;
  return a.tape->emit(
      "mse", Tensor<T>::scalar(acc / static_cast<T>(m)), {ia, ib},
      [ia, ib, m](Tape<T>& t, const TapeNode<T>& n) {
        const T g = n.grad.data()[0] * T{2} / static_cast<T>(m);
        const T* va = t.node(ia).value.data();
        const T* vb = t.node(ib).value.data();
        if (t.node(ia).requires_grad) {
          Tensor<T>& ga = t.grad_buf(ia);
          T* dst = ga.data();
          for (long long i = 0; i < m; ++i) dst[i] += g * (va[i] - vb[i]);
        }
        if (t.node(ib).requires_grad) {
          Tensor<T>& gb = t.grad_buf(ib);
          T* dst = gb.data();
          for (long long i = 0; i < m; ++i) dst[i] -= g * (va[i] - vb[i]);
        }
      });
}

// Sum of squares: sum a_i^2 (single node; avoids materialising a^2).
template <typename T>
Var<T> sum_squares(Var<T> a) {
  const long long m = a.value().numel();
  const T* pa = a.value().data();
  T acc{0};
  for (long long i = 0; i < m; ++i) acc += pa[i] * pa[i];
  const int ia = a.id;
  return a.tape->emit("sum_squares", Tensor<T>::scalar(acc), {ia},
                      [ia](Tape<T>& t, const TapeNode<T>& n) {
                        Tensor<T>& ga = t.grad_buf(ia);
                        const T g = T{2} * n.grad.data()[0];
                        const T* va = t.node(ia).value.data();
                        T* dst = ga.data();
                        for (long long i = 0; i < ga.numel(); ++i) dst[i] += g * va[i];
                      });
}

// Contiguous flat window [offset, offset + numel(shape)) of a, viewed with
// the given shape. Backward scatter-adds into the same window.
template <typename T>
Var<T> slice(Var<T> a, long long offset, Shape shape) {
  const long long m = shape_numel(shape);
  if (offset < 0 || offset + m > a.value().numel())
    check_arg(false, "slice: window [" + std::to_string(offset) + ", " +
                         std::to_string(offset + m) + ") exceeds source of " +
                         std::to_string(a.value().numel()) + " elements");
  Tensor<T> out(shape);
  const T* pa = a.value().data() + offset;
  T* po = out.data();
  for (long long i = 0; i < m; ++i) po[i] = pa[i];
  const int ia = a.id;
  return a.tape->emit("slice", std::move(out), {ia},
                      [ia, offset, m](Tape<T>& t, const TapeNode<T>& n) {
                        Tensor<T>& ga = t.grad_buf(ia);
                        const T* g = n.grad.data();
                        T* dst = ga.data() + offset;
                        for (long long i = 0; i < m; ++i) dst[i] += g[i];
                      });
}

// Same data, different shape (numel must match).
template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  if (shape_numel(shape) != a.value().numel())
    check_arg(false, "reshape: numel mismatch " + std::to_string(shape_numel(shape)) + " vs " +
                         std::to_string(a.value().numel()));
  Tensor<T> out = Tensor<T>::from_data(shape, a.value().vec());
  const int ia = a.id;
  return a.tape->emit("reshape", std::move(out), {ia},
                      [ia](Tape<T>& t, const TapeNode<T>& n) {
                        Tensor<T>& ga = t.grad_buf(ia);
                        const T* g = n.grad.data();
                        T* dst = ga.data();
                        for (long long i = 0; i < ga.numel(); ++i) dst[i] += g[i];
                      });
}

}  // namespace fstk

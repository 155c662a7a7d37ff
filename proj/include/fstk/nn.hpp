#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

#include "fstk/ops.hpp"
#include "fstk/rng.hpp"

// Differentiable structured ops for convolutional encoder-decoder networks:
// same-padded stride-1 convolution, 2x2 max pooling, nearest-neighbour 2x
// upsampling, batch normalization, channel concatenation, and inverted
// dropout masks.

namespace fstk {
namespace detail {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unroll one sample [C,H,W] into a (C*k*k) x (H*W) patch matrix so the
// convolution becomes a single matrix product. Out-of-range taps are zero
// (zero padding).
template <typename T>
void im2col(const T* x, int C, int H, int W, int k, int pad, T* col) {
  const int HW = H * W;
  for (int c = 0; c < C; ++c) {
    const T* xc = x + static_cast<long long>(c) * HW;
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b) {
        T* row = col + (static_cast<long long>((c * k + a) * k + b)) * HW;
        for (int i = 0; i < H; ++i) {
          const int si = i + a - pad;
          T* dst = row + static_cast<long long>(i) * W;
          if (si < 0 || si >= H) {
            for (int j = 0; j < W; ++j) dst[j] = T{0};
            continue;
          }
          const T* src = xc + static_cast<long long>(si) * W;
          for (int j = 0; j < W; ++j) {
            const int sj = j + b - pad;
            dst[j] = (sj < 0 || sj >= W) ? T{0} : src[sj];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add the patch matrix back onto the image grid.
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int k, int pad, T* gx) {
  const int HW = H * W;
  for (int c = 0; c < C; ++c) {
    T* gc = gx + static_cast<long long>(c) * HW;
    for (int a = 0; a < k; ++a) {
      for (int b = 0; b < k; ++b) {
        const T* row = col + (static_cast<long long>((c * k + a) * k + b)) * HW;
        for (int i = 0; i < H; ++i) {
          const int si = i + a - pad;
          if (si < 0 || si >= H) continue;
          const T* src = row + static_cast<long long>(i) * W;
          T* dst = gc + static_cast<long long>(si) * W;
          for (int j = 0; j < W; ++j) {
            const int sj = j + b - pad;
            if (sj >= 0 && sj < W) dst[sj] += src[j];
          }
        }
      }
    }
  }
}

template <typename T>
std::vector<T>& conv_scratch() {
  thread_local std::vector<T> buf;
  return buf;
}

template <typename T>
std::vector<T>& conv_scratch2() {
  thread_local std::vector<T> buf;
  return buf;
}

template <typename T>
std::vector<T>& conv_scratch3() {
  thread_local std::vector<T> buf;
  return buf;
}

// Fused 3x3 stencil over one image: out[co] (+)= sum_ci taps(x[ci]), zero
// padding. Roughly twice as fast as im2col+GEMM at these channel counts
// because the patch matrix never exists. `zrow` is a W-length zero row
// standing in for out-of-range neighbours; `init` seeds out with the bias
// (pass nullptr to accumulate into out as-is).
template <typename T>
void conv3_image(const T* __restrict x, const T* __restrict w, const T* __restrict init,
                 T* __restrict out, int Cin, int Cout, int H, int W, const T* zrow) {
  const long long HW = static_cast<long long>(H) * W;
  for (int co = 0; co < Cout; ++co) {
    T* oimg = out + co * HW;
    if (init != nullptr)
      for (long long i = 0; i < HW; ++i) oimg[i] = init[co];
    for (int ci = 0; ci < Cin; ++ci) {
      const T* ximg = x + ci * HW;
      const T* wk = w + (static_cast<long long>(co) * Cin + ci) * 9;
      const T w00 = wk[0], w01 = wk[1], w02 = wk[2];
      const T w10 = wk[3], w11 = wk[4], w12 = wk[5];
      const T w20 = wk[6], w21 = wk[7], w22 = wk[8];
      for (int i = 0; i < H; ++i) {
        const T* xm = i > 0 ? ximg + (i - 1) * W : zrow;
        const T* x0 = ximg + i * W;
        const T* xp = i + 1 < H ? ximg + (i + 1) * W : zrow;
        T* orow = oimg + i * W;
        orow[0] += w01 * xm[0] + w02 * xm[1] + w11 * x0[0] + w12 * x0[1] + w21 * xp[0] +
                   w22 * xp[1];
        for (int j = 1; j + 1 < W; ++j)
          orow[j] += w00 * xm[j - 1] + w01 * xm[j] + w02 * xm[j + 1] + w10 * x0[j - 1] +
                     w11 * x0[j] + w12 * x0[j + 1] + w20 * xp[j - 1] + w21 * xp[j] +
                     w22 * xp[j + 1];
        const int j = W - 1;
        orow[j] += w00 * xm[j - 1] + w01 * xm[j] + w10 * x0[j - 1] + w11 * x0[j] +
                   w20 * xp[j - 1] + w21 * xp[j];
      }
    }
  }
}

// Kernel gradient for the 3x3 stencil: dW(co,ci,a,b) += sum_ij gy(co,i,j) *
// xpad(ci, i+a-1, j+b-1), accumulated across calls (one call per sample).
template <typename T>
void conv3_dw_image(const T* __restrict x, const T* __restrict gy, T* __restrict dw, int Cin,
                    int Cout, int H, int W, const T* zrow) {
  const long long HW = static_cast<long long>(H) * W;
  for (int co = 0; co < Cout; ++co) {
    const T* gimg = gy + co * HW;
    for (int ci = 0; ci < Cin; ++ci) {
      const T* ximg = x + ci * HW;
      T a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0, a20 = 0, a21 = 0, a22 = 0;
      for (int i = 0; i < H; ++i) {
        const T* g = gimg + i * W;
        const T* xm = i > 0 ? ximg + (i - 1) * W : zrow;
        const T* x0 = ximg + i * W;
        const T* xp = i + 1 < H ? ximg + (i + 1) * W : zrow;
        a01 += g[0] * xm[0]; a02 += g[0] * xm[1];
        a11 += g[0] * x0[0]; a12 += g[0] * x0[1];
        a21 += g[0] * xp[0]; a22 += g[0] * xp[1];
        for (int j = 1; j + 1 < W; ++j) {
          const T gv = g[j];
          a00 += gv * xm[j - 1]; a01 += gv * xm[j]; a02 += gv * xm[j + 1];
          a10 += gv * x0[j - 1]; a11 += gv * x0[j]; a12 += gv * x0[j + 1];
          a20 += gv * xp[j - 1]; a21 += gv * xp[j]; a22 += gv * xp[j + 1];
        }
        const int j = W - 1;
        const T gv = g[j];
        a00 += gv * xm[j - 1]; a01 += gv * xm[j];
        a10 += gv * x0[j - 1]; a11 += gv * x0[j];
        a20 += gv * xp[j - 1]; a21 += gv * xp[j];
      }
      T* wk = dw + (static_cast<long long>(co) * Cin + ci) * 9;
      wk[0] += a00; wk[1] += a01; wk[2] += a02;
      wk[3] += a10; wk[4] += a11; wk[5] += a12;
      wk[6] += a20; wk[7] += a21; wk[8] += a22;
    }
  }
}

// Copy one sample into a border-padded layout [C][H+2][W+2] so the stencil
// kernels below never branch on image edges.
template <typename T>
void pad_image3(const T* x, int C, int H, int W, T* dst) {
  const long long Wp = W + 2, Hp = H + 2;
  for (int ci = 0; ci < C; ++ci) {
    T* img = dst + ci * Hp * Wp;
    std::memset(img, 0, sizeof(T) * Wp);
    std::memset(img + (Hp - 1) * Wp, 0, sizeof(T) * Wp);
    const T* src = x + static_cast<long long>(ci) * H * W;
    for (int r = 0; r < H; ++r) {
      T* d = img + (r + 1) * Wp;
      d[0] = T{0};
      std::memcpy(d + 1, src + static_cast<long long>(r) * W, sizeof(T) * W);
      d[W + 1] = T{0};
    }
  }
}

// Vectorized double-precision variants of the two stencil kernels for widths
// that are a multiple of 8. Auto-vectorization cannot keep the accumulators
// in registers across the channel loop (they would have to survive a
// runtime-selected pointer), so these are written with explicit vector types.
template <typename T>
inline bool conv3_use_simd(int H, int W) {
#if defined(__AVX2__) && defined(__FMA__)
  return std::is_same_v<T, double> && H >= 2 && W >= 8 && W % 8 == 0;
#else
  (void)H;
  (void)W;
  return false;
#endif
}

#if defined(__AVX2__) && defined(__FMA__)

// Adds one padded input row (all Cin channels) into the three output rows
// held in registers. Weight rows 0/1/2 of a 3x3 tap feed the output rows
// below/at/above the input row; kPrev/kNext drop the taps that would target
// a nonexistent output row. px0 points at (row, jb) in the padded image.
template <bool kPrev, bool kNext>
[[gnu::always_inline]] inline void conv3_row_avx2(const double* px0, long long stride,
                                                  const double* wbase, int Cin, __m256d& Ap0,
                                                  __m256d& Ap1, __m256d& Ac0, __m256d& Ac1,
                                                  __m256d& An0, __m256d& An1) {
  const double* px = px0;
  for (int ci = 0; ci < Cin; ++ci, px += stride) {
    const __m256d sm0 = _mm256_loadu_pd(px);
    const __m256d s00 = _mm256_loadu_pd(px + 1);
    const __m256d sp0 = _mm256_loadu_pd(px + 2);
    const __m256d sm1 = _mm256_loadu_pd(px + 4);
    const __m256d s01 = _mm256_loadu_pd(px + 5);
    const __m256d sp1 = _mm256_loadu_pd(px + 6);
    const double* wk = wbase + ci * 9;
    __m256d wv;
    if constexpr (kNext) {
      wv = _mm256_set1_pd(wk[0]);
      An0 = _mm256_fmadd_pd(wv, sm0, An0);
      An1 = _mm256_fmadd_pd(wv, sm1, An1);
      wv = _mm256_set1_pd(wk[1]);
      An0 = _mm256_fmadd_pd(wv, s00, An0);
      An1 = _mm256_fmadd_pd(wv, s01, An1);
      wv = _mm256_set1_pd(wk[2]);
      An0 = _mm256_fmadd_pd(wv, sp0, An0);
      An1 = _mm256_fmadd_pd(wv, sp1, An1);
    }
    wv = _mm256_set1_pd(wk[3]);
    Ac0 = _mm256_fmadd_pd(wv, sm0, Ac0);
    Ac1 = _mm256_fmadd_pd(wv, sm1, Ac1);
    wv = _mm256_set1_pd(wk[4]);
    Ac0 = _mm256_fmadd_pd(wv, s00, Ac0);
    Ac1 = _mm256_fmadd_pd(wv, s01, Ac1);
    wv = _mm256_set1_pd(wk[5]);
    Ac0 = _mm256_fmadd_pd(wv, sp0, Ac0);
    Ac1 = _mm256_fmadd_pd(wv, sp1, Ac1);
    if constexpr (kPrev) {
      wv = _mm256_set1_pd(wk[6]);
      Ap0 = _mm256_fmadd_pd(wv, sm0, Ap0);
      Ap1 = _mm256_fmadd_pd(wv, sm1, Ap1);
      wv = _mm256_set1_pd(wk[7]);
      Ap0 = _mm256_fmadd_pd(wv, s00, Ap0);
      Ap1 = _mm256_fmadd_pd(wv, s01, Ap1);
      wv = _mm256_set1_pd(wk[8]);
      Ap0 = _mm256_fmadd_pd(wv, sp0, Ap0);
      Ap1 = _mm256_fmadd_pd(wv, sp1, Ap1);
    }
  }
}

// Sliding-window form of conv3_image: input rows stream past once per output
// channel while three output rows accumulate in registers. xpad is the
// pad_image3 layout; bias may be null (zero init). kAccum adds into out
// instead of overwriting it.
template <bool kAccum>
void conv3_image_avx2(const double* __restrict xpad, const double* __restrict w,
                      const double* __restrict bias, double* __restrict out, int Cin, int Cout,
                      int H, int W) {
  const long long Wp = W + 2;
  const long long HWp = static_cast<long long>(H + 2) * Wp;
  const long long HW = static_cast<long long>(H) * W;
  const auto flush = [](double* orow, __m256d A0, __m256d A1) {
    if constexpr (kAccum) {
      A0 = _mm256_add_pd(A0, _mm256_loadu_pd(orow));
      A1 = _mm256_add_pd(A1, _mm256_loadu_pd(orow + 4));
    }
    _mm256_storeu_pd(orow, A0);
    _mm256_storeu_pd(orow + 4, A1);
  };
  for (int co = 0; co < Cout; ++co) {
    double* oimg = out + co * HW;
    const __m256d binit = bias ? _mm256_set1_pd(bias[co]) : _mm256_setzero_pd();
    const double* wbase = w + static_cast<long long>(co) * Cin * 9;
    for (int jb = 0; jb < W; jb += 8) {
      __m256d Ap0 = binit, Ap1 = binit, Ac0 = binit, Ac1 = binit, An0 = binit, An1 = binit;
      conv3_row_avx2<false, true>(xpad + Wp + jb, HWp, wbase, Cin, Ap0, Ap1, Ac0, Ac1, An0, An1);
      Ap0 = Ac0; Ap1 = Ac1;
      Ac0 = An0; Ac1 = An1;
      An0 = binit; An1 = binit;
      for (int r = 1; r + 1 < H; ++r) {
        conv3_row_avx2<true, true>(xpad + static_cast<long long>(r + 1) * Wp + jb, HWp, wbase,
                                   Cin, Ap0, Ap1, Ac0, Ac1, An0, An1);
        flush(oimg + static_cast<long long>(r - 1) * W + jb, Ap0, Ap1);
        Ap0 = Ac0; Ap1 = Ac1;
        Ac0 = An0; Ac1 = An1;
        An0 = binit; An1 = binit;
      }
      conv3_row_avx2<true, false>(xpad + static_cast<long long>(H) * Wp + jb, HWp, wbase, Cin,
                                  Ap0, Ap1, Ac0, Ac1, An0, An1);
      flush(oimg + static_cast<long long>(H - 2) * W + jb, Ap0, Ap1);
      flush(oimg + static_cast<long long>(H - 1) * W + jb, Ac0, Ac1);
    }
  }
}

inline double conv3_hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  const __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(_mm_add_sd(lo, _mm_unpackhi_pd(lo, lo)));
}

// conv3_dw_image on a padded input: nine vector accumulators, no edge
// branches. Accumulates into dw (one call per sample).
inline void conv3_dw_avx2(const double* __restrict xpad, const double* __restrict gy,
                          double* __restrict dw, int Cin, int Cout, int H, int W) {
  const long long Wp = W + 2;
  const long long HWp = static_cast<long long>(H + 2) * Wp;
  const long long HW = static_cast<long long>(H) * W;
  for (int co = 0; co < Cout; ++co) {
    const double* gimg = gy + co * HW;
    for (int ci = 0; ci < Cin; ++ci) {
      const double* ximg = xpad + ci * HWp;
      __m256d a00 = _mm256_setzero_pd(), a01 = a00, a02 = a00, a10 = a00, a11 = a00, a12 = a00,
              a20 = a00, a21 = a00, a22 = a00;
      for (int i = 0; i < H; ++i) {
        const double* g = gimg + static_cast<long long>(i) * W;
        const double* xm = ximg + static_cast<long long>(i) * Wp;
        const double* x0 = xm + Wp;
        const double* xp = x0 + Wp;
        for (int j = 0; j < W; j += 4) {
          const __m256d gv = _mm256_loadu_pd(g + j);
          a00 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(xm + j), a00);
          a01 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(xm + j + 1), a01);
          a02 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(xm + j + 2), a02);
          a10 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(x0 + j), a10);
          a11 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(x0 + j + 1), a11);
          a12 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(x0 + j + 2), a12);
          a20 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(xp + j), a20);
          a21 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(xp + j + 1), a21);
          a22 = _mm256_fmadd_pd(gv, _mm256_loadu_pd(xp + j + 2), a22);
        }
      }
      double* d = dw + (static_cast<long long>(co) * Cin + ci) * 9;
      d[0] += conv3_hsum(a00); d[1] += conv3_hsum(a01); d[2] += conv3_hsum(a02);
      d[3] += conv3_hsum(a10); d[4] += conv3_hsum(a11); d[5] += conv3_hsum(a12);
      d[6] += conv3_hsum(a20); d[7] += conv3_hsum(a21); d[8] += conv3_hsum(a22);
    }
  }
}

#endif  // __AVX2__ && __FMA__

}  // namespace detail

// Same convolution: stride 1, odd kernel, zero padding (k-1)/2. Input
// [N,Cin,H,W], kernel [Cout,Cin,k,k], bias [Cout] -> [N,Cout,H,W].
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias) {
  const Tensor<T>& x = input.value();
  const Tensor<T>& w = kernel.value();
  const Tensor<T>& b = bias.value();
  if (x.rank() != 4) check_arg(false, "conv2d: input must be rank 4, got " + shape_str(x.shape()));
  if (w.rank() != 4) check_arg(false, "conv2d: kernel must be rank 4, got " + shape_str(w.shape()));
  if (b.rank() != 1) check_arg(false, "conv2d: bias must be rank 1, got " + shape_str(b.shape()));
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Cin)
    check_arg(false, "conv2d: kernel expects " + std::to_string(w.dim(1)) +
                         " input channels, input has " + std::to_string(Cin));
  if (w.dim(3) != k) check_arg(false, "conv2d: kernel must be square, got " + shape_str(w.shape()));
  if (k % 2 != 1) check_arg(false, "conv2d: kernel size must be odd, got " + std::to_string(k));
  if (b.dim(0) != Cout)
    check_arg(false, "conv2d: bias length " + std::to_string(b.dim(0)) +
                         " != output channels " + std::to_string(Cout));
  const int pad = (k - 1) / 2;
  const int HW = H * W;
  const long long rows = static_cast<long long>(Cin) * k * k;
  const long long coln = rows * HW;

  // k == 3 takes the fused stencil path. Other kernel sizes go through
  // im2col+GEMM; there the dW rule needs the same column matrices the
  // forward pass builds, so keep them alive on the node when that is
  // affordable (past the cap the backward pass recomputes them).
  const bool keep_cols =
      k != 3 && static_cast<long long>(sizeof(T)) * coln * N <= (64LL << 20);
  std::shared_ptr<std::vector<T>> cols;
  if (keep_cols) cols = std::make_shared<std::vector<T>>(static_cast<size_t>(coln * N));

  Tensor<T> out({N, Cout, H, W});
  if (k == 3 && detail::conv3_use_simd<T>(H, W)) {
#if defined(__AVX2__) && defined(__FMA__)
    if constexpr (std::is_same_v<T, double>) {
      std::vector<double>& padbuf = detail::conv_scratch3<double>();
      padbuf.resize(static_cast<size_t>(Cin) * (H + 2) * (W + 2));
      for (int n = 0; n < N; ++n) {
        detail::pad_image3(x.data() + static_cast<long long>(n) * Cin * HW, Cin, H, W,
                           padbuf.data());
        detail::conv3_image_avx2<false>(padbuf.data(), w.data(), b.data(),
                                        out.data() + static_cast<long long>(n) * Cout * HW, Cin,
                                        Cout, H, W);
      }
    }
#endif
  } else if (k == 3) {
    std::vector<T>& zbuf = detail::conv_scratch2<T>();
    zbuf.assign(static_cast<size_t>(W), T{0});
    for (int n = 0; n < N; ++n)
      detail::conv3_image(x.data() + static_cast<long long>(n) * Cin * HW, w.data(), b.data(),
                          out.data() + static_cast<long long>(n) * Cout * HW, Cin, Cout, H, W,
                          zbuf.data());
  } else {
    std::vector<T>& colbuf = detail::conv_scratch<T>();
    if (!keep_cols) colbuf.resize(static_cast<size_t>(coln));
    Eigen::Map<const detail::MatRM<T>> Wm(w.data(), Cout, rows);
    for (int n = 0; n < N; ++n) {
      T* col = keep_cols ? cols->data() + coln * n : colbuf.data();
      detail::im2col(x.data() + static_cast<long long>(n) * Cin * HW, Cin, H, W, k, pad, col);
      Eigen::Map<const detail::MatRM<T>> Cm(col, rows, HW);
      Eigen::Map<detail::MatRM<T>> Om(out.data() + static_cast<long long>(n) * Cout * HW, Cout,
                                      HW);
      Om.noalias() = Wm * Cm;
      for (int co = 0; co < Cout; ++co) Om.row(co).array() += b.data()[co];
    }
  }

  const int ix = input.id, iw = kernel.id, ib = bias.id;
  return input.tape->emit(
      "conv2d", std::move(out), {ix, iw, ib},
      [ix, iw, ib, N, Cin, H, W, Cout, k, pad, cols](Tape<T>& t, const TapeNode<T>& n) {
        const int HW = H * W;
        const long long rows = static_cast<long long>(Cin) * k * k;
        const long long coln = rows * HW;
        const Tensor<T>& xv = t.node(ix).value;
        const Tensor<T>& wv = t.node(iw).value;
        const T* gy = n.grad.data();
        const bool need_dx = t.node(ix).requires_grad;
        const bool need_dw = t.node(iw).requires_grad;
        const bool need_db = t.node(ib).requires_grad;
        if (k == 3) {
          std::vector<T>& wrot = detail::conv_scratch<T>();
          if (need_dx) {
            // dx is the 3x3 stencil of gy with the kernel rotated 180
            // degrees and its channel axes swapped.
            wrot.resize(static_cast<size_t>(Cin) * Cout * 9);
            for (int co = 0; co < Cout; ++co)
              for (int ci = 0; ci < Cin; ++ci)
                for (int tap = 0; tap < 9; ++tap)
                  wrot[(static_cast<size_t>(ci) * Cout + co) * 9 + static_cast<size_t>(tap)] =
                      wv.data()[(static_cast<long long>(co) * Cin + ci) * 9 + (8 - tap)];
          }
          const auto add_db = [&](const T* g) {
            T* db = t.grad_buf(ib).data();
            for (int co = 0; co < Cout; ++co) {
              T s = T{0};
              const T* gc = g + static_cast<long long>(co) * HW;
              for (int i = 0; i < HW; ++i) s += gc[i];
              db[co] += s;
            }
          };
          if (detail::conv3_use_simd<T>(H, W)) {
#if defined(__AVX2__) && defined(__FMA__)
            if constexpr (std::is_same_v<T, double>) {
              std::vector<double>& xpad = detail::conv_scratch3<double>();
              std::vector<double>& gypad = detail::conv_scratch2<double>();
              if (need_dw) xpad.resize(static_cast<size_t>(Cin) * (H + 2) * (W + 2));
              if (need_dx) gypad.resize(static_cast<size_t>(Cout) * (H + 2) * (W + 2));
              for (int nn = 0; nn < N; ++nn) {
                const double* g = gy + static_cast<long long>(nn) * Cout * HW;
                if (need_dx) {
                  detail::pad_image3(g, Cout, H, W, gypad.data());
                  detail::conv3_image_avx2<true>(
                      gypad.data(), wrot.data(), nullptr,
                      t.grad_buf(ix).data() + static_cast<long long>(nn) * Cin * HW, Cout, Cin,
                      H, W);
                }
                if (need_dw) {
                  detail::pad_image3(xv.data() + static_cast<long long>(nn) * Cin * HW, Cin, H,
                                     W, xpad.data());
                  detail::conv3_dw_avx2(xpad.data(), g, t.grad_buf(iw).data(), Cin, Cout, H, W);
                }
                if (need_db) add_db(g);
              }
            }
#endif
            return;
          }
          std::vector<T>& zbuf = detail::conv_scratch2<T>();
          zbuf.assign(static_cast<size_t>(W), T{0});
          for (int nn = 0; nn < N; ++nn) {
            const T* g = gy + static_cast<long long>(nn) * Cout * HW;
            if (need_dx)
              detail::conv3_image(g, wrot.data(), static_cast<const T*>(nullptr),
                                  t.grad_buf(ix).data() + static_cast<long long>(nn) * Cin * HW,
                                  Cout, Cin, H, W, zbuf.data());
            if (need_dw)
              detail::conv3_dw_image(xv.data() + static_cast<long long>(nn) * Cin * HW, g,
                                     t.grad_buf(iw).data(), Cin, Cout, H, W, zbuf.data());
            if (need_db) add_db(g);
          }
          return;
        }
        std::vector<T>& colbuf = detail::conv_scratch<T>();
        std::vector<T>& tmpbuf = detail::conv_scratch2<T>();
        if (need_dw && !cols) colbuf.resize(static_cast<size_t>(coln));
        if (need_dx) tmpbuf.resize(static_cast<size_t>(coln));
        Eigen::Map<const detail::MatRM<T>> Wm(wv.data(), Cout, rows);
        for (int nn = 0; nn < N; ++nn) {
          Eigen::Map<const detail::MatRM<T>> Gm(gy + static_cast<long long>(nn) * Cout * HW, Cout,
                                                HW);
          if (need_dw) {
            const T* col;
            if (cols) {
              col = cols->data() + coln * nn;
            } else {
              detail::im2col(xv.data() + static_cast<long long>(nn) * Cin * HW, Cin, H, W, k, pad,
                             colbuf.data());
              col = colbuf.data();
            }
            Eigen::Map<const detail::MatRM<T>> Cm(col, rows, HW);
            Eigen::Map<detail::MatRM<T>> dWm(t.grad_buf(iw).data(), Cout, rows);
            dWm.noalias() += Gm * Cm.transpose();
          }
          if (need_db) {
            T* db = t.grad_buf(ib).data();
            for (int co = 0; co < Cout; ++co) db[co] += Gm.row(co).sum();
          }
          if (need_dx) {
            Eigen::Map<detail::MatRM<T>> Tm(tmpbuf.data(), rows, HW);
            Tm.noalias() = Wm.transpose() * Gm;
            detail::col2im_add(tmpbuf.data(), Cin, H, W, k, pad,
                               t.grad_buf(ix).data() + static_cast<long long>(nn) * Cin * HW);
          }
        }
      });
}

// 2x2 max pooling with stride 2. Gradient is routed to the (first, in
// row-major window order) maximal element of each window.
template <typename T>
Var<T> maxpool2(Var<T> input) {
  const Tensor<T>& x = input.value();
  if (x.rank() != 4) check_arg(false, "maxpool2: input must be rank 4, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 != 0 || W % 2 != 0)
    check_arg(false, "maxpool2: spatial extents must be even, got " + shape_str(x.shape()));
  const int Ho = H / 2, Wo = W / 2;
  Tensor<T> out({N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<long long>>(out.numel());
  const T* px = x.data();
  T* po = out.data();
  long long oi = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const long long base = (static_cast<long long>(n) * C + c) * H * W;
      for (int i = 0; i < Ho; ++i)
        for (int j = 0; j < Wo; ++j, ++oi) {
          long long best = base + static_cast<long long>(2 * i) * W + 2 * j;
          T bv = px[best];
          const long long cand[3] = {best + 1, best + W, best + W + 1};
          for (long long idx : cand)
            if (px[idx] > bv) {
              bv = px[idx];
              best = idx;
            }
          po[oi] = bv;
          (*argmax)[static_cast<size_t>(oi)] = best;
        }
    }
  const int ix = input.id;
  return input.tape->emit("maxpool2", std::move(out), {ix},
                          [ix, argmax](Tape<T>& t, const TapeNode<T>& n) {
                            Tensor<T>& gx = t.grad_buf(ix);
                            const T* g = n.grad.data();
                            T* dst = gx.data();
                            for (long long i = 0; i < n.value.numel(); ++i)
                              dst[(*argmax)[static_cast<size_t>(i)]] += g[i];
                          });
}

// Nearest-neighbour 2x upsampling: each pixel replicated into a 2x2 block.
template <typename T>
Var<T> upsample_nearest2(Var<T> input) {
  const Tensor<T>& x = input.value();
  if (x.rank() != 4)
    check_arg(false, "upsample_nearest2: input must be rank 4, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<T> out({N, C, 2 * H, 2 * W});
  const T* px = x.data();
  T* po = out.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const long long ib = (static_cast<long long>(n) * C + c) * H * W;
      const long long ob = (static_cast<long long>(n) * C + c) * 4 * H * W;
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const T v = px[ib + static_cast<long long>(i) * W + j];
          T* row0 = po + ob + static_cast<long long>(2 * i) * 2 * W + 2 * j;
          row0[0] = v;
          row0[1] = v;
          row0[2 * W] = v;
          row0[2 * W + 1] = v;
        }
    }
  const int ix = input.id;
  return input.tape->emit(
      "upsample_nearest2", std::move(out), {ix}, [ix, N, C, H, W](Tape<T>& t, const TapeNode<T>& n) {
        Tensor<T>& gx = t.grad_buf(ix);
        const T* g = n.grad.data();
        T* dst = gx.data();
        for (int nn = 0; nn < N; ++nn)
          for (int c = 0; c < C; ++c) {
            const long long ib = (static_cast<long long>(nn) * C + c) * H * W;
            const long long ob = (static_cast<long long>(nn) * C + c) * 4 * H * W;
            for (int i = 0; i < H; ++i)
              for (int j = 0; j < W; ++j) {
                const T* row0 = g + ob + static_cast<long long>(2 * i) * 2 * W + 2 * j;
                dst[ib + static_cast<long long>(i) * W + j] +=
                    row0[0] + row0[1] + row0[2 * W] + row0[2 * W + 1];
              }
          }
      });
}

// Frozen (eval-time) per-channel statistics plus their exponential moving
// average updated during training.
template <typename T>
struct BatchNormRunning {
  Tensor<T> mean;
  Tensor<T> var;

  explicit BatchNormRunning(int C = 1) : mean({C}, T{0}), var({C}, T{1}) {}
};

// Batch normalization over (N,H,W) per channel. Train mode uses batch
// statistics (population variance) and updates `running` in place by EMA;
// eval mode normalizes with the frozen running statistics. gamma/beta are
// the learned affine parameters.
template <typename T>
Var<T> batchnorm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormRunning<T>* running, bool training,
                 T eps = static_cast<T>(1e-5), T momentum = static_cast<T>(0.1)) {
  const Tensor<T>& x = input.value();
  if (x.rank() != 4) check_arg(false, "batchnorm: input must be rank 4, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (gamma.value().numel() != C || beta.value().numel() != C)
    check_arg(false, "batchnorm: gamma/beta length must equal channel count " + std::to_string(C));
  check_arg(eps > T{0}, "batchnorm: eps must be positive");
  check_arg(running != nullptr, "batchnorm: running statistics required");
  if (running->mean.numel() != C || running->var.numel() != C)
    check_arg(false,
              "batchnorm: running statistics length must equal channel count " + std::to_string(C));
  const long long HW = static_cast<long long>(H) * W;
  const long long m = static_cast<long long>(N) * HW;

  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(C), T{0});
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(C), T{0});
  const T* px = x.data();
  if (training) {
    std::vector<T> var(static_cast<size_t>(C), T{0});
    for (int c = 0; c < C; ++c) {
      T acc{0};
      for (int n = 0; n < N; ++n) {
        const T* p = px + (static_cast<long long>(n) * C + c) * HW;
        for (long long i = 0; i < HW; ++i) acc += p[i];
      }
      const T mu = acc / static_cast<T>(m);
      T vacc{0};
      for (int n = 0; n < N; ++n) {
        const T* p = px + (static_cast<long long>(n) * C + c) * HW;
        for (long long i = 0; i < HW; ++i) {
          const T d = p[i] - mu;
          vacc += d * d;
        }
      }
      const T v = vacc / static_cast<T>(m);
      (*mean)[static_cast<size_t>(c)] = mu;
      var[static_cast<size_t>(c)] = v;
      (*inv_std)[static_cast<size_t>(c)] = T{1} / std::sqrt(v + eps);
      running->mean.data()[c] = (T{1} - momentum) * running->mean.data()[c] + momentum * mu;
      running->var.data()[c] = (T{1} - momentum) * running->var.data()[c] + momentum * v;
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[static_cast<size_t>(c)] = running->mean.data()[c];
      (*inv_std)[static_cast<size_t>(c)] = T{1} / std::sqrt(running->var.data()[c] + eps);
    }
  }

  Tensor<T> out({N, C, H, W});
  const T* pg = gamma.value().data();
  const T* pb = beta.value().data();
  T* po = out.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const long long base = (static_cast<long long>(n) * C + c) * HW;
      const T mu = (*mean)[static_cast<size_t>(c)];
      const T is = (*inv_std)[static_cast<size_t>(c)];
      const T gc = pg[c], bc = pb[c];
      for (long long i = 0; i < HW; ++i) po[base + i] = gc * (px[base + i] - mu) * is + bc;
    }

  const int ix = input.id, ig = gamma.id, ibt = beta.id;
  return input.tape->emit(
      "batchnorm", std::move(out), {ix, ig, ibt},
      [ix, ig, ibt, N, C, HW, m, mean, inv_std, training](Tape<T>& t, const TapeNode<T>& n) {
        const T* gy = n.grad.data();
        const T* px = t.node(ix).value.data();
        const T* pg = t.node(ig).value.data();
        const bool need_dx = t.node(ix).requires_grad;
        const bool need_dg = t.node(ig).requires_grad;
        const bool need_db = t.node(ibt).requires_grad;
        for (int c = 0; c < C; ++c) {
          const T mu = (*mean)[static_cast<size_t>(c)];
          const T is = (*inv_std)[static_cast<size_t>(c)];
          // s1 = sum dy, s2 = sum dy * xhat over the channel.
          T s1{0}, s2{0};
          for (int nn = 0; nn < N; ++nn) {
            const long long base = (static_cast<long long>(nn) * C + c) * HW;
            for (long long i = 0; i < HW; ++i) {
              const T g = gy[base + i];
              s1 += g;
              s2 += g * (px[base + i] - mu) * is;
            }
          }
          if (need_dg) t.grad_buf(ig).data()[c] += s2;
          if (need_db) t.grad_buf(ibt).data()[c] += s1;
          if (need_dx) {
            T* dx = t.grad_buf(ix).data();
            const T gc = pg[c];
            if (training) {
              // Batch statistics depend on x; fused exact backward.
              const T inv_m = T{1} / static_cast<T>(m);
              for (int nn = 0; nn < N; ++nn) {
                const long long base = (static_cast<long long>(nn) * C + c) * HW;
                for (long long i = 0; i < HW; ++i) {
                  const T xh = (px[base + i] - mu) * is;
                  dx[base + i] += gc * is * (gy[base + i] - inv_m * s1 - xh * inv_m * s2);
                }
              }
            } else {
              // Frozen statistics: plain affine map.
              for (int nn = 0; nn < N; ++nn) {
                const long long base = (static_cast<long long>(nn) * C + c) * HW;
                for (long long i = 0; i < HW; ++i) dx[base + i] += gc * is * gy[base + i];
              }
            }
          }
        }
      });
}

// Concatenate along the channel axis: [N,Ca,H,W] + [N,Cb,H,W] -> [N,Ca+Cb,H,W],
// with a's channels first.
template <typename T>
Var<T> channel_concat(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b, "channel_concat");
  const Tensor<T>& xa = a.value();
  const Tensor<T>& xb = b.value();
  check_arg(xa.rank() == 4 && xb.rank() == 4, "channel_concat: inputs must be rank 4");
  if (xa.dim(0) != xb.dim(0) || xa.dim(2) != xb.dim(2) || xa.dim(3) != xb.dim(3))
    check_arg(false, "channel_concat: non-channel extents differ, " + shape_str(xa.shape()) +
                         " vs " + shape_str(xb.shape()));
  const int N = xa.dim(0), Ca = xa.dim(1), Cb = xb.dim(1), H = xa.dim(2), W = xa.dim(3);
  const long long HW = static_cast<long long>(H) * W;
  Tensor<T> out({N, Ca + Cb, H, W});
  T* po = out.data();
  for (int n = 0; n < N; ++n) {
    const T* pa = xa.data() + static_cast<long long>(n) * Ca * HW;
    const T* pb = xb.data() + static_cast<long long>(n) * Cb * HW;
    T* dst = po + static_cast<long long>(n) * (Ca + Cb) * HW;
    for (long long i = 0; i < Ca * HW; ++i) dst[i] = pa[i];
    for (long long i = 0; i < Cb * HW; ++i) dst[Ca * HW + i] = pb[i];
  }
  const int ia = a.id, ib = b.id;
  return a.tape->emit("channel_concat", std::move(out), {ia, ib},
                      [ia, ib, N, Ca, Cb, HW](Tape<T>& t, const TapeNode<T>& n) {
                        const T* g = n.grad.data();
                        for (int nn = 0; nn < N; ++nn) {
                          const T* src = g + static_cast<long long>(nn) * (Ca + Cb) * HW;
                          if (t.node(ia).requires_grad) {
                            T* da = t.grad_buf(ia).data() + static_cast<long long>(nn) * Ca * HW;
                            for (long long i = 0; i < Ca * HW; ++i) da[i] += src[i];
                          }
                          if (t.node(ib).requires_grad) {
                            T* db = t.grad_buf(ib).data() + static_cast<long long>(nn) * Cb * HW;
                            for (long long i = 0; i < Cb * HW; ++i) db[i] += src[Ca * HW + i];
                          }
                        }
                      });
}

// Inverted-dropout mask for a [N,C,H,W] activation: drop with probability p,
// scale survivors by 1/(1-p) so the expectation is preserved. Channel mode
// drops whole feature maps (one coin per (n,c)); element mode drops pixels
// independently. Mask consumption order is fixed (n-major, then c, then
// row-major pixels) so a seeded generator reproduces masks exactly.
template <typename T>
Tensor<T> dropout_mask(const Shape& shape, T p, bool per_element, Rng& rng) {
  check_arg(shape.size() == 4, "dropout_mask: shape must be rank 4");
  if (!(p >= T{0} && p < T{1}))
    check_arg(false, "dropout_mask: p must lie in [0,1), got " + std::to_string(p));
  Tensor<T> mask(shape, T{1});
  if (p == T{0}) return mask;
  const T keep_scale = T{1} / (T{1} - p);
  const int N = shape[0], C = shape[1];
  const long long HW = static_cast<long long>(shape[2]) * shape[3];
  T* pm = mask.data();
  if (per_element) {
    for (long long i = 0; i < mask.numel(); ++i)
      pm[i] = rng.bernoulli(static_cast<double>(p)) ? T{0} : keep_scale;
  } else {
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        const T v = rng.bernoulli(static_cast<double>(p)) ? T{0} : keep_scale;
        T* dst = pm + (static_cast<long long>(n) * C + c) * HW;
        for (long long i = 0; i < HW; ++i) dst[i] = v;
      }
  }
  return mask;
}

// Apply inverted dropout as a mask multiply. p == 0 returns the input
// untouched (bitwise identity, no generator draws).
template <typename T>
Var<T> apply_dropout(Var<T> x, T p, bool per_element, Rng& rng) {
  if (p == T{0}) return x;
  Tensor<T> mask = dropout_mask(x.value().shape(), p, per_element, rng);
  Var<T> m = x.tape->constant(std::move(mask));
  return mul(x, m);
}

}  // namespace fstk

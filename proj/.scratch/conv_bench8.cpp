// V5: AVX2 sliding window with peeled first/last rows (branch-free middle).
#include <immintrin.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <random>
#include <vector>

using clk = std::chrono::steady_clock;

static void v1(const double* __restrict x, const double* __restrict w, const double* __restrict b,
               double* __restrict out, int Cin, int Cout, int H, int W, const double* zrow) {
  const long long HW = static_cast<long long>(H) * W;
  for (int co = 0; co < Cout; ++co) {
    double* oimg = out + co * HW;
    for (long long i = 0; i < HW; ++i) oimg[i] = b[co];
    for (int ci = 0; ci < Cin; ++ci) {
      const double* ximg = x + ci * HW;
      const double* wk = w + (static_cast<long long>(co) * Cin + ci) * 9;
      const double w00 = wk[0], w01 = wk[1], w02 = wk[2];
      const double w10 = wk[3], w11 = wk[4], w12 = wk[5];
      const double w20 = wk[6], w21 = wk[7], w22 = wk[8];
      for (int i = 0; i < H; ++i) {
        const double* xm = i > 0 ? ximg + (i - 1) * W : zrow;
        const double* x0 = ximg + i * W;
        const double* xp = i + 1 < H ? ximg + (i + 1) * W : zrow;
        double* orow = oimg + i * W;
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

// One row's contribution of all Cin channels into three accumulator rows.
// px points at (r, jb) in padded image; wbase at this co's 9*Cin weights.
#define ROW_STEP(AP0, AP1, AC0, AC1, AN0, AN1, WOFF_N, WOFF_C, WOFF_P, DO_N, DO_P)            \
  do {                                                                                        \
    const double* px_ = px;                                                                   \
    for (int ci = 0; ci < Cin; ++ci, px_ += HWp) {                                            \
      const __m256d sm0 = _mm256_loadu_pd(px_);                                               \
      const __m256d s00 = _mm256_loadu_pd(px_ + 1);                                           \
      const __m256d sp0 = _mm256_loadu_pd(px_ + 2);                                           \
      const __m256d sm1 = _mm256_loadu_pd(px_ + 4);                                           \
      const __m256d s01 = _mm256_loadu_pd(px_ + 5);                                           \
      const __m256d sp1 = _mm256_loadu_pd(px_ + 6);                                           \
      const double* wk = wbase + ci * 9;                                                      \
      __m256d wv;                                                                             \
      if (DO_N) {                                                                             \
        wv = _mm256_set1_pd(wk[WOFF_N]);                                                      \
        AN0 = _mm256_fmadd_pd(wv, sm0, AN0);                                                  \
        AN1 = _mm256_fmadd_pd(wv, sm1, AN1);                                                  \
        wv = _mm256_set1_pd(wk[WOFF_N + 1]);                                                  \
        AN0 = _mm256_fmadd_pd(wv, s00, AN0);                                                  \
        AN1 = _mm256_fmadd_pd(wv, s01, AN1);                                                  \
        wv = _mm256_set1_pd(wk[WOFF_N + 2]);                                                  \
        AN0 = _mm256_fmadd_pd(wv, sp0, AN0);                                                  \
        AN1 = _mm256_fmadd_pd(wv, sp1, AN1);                                                  \
      }                                                                                       \
      wv = _mm256_set1_pd(wk[WOFF_C]);                                                        \
      AC0 = _mm256_fmadd_pd(wv, sm0, AC0);                                                    \
      AC1 = _mm256_fmadd_pd(wv, sm1, AC1);                                                    \
      wv = _mm256_set1_pd(wk[WOFF_C + 1]);                                                    \
      AC0 = _mm256_fmadd_pd(wv, s00, AC0);                                                    \
      AC1 = _mm256_fmadd_pd(wv, s01, AC1);                                                    \
      wv = _mm256_set1_pd(wk[WOFF_C + 2]);                                                    \
      AC0 = _mm256_fmadd_pd(wv, sp0, AC0);                                                    \
      AC1 = _mm256_fmadd_pd(wv, sp1, AC1);                                                    \
      if (DO_P) {                                                                             \
        wv = _mm256_set1_pd(wk[WOFF_P]);                                                      \
        AP0 = _mm256_fmadd_pd(wv, sm0, AP0);                                                  \
        AP1 = _mm256_fmadd_pd(wv, sm1, AP1);                                                  \
        wv = _mm256_set1_pd(wk[WOFF_P + 1]);                                                  \
        AP0 = _mm256_fmadd_pd(wv, s00, AP0);                                                  \
        AP1 = _mm256_fmadd_pd(wv, s01, AP1);                                                  \
        wv = _mm256_set1_pd(wk[WOFF_P + 2]);                                                  \
        AP0 = _mm256_fmadd_pd(wv, sp0, AP0);                                                  \
        AP1 = _mm256_fmadd_pd(wv, sp1, AP1);                                                  \
      }                                                                                       \
    }                                                                                         \
  } while (0)

static void v5(const double* __restrict xpad, const double* __restrict w,
               const double* __restrict b, double* __restrict out, int Cin, int Cout, int H,
               int W) {
  const long long Wp = W + 2;
  const long long HWp = static_cast<long long>(H) * Wp;
  const long long HW = static_cast<long long>(H) * W;
  for (int co = 0; co < Cout; ++co) {
    double* oimg = out + co * HW;
    const __m256d bias = _mm256_set1_pd(b[co]);
    const double* wbase = w + static_cast<long long>(co) * Cin * 9;
    for (int jb = 0; jb < W; jb += 8) {
      __m256d Ap0, Ap1, Ac0 = bias, Ac1 = bias, An0 = bias, An1 = bias;
      {  // r = 0: no previous row.
        const double* px = xpad + jb;
        ROW_STEP(Ap0, Ap1, Ac0, Ac1, An0, An1, 0, 3, 6, true, false);
      }
      Ap0 = Ac0; Ap1 = Ac1; Ac0 = An0; Ac1 = An1; An0 = bias; An1 = bias;
      for (int r = 1; r + 1 < H; ++r) {
        const double* px = xpad + static_cast<long long>(r) * Wp + jb;
        ROW_STEP(Ap0, Ap1, Ac0, Ac1, An0, An1, 0, 3, 6, true, true);
        double* orow = oimg + static_cast<long long>(r - 1) * W + jb;
        _mm256_storeu_pd(orow, Ap0);
        _mm256_storeu_pd(orow + 4, Ap1);
        Ap0 = Ac0; Ap1 = Ac1; Ac0 = An0; Ac1 = An1; An0 = bias; An1 = bias;
      }
      {  // r = H-1: no next row.
        const double* px = xpad + static_cast<long long>(H - 1) * Wp + jb;
        ROW_STEP(Ap0, Ap1, Ac0, Ac1, An0, An1, 0, 3, 6, false, true);
        double* orow = oimg + static_cast<long long>(H - 2) * W + jb;
        _mm256_storeu_pd(orow, Ap0);
        _mm256_storeu_pd(orow + 4, Ap1);
        orow = oimg + static_cast<long long>(H - 1) * W + jb;
        _mm256_storeu_pd(orow, Ac0);
        _mm256_storeu_pd(orow + 4, Ac1);
      }
    }
  }
}

int main() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  struct Case { int Cin, Cout, H; };
  std::vector<Case> cases = {{1, 8, 32}, {8, 8, 32}, {8, 16, 16}, {16, 16, 16},
                             {16, 32, 8}, {32, 32, 8}, {48, 16, 16}, {16, 16, 16},
                             {24, 8, 32}, {8, 8, 32}};
  const int N = 160;
  double t1 = 0, t5 = 0, maxd = 0;
  for (const Case& c : cases) {
    const int H = c.H, W = c.H, Wp = W + 2;
    const long long xin = static_cast<long long>(c.Cin) * H * W;
    const long long xo = static_cast<long long>(c.Cout) * H * W;
    std::vector<double> x(static_cast<size_t>(N) * xin), w(static_cast<size_t>(c.Cout) * c.Cin * 9),
        b(static_cast<size_t>(c.Cout));
    for (auto& v : x) v = nd(rng);
    for (auto& v : w) v = nd(rng);
    for (auto& v : b) v = nd(rng);
    std::vector<double> o1(static_cast<size_t>(N) * xo), o5(static_cast<size_t>(N) * xo);
    std::vector<double> zrow(static_cast<size_t>(W), 0.0);
    std::vector<double> xpad(static_cast<size_t>(c.Cin) * H * Wp);

    double best = 1e30;
    for (int rep = 0; rep < 3; ++rep) {
      auto t0 = clk::now();
      for (int n = 0; n < N; ++n)
        v1(x.data() + n * xin, w.data(), b.data(), o1.data() + n * xo, c.Cin, c.Cout, H, W,
           zrow.data());
      best = std::min(best, std::chrono::duration<double>(clk::now() - t0).count());
    }
    t1 += best;

    best = 1e30;
    for (int rep = 0; rep < 3; ++rep) {
      auto t0 = clk::now();
      for (int n = 0; n < N; ++n) {
        const double* xs = x.data() + n * xin;
        for (int ci = 0; ci < c.Cin; ++ci)
          for (int r = 0; r < H; ++r) {
            double* dst = xpad.data() + (static_cast<long long>(ci) * H + r) * Wp;
            dst[0] = 0.0;
            std::memcpy(dst + 1, xs + (static_cast<long long>(ci) * H + r) * W,
                        static_cast<size_t>(W) * sizeof(double));
            dst[W + 1] = 0.0;
          }
        v5(xpad.data(), w.data(), b.data(), o5.data() + n * xo, c.Cin, c.Cout, H, W);
      }
      best = std::min(best, std::chrono::duration<double>(clk::now() - t0).count());
    }
    t5 += best;
    for (size_t i = 0; i < o1.size(); ++i)
      maxd = std::max(maxd, std::abs(o1[i] - o5[i]) / (std::abs(o1[i]) + 1e-12));
  }
  std::printf("v1 %.4f s   v5(avx2 peeled) %.4f s   speedup %.2fx   maxrel %.1e\n", t1, t5,
              t1 / t5, maxd);
  return 0;
}

// V3: sliding-window accumulation, fixed 8-wide column blocks, padded rows.
// Plain C with fixed-size local arrays (SLP-vectorizable).
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

// xpad: [Cin][H][W+2] with zero borders, built by caller.
static void v3(const double* __restrict xpad, const double* __restrict w,
               const double* __restrict b, double* __restrict out, int Cin, int Cout, int H,
               int W) {
  const int Wp = W + 2;
  const long long HWp = static_cast<long long>(H) * Wp;
  const long long HW = static_cast<long long>(H) * W;
  constexpr int B = 8;
  for (int co = 0; co < Cout; ++co) {
    double* oimg = out + co * HW;
    const double bias = b[co];
    for (int jb = 0; jb < W; jb += B) {
      double Aprev[B], Acur[B], Anext[B], Adump[B];
      for (int t = 0; t < B; ++t) { Aprev[t] = 0; Acur[t] = bias; Anext[t] = bias; }
      for (int r = 0; r < H; ++r) {
        double* ap = r > 0 ? Aprev : Adump;
        double* an = r + 1 < H ? Anext : Adump;
        for (int ci = 0; ci < Cin; ++ci) {
          const double* px = xpad + ci * HWp + static_cast<long long>(r) * Wp + jb;
          const double* wk = w + (static_cast<long long>(co) * Cin + ci) * 9;
          const double w00 = wk[0], w01 = wk[1], w02 = wk[2];
          const double w10 = wk[3], w11 = wk[4], w12 = wk[5];
          const double w20 = wk[6], w21 = wk[7], w22 = wk[8];
          for (int t = 0; t < B; ++t) {
            const double sm = px[t], s0 = px[t + 1], sp = px[t + 2];
            an[t] += w00 * sm + w01 * s0 + w02 * sp;
            Acur[t] += w10 * sm + w11 * s0 + w12 * sp;
            ap[t] += w20 * sm + w21 * s0 + w22 * sp;
          }
        }
        if (r > 0) std::memcpy(oimg + static_cast<long long>(r - 1) * W + jb, Aprev, sizeof Aprev);
        for (int t = 0; t < B; ++t) { Aprev[t] = Acur[t]; Acur[t] = an[t]; Anext[t] = bias; }
      }
      std::memcpy(oimg + static_cast<long long>(H - 1) * W + jb, Aprev, sizeof Aprev);
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
  double t1 = 0, t3 = 0, tpad = 0, maxd = 0;
  for (const Case& c : cases) {
    const int H = c.H, W = c.H, Wp = W + 2;
    const long long xin = static_cast<long long>(c.Cin) * H * W;
    const long long xo = static_cast<long long>(c.Cout) * H * W;
    std::vector<double> x(static_cast<size_t>(N) * xin), w(static_cast<size_t>(c.Cout) * c.Cin * 9),
        b(static_cast<size_t>(c.Cout));
    for (auto& v : x) v = nd(rng);
    for (auto& v : w) v = nd(rng);
    for (auto& v : b) v = nd(rng);
    std::vector<double> o1(static_cast<size_t>(N) * xo), o3(static_cast<size_t>(N) * xo);
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
    double bestpad = 1e30;
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
        if (n == 0 && rep == 0) { /* keep */ }
        v3(xpad.data(), w.data(), b.data(), o3.data() + n * xo, c.Cin, c.Cout, H, W);
      }
      best = std::min(best, std::chrono::duration<double>(clk::now() - t0).count());
    }
    t3 += best;
    for (size_t i = 0; i < o1.size(); ++i)
      maxd = std::max(maxd, std::abs(o1[i] - o3[i]) / (std::abs(o1[i]) + 1e-12));
    (void)bestpad; (void)tpad;
  }
  std::printf("v1 %.4f s   v3(sliding+pad) %.4f s   speedup %.2fx   maxrel %.1e\n", t1, t3,
              t1 / t3, maxd);
  return 0;
}

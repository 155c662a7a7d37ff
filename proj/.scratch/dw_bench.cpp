#include <chrono>
#include <cstdio>
#include <random>
#include <vector>

using clk = std::chrono::steady_clock;

// current: 9 accumulators, 4 streams
static void dwA(const double* __restrict x, const double* __restrict gy, double* __restrict dw,
                int Cin, int Cout, int H, int W, const double* zrow) {
  const long long HW = static_cast<long long>(H) * W;
  for (int co = 0; co < Cout; ++co) {
    const double* gimg = gy + co * HW;
    for (int ci = 0; ci < Cin; ++ci) {
      const double* ximg = x + ci * HW;
      double a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0, a20 = 0, a21 = 0, a22 = 0;
      for (int i = 0; i < H; ++i) {
        const double* g = gimg + i * W;
        const double* xm = i > 0 ? ximg + (i - 1) * W : zrow;
        const double* x0 = ximg + i * W;
        const double* xp = i + 1 < H ? ximg + (i + 1) * W : zrow;
        a01 += g[0] * xm[0]; a02 += g[0] * xm[1];
        a11 += g[0] * x0[0]; a12 += g[0] * x0[1];
        a21 += g[0] * xp[0]; a22 += g[0] * xp[1];
        for (int j = 1; j + 1 < W; ++j) {
          const double gv = g[j];
          a00 += gv * xm[j - 1]; a01 += gv * xm[j]; a02 += gv * xm[j + 1];
          a10 += gv * x0[j - 1]; a11 += gv * x0[j]; a12 += gv * x0[j + 1];
          a20 += gv * xp[j - 1]; a21 += gv * xp[j]; a22 += gv * xp[j + 1];
        }
        const int j = W - 1;
        const double gv = g[j];
        a00 += gv * xm[j - 1]; a01 += gv * xm[j];
        a10 += gv * x0[j - 1]; a11 += gv * x0[j];
        a20 += gv * xp[j - 1]; a21 += gv * xp[j];
      }
      double* wk = dw + (static_cast<long long>(co) * Cin + ci) * 9;
      wk[0] += a00; wk[1] += a01; wk[2] += a02;
      wk[3] += a10; wk[4] += a11; wk[5] += a12;
      wk[6] += a20; wk[7] += a21; wk[8] += a22;
    }
  }
}

// split: one weight row (3 accumulators) per pass, 2 streams
static void dwB(const double* __restrict x, const double* __restrict gy, double* __restrict dw,
                int Cin, int Cout, int H, int W, const double* zrow) {
  const long long HW = static_cast<long long>(H) * W;
  for (int co = 0; co < Cout; ++co) {
    const double* gimg = gy + co * HW;
    for (int ci = 0; ci < Cin; ++ci) {
      const double* ximg = x + ci * HW;
      double acc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
      for (int dy = 0; dy < 3; ++dy) {
        double a0 = 0, a1 = 0, a2 = 0;
        for (int i = 0; i < H; ++i) {
          const int si = i + dy - 1;
          const double* g = gimg + i * W;
          const double* xs = (si < 0 || si >= H) ? zrow : ximg + si * W;
          a1 += g[0] * xs[0]; a2 += g[0] * xs[1];
          for (int j = 1; j + 1 < W; ++j) {
            const double gv = g[j];
            a0 += gv * xs[j - 1]; a1 += gv * xs[j]; a2 += gv * xs[j + 1];
          }
          const int j = W - 1;
          a0 += g[j] * xs[j - 1]; a1 += g[j] * xs[j];
        }
        acc[dy * 3 + 0] = a0; acc[dy * 3 + 1] = a1; acc[dy * 3 + 2] = a2;
      }
      double* wk = dw + (static_cast<long long>(co) * Cin + ci) * 9;
      for (int t = 0; t < 9; ++t) wk[t] += acc[t];
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
  double tA = 0, tB = 0, maxd = 0;
  for (const Case& c : cases) {
    const int H = c.H, W = c.H;
    const long long xin = static_cast<long long>(c.Cin) * H * W;
    const long long xo = static_cast<long long>(c.Cout) * H * W;
    std::vector<double> x(static_cast<size_t>(N) * xin), g(static_cast<size_t>(N) * xo);
    for (auto& v : x) v = nd(rng);
    for (auto& v : g) v = nd(rng);
    std::vector<double> dA(static_cast<size_t>(c.Cout) * c.Cin * 9, 0.0), dB = dA;
    std::vector<double> zrow(static_cast<size_t>(W), 0.0);
    auto bench = [&](auto&& fn, double& acc) {
      double best = 1e30;
      for (int rep = 0; rep < 3; ++rep) {
        auto t0 = clk::now();
        for (int n = 0; n < N; ++n) fn(n);
        best = std::min(best, std::chrono::duration<double>(clk::now() - t0).count());
      }
      acc += best;
    };
    bench([&](int n) { dwA(x.data() + n * xin, g.data() + n * xo, dA.data(), c.Cin, c.Cout, H, W, zrow.data()); }, tA);
    bench([&](int n) { dwB(x.data() + n * xin, g.data() + n * xo, dB.data(), c.Cin, c.Cout, H, W, zrow.data()); }, tB);
    for (size_t i = 0; i < dA.size(); ++i)
      maxd = std::max(maxd, std::abs(dA[i] - dB[i]) / (std::abs(dA[i]) + 1e-12));
  }
  std::printf("dwA(9acc) %.4f s   dwB(3x3acc) %.4f s   ratio %.2fx   maxrel %.1e\n", tA, tB,
              tA / tB, maxd);
  return 0;
}

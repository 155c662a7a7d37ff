// Stencil variants: V1 current 9-load row kernel, V2 sliding-window scatter
// (each input row feeds out rows i-1,i,i+1 in one pass, column-blocked).
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

// scatter: one pass over input rows; row r updates out rows r-1, r, r+1.
// Processes a whole row at a time; per input row load 3 shifted variants
// once and FMA into three out rows.
static void v2(const double* __restrict x, const double* __restrict w, const double* __restrict b,
               double* __restrict out, int Cin, int Cout, int H, int W,
               double* __restrict shiftbuf) {
  const long long HW = static_cast<long long>(H) * W;
  // shiftbuf: 2 rows of W: left-shifted and right-shifted copies
  for (int co = 0; co < Cout; ++co) {
    double* oimg = out + co * HW;
    for (long long i = 0; i < HW; ++i) oimg[i] = b[co];
    for (int ci = 0; ci < Cin; ++ci) {
      const double* ximg = x + ci * HW;
      const double* wk = w + (static_cast<long long>(co) * Cin + ci) * 9;
      const double w00 = wk[0], w01 = wk[1], w02 = wk[2];
      const double w10 = wk[3], w11 = wk[4], w12 = wk[5];
      const double w20 = wk[6], w21 = wk[7], w22 = wk[8];
      for (int r = 0; r < H; ++r) {
        const double* xr = ximg + r * W;
        double* oL = shiftbuf;          // x shifted left  (xr[j+1])
        double* oR = shiftbuf + W;      // x shifted right (xr[j-1])
        for (int j = 0; j + 1 < W; ++j) oL[j] = xr[j + 1];
        oL[W - 1] = 0.0;
        oR[0] = 0.0;
        for (int j = 1; j < W; ++j) oR[j] = xr[j - 1];
        if (r > 0) {
          double* om = oimg + (r - 1) * W;
          for (int j = 0; j < W; ++j) om[j] += w20 * oR[j] + w21 * xr[j] + w22 * oL[j];
        }
        {
          double* o0 = oimg + r * W;
          for (int j = 0; j < W; ++j) o0[j] += w10 * oR[j] + w11 * xr[j] + w12 * oL[j];
        }
        if (r + 1 < H) {
          double* op = oimg + (r + 1) * W;
          for (int j = 0; j < W; ++j) op[j] += w00 * oR[j] + w01 * xr[j] + w02 * oL[j];
        }
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
  double t1 = 0, t2 = 0, maxd = 0;
  for (const Case& c : cases) {
    const int H = c.H, W = c.H;
    const long long xin = static_cast<long long>(c.Cin) * H * W;
    const long long xo = static_cast<long long>(c.Cout) * H * W;
    std::vector<double> x(static_cast<size_t>(N) * xin), w(static_cast<size_t>(c.Cout) * c.Cin * 9),
        b(static_cast<size_t>(c.Cout));
    for (auto& v : x) v = nd(rng);
    for (auto& v : w) v = nd(rng);
    for (auto& v : b) v = nd(rng);
    std::vector<double> o1(static_cast<size_t>(N) * xo), o2(static_cast<size_t>(N) * xo);
    std::vector<double> zrow(static_cast<size_t>(W), 0.0), sbuf(static_cast<size_t>(2) * W);

    auto bench = [&](auto&& fn, std::vector<double>& out, double& acc) {
      double best = 1e30;
      for (int rep = 0; rep < 3; ++rep) {
        auto t0 = clk::now();
        for (int n = 0; n < N; ++n) fn(n, out);
        best = std::min(best, std::chrono::duration<double>(clk::now() - t0).count());
      }
      acc += best;
    };
    bench([&](int n, std::vector<double>& o) {
      v1(x.data() + n * xin, w.data(), b.data(), o.data() + n * xo, c.Cin, c.Cout, H, W,
         zrow.data());
    }, o1, t1);
    bench([&](int n, std::vector<double>& o) {
      v2(x.data() + n * xin, w.data(), b.data(), o.data() + n * xo, c.Cin, c.Cout, H, W,
         sbuf.data());
    }, o2, t2);
    for (size_t i = 0; i < o1.size(); ++i)
      maxd = std::max(maxd, std::abs(o1[i] - o2[i]) / (std::abs(o1[i]) + 1e-12));
  }
  std::printf("v1 %.4f s   v2(scatter) %.4f s   speedup %.2fx   maxrel %.1e\n", t1, t2, t1 / t2,
              maxd);
  return 0;
}

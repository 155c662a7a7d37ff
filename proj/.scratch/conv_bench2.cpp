// Direct 3x3 conv: fused 9-tap row kernel, plain loops for the vectorizer.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <random>
#include <vector>

#include "fstk/nn.hpp"
#include "fstk/tape.hpp"

using namespace fstk;
using clk = std::chrono::steady_clock;

// One output image: out[co] = b[co] + sum_ci stencil(x[ci], w[co][ci]).
static void conv3_image(const double* __restrict x, const double* __restrict w,
                        const double* __restrict b, double* __restrict out, int Cin, int Cout,
                        int H, int W) {
  static thread_local std::vector<double> zrow_buf;
  zrow_buf.assign(static_cast<size_t>(W), 0.0);
  const double* zrow = zrow_buf.data();
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
        // left edge
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

int main() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> nd;
  auto fill = [&](Tensor<double>& t) {
    for (long long i = 0; i < t.numel(); ++i) t[i] = nd(rng);
  };
  struct Case { int Cin, Cout, H; };
  std::vector<Case> cases = {{1, 8, 32}, {8, 8, 32}, {8, 16, 16}, {16, 16, 16},
                             {16, 32, 8}, {32, 32, 8}, {48, 16, 16}, {16, 16, 16},
                             {24, 8, 32}, {8, 8, 32}};
  const int N = 160;
  double t_gemm = 0, t_direct = 0, max_rel = 0;
  for (const Case& c : cases) {
    Tensor<double> x({N, c.Cin, c.H, c.H}), w({c.Cout, c.Cin, 3, 3}), b({c.Cout});
    fill(x); fill(w); fill(b);
    Tensor<double> ref;
    {
      Tape<double> warm;
      (void)conv2d(warm.constant(x), warm.constant(w), warm.constant(b));
      auto t0 = clk::now();
      for (int r = 0; r < 3; ++r) {
        Tape<double> tp;
        auto o = conv2d(tp.constant(x), tp.constant(w), tp.constant(b));
        if (r == 0) ref = o.value();
      }
      t_gemm += std::chrono::duration<double>(clk::now() - t0).count() / 3;
    }
    Tensor<double> out({N, c.Cout, c.H, c.H});
    auto t0 = clk::now();
    for (int r = 0; r < 3; ++r)
      for (int n = 0; n < N; ++n)
        conv3_image(x.data() + static_cast<long long>(n) * c.Cin * c.H * c.H, w.data(), b.data(),
                    out.data() + static_cast<long long>(n) * c.Cout * c.H * c.H, c.Cin, c.Cout,
                    c.H, c.H);
    t_direct += std::chrono::duration<double>(clk::now() - t0).count() / 3;
    for (long long i = 0; i < out.numel(); ++i) {
      double d = std::abs(out[i] - ref[i]) / (std::abs(ref[i]) + 1e-12);
      if (d > max_rel) max_rel = d;
    }
  }
  std::printf("fwd: gemm %.4f s  direct %.4f s  speedup %.2fx  max rel %.2e\n", t_gemm, t_direct,
              t_gemm / t_direct, max_rel);
  return 0;
}

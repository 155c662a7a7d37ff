// Direct 3x3 stencil conv prototype vs im2col+GEMM path.
#include <Eigen/Core>
#include <chrono>
#include <cstdio>
#include <random>
#include <vector>

#include "fstk/nn.hpp"
#include "fstk/tape.hpp"

using namespace fstk;
using clk = std::chrono::steady_clock;
using Arr = Eigen::Array<double, Eigen::Dynamic, 1>;
using CMap = Eigen::Map<const Arr>;
using MMap = Eigen::Map<Arr>;

// out[co] += sum_ci 3x3 stencil of x[ci]; zero padding; w is [Cout,Cin,3,3].
static void conv3_image(const double* x, const double* w, const double* b, double* out, int Cin,
                        int Cout, int H, int W) {
  for (int co = 0; co < Cout; ++co) {
    double* oimg = out + static_cast<long long>(co) * H * W;
    for (int i = 0; i < H * W; ++i) oimg[i] = b[co];
    for (int ci = 0; ci < Cin; ++ci) {
      const double* ximg = x + static_cast<long long>(ci) * H * W;
      const double* wk = w + ((static_cast<long long>(co) * Cin + ci) * 9);
      for (int i = 0; i < H; ++i) {
        double* orow = oimg + static_cast<long long>(i) * W;
        MMap o0(orow, W - 1), o1(orow, W), o2(orow + 1, W - 1);
        for (int dy = -1; dy <= 1; ++dy) {
          const int si = i + dy;
          if (si < 0 || si >= H) continue;
          const double* xrow = ximg + static_cast<long long>(si) * W;
          const double* wr = wk + (dy + 1) * 3;
          // dx = -1: out(i, 1..) += w * x(si, 0..W-2)
          o2 += wr[0] * CMap(xrow, W - 1);
          o1 += wr[1] * CMap(xrow, W);
          o0 += wr[2] * CMap(xrow + 1, W - 1);
        }
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
  // desk U-net layer mix at batch 160
  std::vector<Case> cases = {{1, 8, 32}, {8, 8, 32}, {8, 16, 16}, {16, 16, 16},
                             {16, 32, 8}, {32, 32, 8}, {48, 16, 16}, {16, 16, 16},
                             {24, 8, 32}, {8, 8, 32}};
  const int N = 160;

  double t_gemm = 0, t_direct = 0, max_rel = 0;
  for (const Case& c : cases) {
    Tensor<double> x({N, c.Cin, c.H, c.H}), w({c.Cout, c.Cin, 3, 3}), b({c.Cout});
    fill(x); fill(w); fill(b);

    // existing path (tape forward only)
    Tensor<double> ref;
    {
      Tape<double> tape;
      auto vx = tape.constant(x);
      auto vw = tape.constant(w);
      auto vb = tape.constant(b);
      auto vo = conv2d(vx, vw, vb);   // warm scratch
      auto t0 = clk::now();
      for (int r = 0; r < 3; ++r) {
        Tape<double> tp;
        auto o = conv2d(tp.constant(x), tp.constant(w), tp.constant(b));
        if (r == 0) ref = o.value();
      }
      t_gemm += std::chrono::duration<double>(clk::now() - t0).count() / 3;
    }

    // direct path
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

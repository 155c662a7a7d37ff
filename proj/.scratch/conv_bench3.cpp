// Direct 3x3 backward prototypes: dx (rot180 stencil) and dW (shifted dots).
#include <chrono>
#include <cstdio>
#include <random>
#include <vector>

#include "fstk/nn.hpp"
#include "fstk/tape.hpp"

using namespace fstk;
using clk = std::chrono::steady_clock;

static void conv3_image_acc(const double* __restrict x, const double* __restrict w,
                            double* __restrict out, int Cin, int Cout, int H, int W,
                            const double* zrow) {
  const long long HW = static_cast<long long>(H) * W;
  for (int co = 0; co < Cout; ++co) {
    double* oimg = out + co * HW;
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

// dW(co,ci,dy,dx) += sum_ij gy(co,i,j) * xpad(ci,i+dy-1,j+dx-1)
static void conv3_dw_image(const double* __restrict x, const double* __restrict gy,
                           double* __restrict dw, int Cin, int Cout, int H, int W,
                           const double* zrow) {
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
        // j = 0 edge (xleft missing)
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
  double t_ref = 0, t_direct = 0;
  double max_dx = 0, max_dw = 0, max_db = 0;
  for (const Case& c : cases) {
    const int H = c.H, W = c.H;
    const long long xin = static_cast<long long>(c.Cin) * H * W;
    const long long xout = static_cast<long long>(c.Cout) * H * W;
    Tensor<double> x({N, c.Cin, H, W}), w({c.Cout, c.Cin, 3, 3}), b({c.Cout});
    Tensor<double> gy({N, c.Cout, H, W});
    fill(x); fill(w); fill(b); fill(gy);

    // reference grads via the existing tape backward (seeded with gy)
    Tensor<double> rdx, rdw, rdb;
    {
      auto t0 = clk::now();
      Tape<double> tp;
      auto vx = tp.leaf(x, true);
      auto vw = tp.leaf(w, true);
      auto vb = tp.leaf(b, true);
      auto vo = conv2d(vx, vw, vb);
      // scalar = sum(gy * out) so that d/dout = gy
      auto vg = tp.constant(gy);
      auto s = sum(mul(vo, vg));
      tp.backward(s);
      rdx = tp.grad(vx); rdw = tp.grad(vw); rdb = tp.grad(vb);
      t_ref += std::chrono::duration<double>(clk::now() - t0).count();
    }

    // direct backward
    Tensor<double> dx({N, c.Cin, H, W}), dw({c.Cout, c.Cin, 3, 3}), db({c.Cout});
    std::vector<double> zrow(static_cast<size_t>(W), 0.0);
    // rotated+transposed weights for dx
    Tensor<double> wr({c.Cin, c.Cout, 3, 3});
    for (int co = 0; co < c.Cout; ++co)
      for (int ci = 0; ci < c.Cin; ++ci)
        for (int t = 0; t < 9; ++t)
          wr[( (static_cast<long long>(ci) * c.Cout + co) * 9) + t] =
              w[((static_cast<long long>(co) * c.Cin + ci) * 9) + (8 - t)];
    auto t0 = clk::now();
    for (int n = 0; n < N; ++n) {
      conv3_image_acc(gy.data() + n * xout, wr.data(), dx.data() + n * xin, c.Cout, c.Cin, H, W,
                      zrow.data());
      conv3_dw_image(x.data() + n * xin, gy.data() + n * xout, dw.data(), c.Cin, c.Cout, H, W,
                     zrow.data());
      for (int co = 0; co < c.Cout; ++co) {
        const double* g = gy.data() + n * xout + static_cast<long long>(co) * H * W;
        double s = 0;
        for (int i = 0; i < H * W; ++i) s += g[i];
        db[co] += s;
      }
    }
    t_direct += std::chrono::duration<double>(clk::now() - t0).count();

    auto maxrel = [](const Tensor<double>& a, const Tensor<double>& r) {
      double m = 0;
      for (long long i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(a[i] - r[i]) / (std::abs(r[i]) + 1e-12));
      return m;
    };
    max_dx = std::max(max_dx, maxrel(dx, rdx));
    max_dw = std::max(max_dw, maxrel(dw, rdw));
    max_db = std::max(max_db, maxrel(db, rdb));
  }
  std::printf("bwd: ref(full fwd+bwd) %.4f s  direct(bwd only) %.4f s\n", t_ref, t_direct);
  std::printf("rel err: dx %.2e  dw %.2e  db %.2e\n", max_dx, max_dw, max_db);
  return 0;
}

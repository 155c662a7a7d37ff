// Verify conv2d (SIMD dispatch) forward + backward against naive loops.
#include <cstdio>
#include <random>
#include <vector>

#include "fstk/nn.hpp"

using namespace fstk;

int main() {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  struct Case { int N, Cin, Cout, H, W; };
  // Desk shapes (SIMD path) + non-multiple-of-8 and H=1 (generic path).
  std::vector<Case> cases = {{2, 1, 8, 32, 32},  {2, 8, 16, 16, 16}, {1, 16, 32, 8, 8},
                             {2, 48, 16, 16, 16}, {1, 3, 5, 7, 10},  {1, 2, 3, 1, 8},
                             {1, 4, 4, 6, 12},    {2, 24, 8, 32, 32}};
  double worst_f = 0, worst_dx = 0, worst_dw = 0, worst_db = 0;
  for (const auto& c : cases) {
    Tensor<double> x({c.N, c.Cin, c.H, c.W}), w({c.Cout, c.Cin, 3, 3}), b({c.Cout});
    for (auto& v : x.vec()) v = nd(rng);
    for (auto& v : w.vec()) v = nd(rng);
    for (auto& v : b.vec()) v = nd(rng);
    Tensor<double> gy({c.N, c.Cout, c.H, c.W});
    for (auto& v : gy.vec()) v = nd(rng);

    Tape<double> tape;
    auto vx = tape.leaf(x, true);
    auto vw = tape.leaf(w, true);
    auto vb = tape.leaf(b, true);
    auto out = conv2d(vx, vw, vb);
    auto seed = tape.constant(gy);
    auto loss = sum(mul(out, seed));
    tape.backward(loss);
    const Tensor<double>& dx = tape.grad(vx);
    const Tensor<double>& dw = tape.grad(vw);
    const Tensor<double>& db = tape.grad(vb);

    // Naive reference.
    Tensor<double> ref({c.N, c.Cout, c.H, c.W});
    Tensor<double> rdx({c.N, c.Cin, c.H, c.W}), rdw({c.Cout, c.Cin, 3, 3}), rdb({c.Cout});
    rdx.fill(0.0); rdw.fill(0.0); rdb.fill(0.0);
    for (int n = 0; n < c.N; ++n)
      for (int co = 0; co < c.Cout; ++co)
        for (int i = 0; i < c.H; ++i)
          for (int j = 0; j < c.W; ++j) {
            double s = b.vec()[co];
            for (int ci = 0; ci < c.Cin; ++ci)
              for (int a = 0; a < 3; ++a)
                for (int bb = 0; bb < 3; ++bb) {
                  const int si = i + a - 1, sj = j + bb - 1;
                  if (si < 0 || si >= c.H || sj < 0 || sj >= c.W) continue;
                  s += w.at4(co, ci, a, bb) * x.at4(n, ci, si, sj);
                }
            ref.at4(n, co, i, j) = s;
            const double g = gy.at4(n, co, i, j);
            rdb.vec()[co] += g;
            for (int ci = 0; ci < c.Cin; ++ci)
              for (int a = 0; a < 3; ++a)
                for (int bb = 0; bb < 3; ++bb) {
                  const int si = i + a - 1, sj = j + bb - 1;
                  if (si < 0 || si >= c.H || sj < 0 || sj >= c.W) continue;
                  rdw.at4(co, ci, a, bb) += g * x.at4(n, ci, si, sj);
                  rdx.at4(n, ci, si, sj) += g * w.at4(co, ci, a, bb);
                }
          }
    auto relmax = [](const Tensor<double>& got, const Tensor<double>& want) {
      double m = 0;
      for (long long i = 0; i < want.numel(); ++i)
        m = std::max(m, std::abs(got.data()[i] - want.data()[i]) /
                            (std::abs(want.data()[i]) + 1e-12));
      return m;
    };
    worst_f = std::max(worst_f, relmax(out.value(), ref));
    worst_dx = std::max(worst_dx, relmax(dx, rdx));
    worst_dw = std::max(worst_dw, relmax(dw, rdw));
    worst_db = std::max(worst_db, relmax(db, rdb));
  }
  std::printf("fwd %.2e  dx %.2e  dw %.2e  db %.2e\n", worst_f, worst_dx, worst_dw, worst_db);
  return (worst_f < 1e-11 && worst_dx < 1e-11 && worst_dw < 1e-11 && worst_db < 1e-11) ? 0 : 1;
}

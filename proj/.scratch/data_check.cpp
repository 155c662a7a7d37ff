#include <cmath>
#include <cstdio>

#include "fstk/dataspace.hpp"
#include "fstk/io.hpp"

using namespace fstk;

int main() {
  // homogeneous: flux constant = a
  {
    Tensor<double> a({1, 16, 24});
    a.fill(5.0);
    auto sol = solve_flux_detail(a);
    double worst = 0;
    for (long long i = 0; i < sol.flux.numel(); ++i) worst = std::max(worst, std::abs(sol.flux[i] - 5.0));
    std::printf("homogeneous max|q-a| = %.3e (iters %d)\n", worst, sol.iterations);
  }
  // layered vertical stripes: q = series conductance
  {
    int H = 16, W = 32;
    Tensor<double> a({1, H, W});
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) a[i * W + j] = (j < W / 2) ? 87.0 : 3.2;
    double qref = 1.0 / (0.5 / 87.0 + 0.5 / 3.2);
    auto q = solve_flux(a);
    double worst = 0;
    for (long long i = 0; i < q.numel(); ++i) worst = std::max(worst, std::abs(q[i] - qref) / qref);
    std::printf("layered worst rel err vs series form = %.3e (qref %.4f)\n", worst, qref);
  }
  // conservation on a random heterogeneous field
  {
    int H = 24, W = 24;
    Rng rng(7);
    Tensor<double> a({1, H, W});
    for (long long i = 0; i < a.numel(); ++i) a[i] = rng.uniform() < 0.4 ? 87.0 : 3.2;
    auto sol = solve_flux_detail(a);
    double hx = 1.0 / W, hy = 1.0 / H;
    auto harm = [](double l, double r) { return 2.0 * l * r / (l + r); };
    auto A = [&](int i, int j) { return a[i * W + j]; };
    auto U = [&](int i, int j) { return sol.u[i * W + j]; };
    double worst = 0;
    for (int i = 1; i < H - 1; ++i)
      for (int j = 1; j < W - 1; ++j) {
        double net = harm(A(i, j - 1), A(i, j)) * (U(i, j - 1) - U(i, j)) * hy / hx +
                     harm(A(i, j), A(i, j + 1)) * (U(i, j + 1) - U(i, j)) * hy / hx +
                     harm(A(i - 1, j), A(i, j)) * (U(i - 1, j) - U(i, j)) * hx / hy +
                     harm(A(i, j), A(i + 1, j)) * (U(i + 1, j) - U(i, j)) * hx / hy;
        worst = std::max(worst, std::abs(net));
      }
    std::printf("conservation worst |net flux| = %.3e\n", worst);

    // linearity: a -> 10a scales flux by 10
    Tensor<double> a10(a.shape());
    for (long long i = 0; i < a.numel(); ++i) a10[i] = 10.0 * a[i];
    auto q1 = solve_flux(a), q10 = solve_flux(a10);
    double worstl = 0;
    for (long long i = 0; i < q1.numel(); ++i) worstl = std::max(worstl, std::abs(q10[i] - 10.0 * q1[i]) / std::abs(10.0 * q1[i]));
    std::printf("linearity worst rel err = %.3e\n", worstl);
  }
  // disks generation: default spec vf, determinism, pi/16 case
  {
    MicrostructureSpec s;
    s.height = s.width = 64;
    s.seed = 3;
    auto f1 = gen_disks(s), f2 = gen_disks(s);
    double ones = 0;
    for (long long i = 0; i < f1.numel(); ++i) ones += f1[i];
    bool same = true;
    for (long long i = 0; i < f1.numel(); ++i) same = same && f1[i] == f2[i];
    std::printf("disks vf = %.4f determinism %d radius=%.4f\n", ones / f1.numel(), same ? 1 : 0, s.resolved_radius());

    auto c = rasterize_disks({{0.5, 0.5}}, 0.25, 64, 64);
    double o2 = 0;
    for (long long i = 0; i < c.numel(); ++i) o2 += c[i];
    std::printf("centered half-domain disk vf = %.5f vs pi/16 = %.5f\n", o2 / c.numel(), 3.14159265358979 / 16.0);

    MicrostructureSpec z = s;
    z.disk_count = 0;
    auto fz = gen_disks(z);
    double oz = 0;
    for (long long i = 0; i < fz.numel(); ++i) oz += fz[i];
    std::printf("count=0 sum = %.1f\n", oz);
  }
  // voronoi: range, 1 grain constant, nearest-seed audit vs brute force is in tests
  {
    MicrostructureSpec s;
    s.kind = "voronoi";
    s.height = s.width = 32;
    s.seed = 11;
    auto f = gen_voronoi(s);
    double lo = 1e9, hi = -1e9;
    for (long long i = 0; i < f.numel(); ++i) {
      lo = std::min(lo, f[i]);
      hi = std::max(hi, f[i]);
    }
    std::printf("voronoi range [%.4f, %.4f] (pi=%.4f)\n", lo, hi, 3.14159265);
    s.grain_count = 1;
    auto g = gen_voronoi(s);
    bool constant = true;
    for (long long i = 0; i < g.numel(); ++i) constant = constant && g[i] == g[0];
    std::printf("1 grain constant = %d\n", constant ? 1 : 0);
  }
  // augmentation vs re-solve on 32x32
  {
    MicrostructureSpec s;
    s.height = s.width = 32;
    s.seed = 5;
    auto micro = gen_disks(s);
    auto flux = field_oracle(micro, "disks");
    Tensor<double> in4({1, 1, 32, 32}), out4({1, 1, 32, 32});
    std::copy(micro.data(), micro.data() + micro.numel(), in4.data());
    std::copy(flux.data(), flux.data() + flux.numel(), out4.data());
    auto [ai, ao] = augment_symmetry(in4, out4);
    double worst = 0;
    for (int v = 0; v < 4; ++v) {
      Tensor<double> m({1, 32, 32}), expect({1, 32, 32});
      std::copy(ai.data() + v * 1024, ai.data() + (v + 1) * 1024, m.data());
      std::copy(ao.data() + v * 1024, ao.data() + (v + 1) * 1024, expect.data());
      auto solved = field_oracle(m, "disks");
      for (long long i = 0; i < 1024; ++i) worst = std::max(worst, std::abs(solved[i] - expect[i]));
    }
    std::printf("augment vs re-solve worst abs err = %.3e\n", worst);
  }
  // small generate_dataset + round trip
  {
    GenConfig g;
    g.preset = "fiber-like";
    g.size = 16;
    g.count = 20;
    g.seed = 9;
    auto b = generate_dataset(g);
    std::printf("dataset n=%d splits %zu/%zu/%zu\n", b.count(), b.train_idx.size(), b.val_idx.size(), b.test_idx.size());
    double m = 0, v = 0;
    const long long stride = 256;
    for (int k : b.train_idx)
      for (long long i = 0; i < stride; ++i) m += b.inputs[k * stride + i];
    m /= b.train_idx.size() * stride;
    for (int k : b.train_idx)
      for (long long i = 0; i < stride; ++i) {
        double d = b.inputs[k * stride + i] - m;
        v += d * d;
      }
    v /= b.train_idx.size() * stride;
    std::printf("train input mean %.3e var %.6f\n", m, v);
    write_dataset_fstk(b, "/tmp/ds_check.fstk");
    auto r = read_dataset_fstk("/tmp/ds_check.fstk");
    bool same = r.count() == b.count();
    for (long long i = 0; i < b.inputs.numel() && same; ++i)
      same = r.inputs[i] == b.inputs[i] && r.outputs[i] == b.outputs[i];
    std::printf("round trip exact = %d\n", same ? 1 : 0);
    auto b2 = generate_dataset(g);
    bool det = true;
    for (long long i = 0; i < b.inputs.numel() && det; ++i) det = b.inputs[i] == b2.inputs[i] && b.outputs[i] == b2.outputs[i];
    std::printf("regen determinism = %d\n", det ? 1 : 0);
  }
  // polycrystal small
  {
    GenConfig g;
    g.preset = "polycrystal-like";
    g.size = 16;
    g.count = 12;
    g.seed = 2;
    auto b = generate_dataset(g);
    std::printf("voronoi dataset n=%d splits %zu/%zu/%zu\n", b.count(), b.train_idx.size(), b.val_idx.size(), b.test_idx.size());
  }
  return 0;
}

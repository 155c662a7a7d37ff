#include <malloc.h>

#include <chrono>
#include <cstdio>

#include "fstk/dataspace.hpp"
#include "fstk/hmc.hpp"
#include "fstk/unet.hpp"

using namespace fstk;
using clk = std::chrono::steady_clock;

int main() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  GenConfig g;
  g.preset = "fiber-like";
  g.size = 32;
  g.count = 220;
  g.seed = 0;
  DatasetBundle b = generate_dataset(g);
  Tensor<double> tx = gather_samples(b.inputs, b.train_idx);
  Tensor<double> ty = gather_samples(b.outputs, b.train_idx);
  NetworkSpec spec = NetworkSpec::desk();
  NetworkState<double> st = build_network<double>(spec, 1);
  std::vector<double> omega = flatten(st);
  for (int chunk : {8, 16, 32, 160}) {
    UnetPotential<double> pot(spec, st.manifest, st.running, tx, ty, omega, 0.1, 0.01, chunk, 1);
    auto [u0, g0] = pot(omega);
    auto t2 = clk::now();
    auto [u, gr] = pot(omega);
    auto t3 = clk::now();
    double dt = std::chrono::duration<double>(t3 - t2).count();
    std::printf("chunk %3d: grad %.3f s  (200 draws: %.0f s)  U=%.4f\n", chunk, dt, dt * 101 * 200,
                u);
  }
  return 0;
}

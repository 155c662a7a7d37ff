#include <chrono>
#include <cstdio>

#include "fstk/dataspace.hpp"
#include "fstk/hmc.hpp"
#include "fstk/unet.hpp"

using namespace fstk;

int main() {
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
  UnetPotential<double> pot(spec, st.manifest, st.running, tx, ty, omega, 0.1, 0.01, 16, 1);
  double acc = 0;
  const int reps = 8;
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) {
    auto [u, gr] = pot(omega);
    acc += u;
  }
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("grad %.3f s  (done %.1f)\n", dt / reps, acc);
  fstk::detail::dump_pull_profile();
  return 0;
}

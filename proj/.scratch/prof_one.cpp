#include <cstdio>

#include "fstk/dataspace.hpp"
#include "fstk/hmc.hpp"
#include "fstk/unet.hpp"

using namespace fstk;

int main() {
  GenConfig g;
  g.preset = "fiber-like";
  g.size = 32;
  g.count = 12;  // tiny: just need shaped train data
  g.seed = 0;
  DatasetBundle b = generate_dataset(g);
  // tile the 9 train samples up to 160 to mimic the real batch
  Tensor<double> tx0 = gather_samples(b.inputs, b.train_idx);
  Tensor<double> ty0 = gather_samples(b.outputs, b.train_idx);
  const int reps = 160 / tx0.dim(0) + 1;
  std::vector<double> xs, ys;
  for (int r = 0; r < reps; ++r) {
    xs.insert(xs.end(), tx0.vec().begin(), tx0.vec().end());
    ys.insert(ys.end(), ty0.vec().begin(), ty0.vec().end());
  }
  const int H = tx0.dim(2), W = tx0.dim(3);
  xs.resize(static_cast<size_t>(160) * H * W);
  ys.resize(static_cast<size_t>(160) * H * W);
  Tensor<double> tx = Tensor<double>::from_data({160, 1, H, W}, std::move(xs));
  Tensor<double> ty = Tensor<double>::from_data({160, 1, H, W}, std::move(ys));
  NetworkSpec spec = NetworkSpec::desk();
  NetworkState<double> st = build_network<double>(spec, 1);
  std::vector<double> omega = flatten(st);
  UnetPotential<double> pot(spec, st.manifest, st.running, tx, ty, omega, 0.1, 0.01, 16, 1);
  auto [u0, g0] = pot(omega);  // warm-up
  auto [u, gr] = pot(omega);   // profiled target
  std::printf("U=%.4f g0=%.6f\n", u, gr[0]);
  return 0;
}

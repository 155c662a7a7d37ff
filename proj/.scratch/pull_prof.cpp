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
  { auto [u, gr] = pot(omega); }
  detail::pull_profile().clear();
  for (int r = 0; r < 3; ++r) { auto [u, gr] = pot(omega); }
  std::printf("=== 3 gradient evals ===\n");
  detail::dump_pull_profile();
  return 0;
}

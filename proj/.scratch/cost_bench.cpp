#include <chrono>
#include <cstdio>

#include "fstk/dataspace.hpp"
#include "fstk/hmc.hpp"
#include "fstk/trainer.hpp"
#include "fstk/unet.hpp"

using namespace fstk;
using clk = std::chrono::steady_clock;

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
  std::printf("d = %lld, train n = %d\n", st.manifest.total, tx.dim(0));

  // one full-batch training epoch cost
  TrainData<double> data;
  data.train_x = tx;
  data.train_y = ty;
  data.val_x = gather_samples(b.inputs, b.val_idx);
  data.val_y = gather_samples(b.outputs, b.val_idx);
  TrainConfig tc;
  tc.epochs = 5;
  tc.seed = 1;
  auto t0 = clk::now();
  TrainReport rep = train(st, data, tc);
  auto t1 = clk::now();
  std::printf("5 epochs: %.2f s (%.3f s/epoch), first loss %.4f last %.4f\n",
              std::chrono::duration<double>(t1 - t0).count(),
              std::chrono::duration<double>(t1 - t0).count() / 5.0, rep.loss_trace.front(),
              rep.loss_trace.back());

  // one potential gradient (full batch) cost
  std::vector<double> omega = flatten(st);
  UnetPotential<double> pot(spec, st.manifest, st.running, tx, ty, omega, 0.1, 0.01, 8, 1);
  auto t2 = clk::now();
  auto [u, gr] = pot(omega);
  auto t3 = clk::now();
  std::printf("potential grad: %.3f s (U = %.2f)\n", std::chrono::duration<double>(t3 - t2).count(), u);
  double per_iter = std::chrono::duration<double>(t3 - t2).count() * 101;
  std::printf("HMC per trajectory (L=100): %.1f s -> 200 draws: %.0f s\n", per_iter, per_iter * 200);
  return 0;
}

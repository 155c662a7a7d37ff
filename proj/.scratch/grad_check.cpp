// Scratch: finite-difference sanity for core ops. Not part of the build.
#include <cstdio>
#include <functional>

#include "fstk/nn.hpp"

using namespace fstk;

// FD gradient of scalar fn at leaf values.
static double max_rel_err(std::function<Var64(Tape64&, std::vector<Var64>&)> build,
                          std::vector<Tensor64> leaves, double h = 1e-5) {
  // reverse-mode
  Tape64 tape;
  std::vector<Var64> vars;
  for (auto& t : leaves) vars.push_back(tape.leaf(t, true));
  Var64 loss = build(tape, vars);
  tape.backward(loss);
  double worst = 0.0;
  for (size_t li = 0; li < leaves.size(); ++li) {
    const Tensor64 g = tape.grad(vars[li]);
    for (long long i = 0; i < leaves[li].numel(); ++i) {
      auto eval = [&](double delta) {
        std::vector<Tensor64> pert = leaves;
        pert[li].data()[i] += delta;
        Tape64 t2;
        std::vector<Var64> v2;
        for (auto& t : pert) v2.push_back(t2.leaf(t, true));
        return build(t2, v2).value().data()[0];
      };
      const double fd = (eval(h) - eval(-h)) / (2 * h);
      const double re = std::abs(fd - g.data()[i]) / std::max(std::abs(g.data()[i]), 1e-8);
      worst = std::max(worst, re);
    }
  }
  return worst;
}

int main() {
  Rng rng(42);
  auto randt = [&](Shape s) {
    Tensor64 t(s);
    for (long long i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal();
    return t;
  };

  // d(x^2)/dx at 3 == 6
  {
    Tape64 tape;
    Var64 x = tape.leaf(Tensor64::scalar(3.0), true);
    Var64 y = square(x);
    tape.backward(y);
    printf("dx2: %.17g (want 6)\n", tape.grad(x).data()[0]);
  }
  // conv center/corner
  {
    Tape64 tape;
    Var64 x = tape.leaf(Tensor64({1, 1, 3, 3}, 1.0), false);
    Var64 w = tape.leaf(Tensor64({1, 1, 3, 3}, 1.0), true);
    Var64 b = tape.leaf(Tensor64({1}, 0.0), true);
    Var64 y = conv2d(x, w, b);
    printf("conv corner: %.17g (want 4), center: %.17g (want 9)\n", y.value().at4(0, 0, 0, 0),
           y.value().at4(0, 0, 1, 1));
  }
  // FD checks
  double e;
  e = max_rel_err(
      [](Tape64&, std::vector<Var64>& v) { return mse(conv2d(v[0], v[1], v[2]), v[3]); },
      {randt({2, 2, 5, 5}), randt({3, 2, 3, 3}), randt({3}), randt({2, 3, 5, 5})});
  printf("conv2d mse fd rel err: %.3g\n", e);

  e = max_rel_err(
      [](Tape64&, std::vector<Var64>& v) { return sum(maxpool2(v[0])); },
      {randt({1, 2, 4, 4})});
  printf("maxpool fd rel err: %.3g\n", e);

  e = max_rel_err(
      [](Tape64&, std::vector<Var64>& v) { return mse(upsample_nearest2(v[0]), v[1]); },
      {randt({1, 2, 3, 3}), randt({1, 2, 6, 6})});
  printf("upsample fd rel err: %.3g\n", e);

  e = max_rel_err(
      [](Tape64&, std::vector<Var64>& v) {
        BatchNormRunning<double> rs(3);
        return mse(batchnorm(v[0], v[1], v[2], &rs, true), v[3]);
      },
      {randt({2, 3, 4, 4}), randt({3}), randt({3}), randt({2, 3, 4, 4})});
  printf("batchnorm(train) fd rel err: %.3g\n", e);

  e = max_rel_err(
      [](Tape64&, std::vector<Var64>& v) {
        BatchNormRunning<double> rs(3);
        rs.mean.data()[0] = 0.3; rs.var.data()[1] = 2.0;
        return mse(batchnorm(v[0], v[1], v[2], &rs, false), v[3]);
      },
      {randt({2, 3, 4, 4}), randt({3}), randt({3}), randt({2, 3, 4, 4})});
  printf("batchnorm(eval) fd rel err: %.3g\n", e);

  e = max_rel_err(
      [](Tape64&, std::vector<Var64>& v) {
        Var64 c = channel_concat(relu(v[0]), softplus(v[1]));
        return mse(c, v[2]);
      },
      {randt({2, 2, 3, 3}), randt({2, 1, 3, 3}), randt({2, 3, 3, 3})});
  printf("concat/relu/softplus fd rel err: %.3g\n", e);

  e = max_rel_err(
      [](Tape64&, std::vector<Var64>& v) {
        Var64 s = slice(v[0], 2, {2, 2});
        return sum(mul(s, s));
      },
      {randt({8})});
  printf("slice fd rel err: %.3g\n", e);

  // maxpool(upsample(x)) == x
  {
    Tape64 tape;
    Tensor64 x0 = randt({1, 2, 3, 3});
    Var64 x = tape.leaf(x0, false);
    Var64 y = maxpool2(upsample_nearest2(x));
    bool same = true;
    for (long long i = 0; i < x0.numel(); ++i)
      same &= (y.value().data()[i] == x0.data()[i]);
    printf("maxpool(upsample(x))==x: %s\n", same ? "yes" : "NO");
  }
  return 0;
}

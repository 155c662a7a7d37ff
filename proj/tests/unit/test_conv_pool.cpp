#include <catch2/catch_amalgamated.hpp>

#include "fstk/nn.hpp"
#include "fstk/ops.hpp"
#include "support/oracles.hpp"

using namespace fstk;

namespace {

Tensor<double> run_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  Tape<double> tape;
  Var<double> vx = tape.leaf(x, false);
  Var<double> vw = tape.leaf(w, false);
  Var<double> vb = tape.leaf(b, false);
  return conv2d(vx, vw, vb).value();
}

// Finite-difference audit of the convolution's three gradients via a scalar
// sum-of-squares head.
double conv_fd_err(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  Tape<double> tape;
  Var<double> vx = tape.leaf(x, true);
  Var<double> vw = tape.leaf(w, true);
  Var<double> vb = tape.leaf(b, true);
  Var<double> loss = sum_squares(conv2d(vx, vw, vb));
  tape.backward(loss);

  std::vector<double> flat(x.vec());
  flat.insert(flat.end(), w.data(), w.data() + w.numel());
  flat.insert(flat.end(), b.data(), b.data() + b.numel());
  std::vector<double> analytic(tape.grad(vx).vec());
  {
    const auto& gw = tape.grad(vw);
    analytic.insert(analytic.end(), gw.data(), gw.data() + gw.numel());
    const auto& gb = tape.grad(vb);
    analytic.insert(analytic.end(), gb.data(), gb.data() + gb.numel());
  }

  auto f = [&](const std::vector<double>& v) {
    std::vector<double> xv(v.begin(), v.begin() + x.numel());
    std::vector<double> wv(v.begin() + x.numel(), v.begin() + x.numel() + w.numel());
    std::vector<double> bv(v.end() - b.numel(), v.end());
    Tape<double> t;
    Var<double> ax = t.leaf(Tensor<double>::from_data(x.shape(), std::move(xv)), false);
    Var<double> aw = t.leaf(Tensor<double>::from_data(w.shape(), std::move(wv)), false);
    Var<double> ab = t.leaf(Tensor<double>::from_data(b.shape(), std::move(bv)), false);
    return sum_squares(conv2d(ax, aw, ab)).value().data()[0];
  };
  return oracle::fd_gradient_rel_err(f, flat, analytic, 1e-6);
}

}  // namespace

TEST_CASE("conv2d identity and direct-sum examples", "[conv]") {
  SECTION("1x1 unit kernel is the identity") {
    Tensor<double> x({1, 1, 3, 3});
    oracle::fill_uniform(x, 1);
    Tensor<double> w = Tensor<double>::from_data({1, 1, 1, 1}, {1.0});
    Tensor<double> b({1});
    Tensor<double> y = run_conv(x, w, b);
    for (long long i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  }
  SECTION("3x3 all-ones kernel on an all-ones 3x3 input counts the covered taps") {
    Tensor<double> x({1, 1, 3, 3}, 1.0);
    Tensor<double> w({1, 1, 3, 3}, 1.0);
    Tensor<double> b({1});
    Tensor<double> y = run_conv(x, w, b);
    CHECK(y.at4(0, 0, 1, 1) == 9.0);  // full window
    CHECK(y.at4(0, 0, 0, 0) == 4.0);  // corner: 2x2 overlap
    CHECK(y.at4(0, 0, 2, 2) == 4.0);
    CHECK(y.at4(0, 0, 0, 1) == 6.0);  // edge: 2x3 overlap
  }
}

TEST_CASE("conv2d matches the nested-loop oracle on all code paths", "[conv]") {
  auto check_case = [](int N, int Cin, int Cout, int H, int W, int k, uint64_t seed) {
    Tensor<double> x({N, Cin, H, W});
    Tensor<double> w({Cout, Cin, k, k});
    Tensor<double> b({Cout});
    oracle::fill_uniform(x, seed);
    oracle::fill_uniform(w, seed + 1);
    oracle::fill_uniform(b, seed + 2);
    Tensor<double> got = run_conv(x, w, b);
    Tensor<double> want = oracle::conv2d_loop(x, w, b);
    CHECK(oracle::max_rel_err(got.data(), want.data(), got.numel(), 1e-9) < 1e-12);
  };

  check_case(2, 2, 3, 5, 5, 3, 10);    // k=3 on a width the vector kernel rejects
  check_case(1, 3, 2, 4, 8, 3, 20);    // k=3 on an 8-multiple width (vector path)
  check_case(2, 2, 2, 6, 16, 3, 30);   // k=3, wider vector case
  check_case(1, 2, 2, 1, 7, 3, 40);    // single-row fallback
  check_case(1, 2, 3, 6, 6, 5, 50);    // k=5 goes through the matrix-product path
  check_case(1, 1, 1, 4, 4, 1, 60);    // 1x1 projection path
}

TEST_CASE("conv2d gradients match finite differences on both kernel paths", "[conv]") {
  SECTION("vector path (width multiple of 8)") {
    Tensor<double> x({1, 2, 4, 8});
    Tensor<double> w({2, 2, 3, 3});
    Tensor<double> b({2});
    oracle::fill_uniform(x, 70);
    oracle::fill_uniform(w, 71);
    oracle::fill_uniform(b, 72);
    CHECK(conv_fd_err(x, w, b) < 1e-4);
  }
  SECTION("generic stencil path") {
    Tensor<double> x({2, 2, 5, 5});
    Tensor<double> w({3, 2, 3, 3});
    Tensor<double> b({3});
    oracle::fill_uniform(x, 80);
    oracle::fill_uniform(w, 81);
    oracle::fill_uniform(b, 82);
    CHECK(conv_fd_err(x, w, b) < 1e-4);
  }
  SECTION("matrix-product path (k=5)") {
    Tensor<double> x({1, 2, 4, 4});
    Tensor<double> w({2, 2, 5, 5});
    Tensor<double> b({2});
    oracle::fill_uniform(x, 90);
    oracle::fill_uniform(w, 91);
    oracle::fill_uniform(b, 92);
    CHECK(conv_fd_err(x, w, b) < 1e-4);
  }
}

TEST_CASE("conv2d preserves spatial shape for every odd kernel size", "[conv]") {
  for (int k : {1, 3, 5, 7}) {
    Tensor<double> x({1, 1, 8, 8});
    oracle::fill_uniform(x, 100 + static_cast<uint64_t>(k));
    Tensor<double> w({2, 1, k, k}, 0.1);
    Tensor<double> b({2});
    Tensor<double> y = run_conv(x, w, b);
    CHECK(y.dim(2) == 8);
    CHECK(y.dim(3) == 8);
  }
}

TEST_CASE("conv2d rejects malformed kernels", "[conv]") {
  Tape<double> tape;
  Var<double> x = tape.leaf(Tensor<double>({1, 1, 4, 4}), false);
  SECTION("even kernel size") {
    Var<double> w = tape.leaf(Tensor<double>({1, 1, 2, 2}), false);
    Var<double> b = tape.leaf(Tensor<double>({1}), false);
    CHECK_THROWS_AS(conv2d(x, w, b), std::invalid_argument);
  }
  SECTION("input channel mismatch") {
    Var<double> w = tape.leaf(Tensor<double>({1, 3, 3, 3}), false);
    Var<double> b = tape.leaf(Tensor<double>({1}), false);
    CHECK_THROWS_AS(conv2d(x, w, b), std::invalid_argument);
  }
  SECTION("bias length mismatch") {
    Var<double> w = tape.leaf(Tensor<double>({2, 1, 3, 3}), false);
    Var<double> b = tape.leaf(Tensor<double>({3}), false);
    CHECK_THROWS_AS(conv2d(x, w, b), std::invalid_argument);
  }
}

TEST_CASE("maxpool2 windows, oracle, and gradient routing", "[conv]") {
  SECTION("single window") {
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>::from_data({1, 1, 2, 2}, {1, 2, 3, 4}), true);
    Var<double> y = maxpool2(x);
    CHECK(y.value().data()[0] == 4.0);
    tape.backward(sum(y));
    const Tensor<double>& g = tape.grad(x);
    CHECK(g.data()[0] == 0.0);
    CHECK(g.data()[3] == 1.0);  // gradient lands on the max element only
  }
  SECTION("constant field stays constant at half resolution") {
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>({2, 3, 4, 4}, 2.5), false);
    Tensor<double> y = maxpool2(x).value();
    CHECK(y.dim(2) == 2);
    CHECK(y.dim(3) == 2);
    for (long long i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 2.5);
  }
  SECTION("random field equals the per-window loop exactly") {
    Tensor<double> x({1, 1, 8, 8});
    oracle::fill_uniform(x, 110);
    Tape<double> tape;
    Tensor<double> got = maxpool2(tape.leaf(x, false)).value();
    Tensor<double> want = oracle::maxpool2_loop(x);
    for (long long i = 0; i < got.numel(); ++i) CHECK(got.data()[i] == want.data()[i]);
  }
  SECTION("odd spatial extent is rejected") {
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>({1, 1, 3, 4}), false);
    CHECK_THROWS_AS(maxpool2(x), std::invalid_argument);
  }
}

TEST_CASE("upsample_nearest2 replication, inverse, and gradient count", "[conv]") {
  SECTION("single pixel becomes a 2x2 block") {
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>::from_data({1, 1, 1, 1}, {3.5}), false);
    Tensor<double> y = upsample_nearest2(x).value();
    REQUIRE(y.numel() == 4);
    for (long long i = 0; i < 4; ++i) CHECK(y.data()[i] == 3.5);
  }
  SECTION("maxpool2 of upsample is the identity for any tensor") {
    Tensor<double> x({2, 2, 3, 5});
    oracle::fill_uniform(x, 120);
    Tape<double> tape;
    Tensor<double> y = maxpool2(upsample_nearest2(tape.leaf(x, false))).value();
    for (long long i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  }
  SECTION("gradient of the sum counts the four replicas") {
    Tape<double> tape;
    Tensor<double> x({1, 2, 2, 2});
    oracle::fill_uniform(x, 121);
    Var<double> v = tape.leaf(x, true);
    tape.backward(sum(upsample_nearest2(v)));
    const Tensor<double>& g = tape.grad(v);
    for (long long i = 0; i < g.numel(); ++i) CHECK(g.data()[i] == 4.0);
  }
  SECTION("matches the replication loop") {
    Tensor<double> x({1, 3, 2, 4});
    oracle::fill_uniform(x, 122);
    Tape<double> tape;
    Tensor<double> got = upsample_nearest2(tape.leaf(x, false)).value();
    Tensor<double> want = oracle::upsample2_loop(x);
    for (long long i = 0; i < got.numel(); ++i) CHECK(got.data()[i] == want.data()[i]);
  }
}

TEST_CASE("batchnorm forward semantics", "[conv]") {
  SECTION("constant input normalizes to zero under unit gamma, zero beta") {
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>({2, 2, 3, 3}, 4.2), false);
    Var<double> gamma = tape.leaf(Tensor<double>({2}, 1.0), false);
    Var<double> beta = tape.leaf(Tensor<double>({2}, 0.0), false);
    BatchNormRunning<double> running(2);
    Tensor<double> y = batchnorm(x, gamma, beta, &running, /*training=*/true).value();
    for (long long i = 0; i < y.numel(); ++i) CHECK(std::abs(y.data()[i]) < 1e-12);
  }
  SECTION("eval mode with running stats equal to batch stats recovers beta as the mean") {
    Tensor<double> xv({2, 1, 2, 2});
    oracle::fill_uniform(xv, 130);
    const double b = 1.75;
    double mu = 0.0;
    for (long long i = 0; i < xv.numel(); ++i) mu += xv.data()[i];
    mu /= static_cast<double>(xv.numel());
    double var = 0.0;
    for (long long i = 0; i < xv.numel(); ++i) {
      const double d = xv.data()[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(xv.numel());

    BatchNormRunning<double> running(1);
    running.mean.data()[0] = mu;
    running.var.data()[0] = var;
    Tape<double> tape;
    Var<double> x = tape.leaf(xv, false);
    Var<double> gamma = tape.leaf(Tensor<double>({1}, 1.0), false);
    Var<double> beta = tape.leaf(Tensor<double>({1}, b), false);
    Tensor<double> y = batchnorm(x, gamma, beta, &running, /*training=*/false).value();
    double got_mean = 0.0;
    for (long long i = 0; i < y.numel(); ++i) got_mean += y.data()[i];
    got_mean /= static_cast<double>(y.numel());
    CHECK(std::abs(got_mean - b) < 1e-6);  // eps in the denominator shifts it slightly
  }
  SECTION("training forward matches the per-channel loop oracle") {
    Tensor<double> xv({2, 3, 4, 4});
    oracle::fill_uniform(xv, 131);
    std::vector<double> gv{1.2, 0.8, 1.0}, bv{0.1, -0.2, 0.3};
    BatchNormRunning<double> running(3);
    Tape<double> tape;
    Var<double> x = tape.leaf(xv, false);
    Var<double> gamma = tape.leaf(Tensor<double>::from_data({3}, gv), false);
    Var<double> beta = tape.leaf(Tensor<double>::from_data({3}, bv), false);
    Tensor<double> got = batchnorm(x, gamma, beta, &running, /*training=*/true).value();
    Tensor<double> want = oracle::batchnorm_train_loop(xv, gv, bv, 1e-5);
    CHECK(oracle::max_abs_err(got.data(), want.data(), got.numel()) < 1e-12);
  }
  SECTION("running statistics blend with momentum 0.1") {
    Tensor<double> xv({1, 1, 2, 2});
    oracle::fill_uniform(xv, 132);
    double mu = 0.0;
    for (long long i = 0; i < 4; ++i) mu += xv.data()[i];
    mu /= 4.0;
    double var = 0.0;
    for (long long i = 0; i < 4; ++i) {
      const double d = xv.data()[i] - mu;
      var += d * d;
    }
    var /= 4.0;
    BatchNormRunning<double> running(1);  // starts at mean 0, var 1
    Tape<double> tape;
    Var<double> x = tape.leaf(xv, false);
    Var<double> gamma = tape.leaf(Tensor<double>({1}, 1.0), false);
    Var<double> beta = tape.leaf(Tensor<double>({1}, 0.0), false);
    batchnorm(x, gamma, beta, &running, /*training=*/true);
    CHECK(oracle::rel_err(running.mean.data()[0], 0.1 * mu) < 1e-12);
    CHECK(oracle::rel_err(running.var.data()[0], 0.9 + 0.1 * var) < 1e-12);
  }
  SECTION("channel mismatch is rejected") {
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>({1, 2, 2, 2}), false);
    Var<double> gamma = tape.leaf(Tensor<double>({3}, 1.0), false);
    Var<double> beta = tape.leaf(Tensor<double>({3}, 0.0), false);
    BatchNormRunning<double> running(2);
    CHECK_THROWS_AS(batchnorm(x, gamma, beta, &running, true), std::invalid_argument);
  }
}

TEST_CASE("batchnorm gradients match finite differences", "[conv]") {
  Tensor<double> xv({2, 2, 3, 3});
  oracle::fill_uniform(xv, 140);
  std::vector<double> gv{1.1, 0.9}, bv{0.2, -0.1};

  std::vector<double> flat(xv.vec());
  flat.insert(flat.end(), gv.begin(), gv.end());
  flat.insert(flat.end(), bv.begin(), bv.end());

  auto build = [&](const std::vector<double>& v, bool want_grad, std::vector<double>* analytic) {
    std::vector<double> xpart(v.begin(), v.begin() + xv.numel());
    std::vector<double> gpart(v.begin() + xv.numel(), v.begin() + xv.numel() + 2);
    std::vector<double> bpart(v.end() - 2, v.end());
    BatchNormRunning<double> running(2);  // fresh stats each call: pure function of inputs
    Tape<double> tape;
    Var<double> x = tape.leaf(Tensor<double>::from_data(xv.shape(), std::move(xpart)), want_grad);
    Var<double> gamma = tape.leaf(Tensor<double>::from_data({2}, std::move(gpart)), want_grad);
    Var<double> beta = tape.leaf(Tensor<double>::from_data({2}, std::move(bpart)), want_grad);
    Var<double> loss = sum_squares(batchnorm(x, gamma, beta, &running, /*training=*/true));
    const double lv = loss.value().data()[0];
    if (want_grad) {
      tape.backward(loss);
      *analytic = tape.grad(x).vec();
      const auto& gg = tape.grad(gamma);
      analytic->insert(analytic->end(), gg.data(), gg.data() + gg.numel());
      const auto& gb = tape.grad(beta);
      analytic->insert(analytic->end(), gb.data(), gb.data() + gb.numel());
    }
    return lv;
  };

  std::vector<double> analytic;
  build(flat, true, &analytic);
  auto f = [&](const std::vector<double>& v) { return build(v, false, nullptr); };
  CHECK(oracle::fd_gradient_rel_err(f, flat, analytic, 1e-6) < 1e-5);
}

TEST_CASE("channel_concat stacks channels and splits gradients", "[conv]") {
  Tensor<double> av({1, 2, 2, 2}), bv({1, 3, 2, 2});
  oracle::fill_uniform(av, 150);
  oracle::fill_uniform(bv, 151);
  Tape<double> tape;
  Var<double> a = tape.leaf(av, true);
  Var<double> b = tape.leaf(bv, true);
  Var<double> c = channel_concat(a, b);
  REQUIRE(c.value().dim(1) == 5);
  CHECK(c.value().at4(0, 0, 1, 1) == av.at4(0, 0, 1, 1));
  CHECK(c.value().at4(0, 2, 0, 1) == bv.at4(0, 0, 0, 1));
  tape.backward(sum_squares(c));
  const Tensor<double>& ga = tape.grad(a);
  const Tensor<double>& gb = tape.grad(b);
  for (long long i = 0; i < av.numel(); ++i) CHECK(ga.data()[i] == 2.0 * av.data()[i]);
  for (long long i = 0; i < bv.numel(); ++i) CHECK(gb.data()[i] == 2.0 * bv.data()[i]);
}

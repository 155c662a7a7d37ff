#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>

#include "fstk/trainer.hpp"
#include "support/oracles.hpp"

using namespace fstk;

namespace {

double nll_value(const Tensor<double>& pred, const Tensor<double>& target, double s2) {
  Tape<double> tape;
  return nll_gaussian(tape.leaf(pred, false), tape.leaf(target, false), s2).value().data()[0];
}

}  // namespace

TEST_CASE("Gaussian negative log likelihood closed forms", "[trainer]") {
  SECTION("zero residual leaves only the constants") {
    Tensor<double> t({2, 3});
    oracle::fill_uniform(t, 1);
    const double n = static_cast<double>(t.numel());
    CHECK(oracle::rel_err(nll_value(t, t, 1.0), n / 2.0 * std::log(2.0 * std::numbers::pi)) <
          1e-14);
  }
  SECTION("random case matches the scalar loop including constants") {
    Tensor<double> p({3, 4}), t({3, 4});
    oracle::fill_uniform(p, 2);
    oracle::fill_uniform(t, 3);
    const double s2 = 0.07;
    const double n = static_cast<double>(p.numel());
    double ss = 0.0;
    for (long long i = 0; i < p.numel(); ++i) {
      const double d = p.data()[i] - t.data()[i];
      ss += d * d;
    }
    const double want = ss / (2.0 * s2) + n / 2.0 * std::log(s2) +
                        n / 2.0 * std::log(2.0 * std::numbers::pi);
    CHECK(oracle::rel_err(nll_value(p, t, s2), want) < 1e-12);
  }
  SECTION("gradient is proportional to the squared-error gradient (shared argmin)") {
    Tensor<double> p({2, 5}), t({2, 5});
    oracle::fill_uniform(p, 4);
    oracle::fill_uniform(t, 5);
    const double s2 = 0.01;
    const double n = static_cast<double>(p.numel());

    Tape<double> t1;
    Var<double> v1 = t1.leaf(p, true);
    t1.backward(nll_gaussian(v1, t1.leaf(t, false), s2));
    std::vector<double> g_nll = t1.grad(v1).vec();

    Tape<double> t2;
    Var<double> v2 = t2.leaf(p, true);
    t2.backward(mse(v2, t2.leaf(t, false)));
    std::vector<double> g_mse = t2.grad(v2).vec();

    const double factor = n / (2.0 * s2);
    for (size_t i = 0; i < g_nll.size(); ++i)
      CHECK(oracle::rel_err(g_nll[i], factor * g_mse[i], 1e-9) < 1e-12);
  }
  SECTION("non-positive noise variance is rejected") {
    Tape<double> tape;
    Var<double> v = tape.leaf(Tensor<double>({2}), false);
    CHECK_THROWS_AS(nll_gaussian(v, v, 0.0), std::invalid_argument);
  }
}

TEST_CASE("penalized objective reduces to the likelihood when the prior vanishes", "[trainer]") {
  Tensor<double> p({2, 3}), t({2, 3});
  oracle::fill_uniform(p, 6);
  oracle::fill_uniform(t, 7);
  std::vector<double> wv = oracle::uniform_vector(5, 8);
  std::vector<double> mv = oracle::uniform_vector(5, 9);

  auto map_value = [&](const std::vector<double>& w, const std::vector<double>& m, double s2p) {
    Tape<double> tape;
    return map_loss(tape.leaf(p, false), tape.leaf(t, false),
                    tape.leaf(Tensor<double>::from_data({5}, w), false),
                    tape.leaf(Tensor<double>::from_data({5}, m), false), 0.01, s2p)
        .value()
        .data()[0];
  };

  SECTION("huge prior variance recovers the plain likelihood") {
    CHECK(std::abs(map_value(wv, mv, 1e12) - nll_value(p, t, 0.01)) < 1e-6);
  }
  SECTION("parameters at the prior mean contribute no penalty") {
    CHECK(map_value(wv, wv, 0.1) == nll_value(p, t, 0.01));
  }
  SECTION("random case matches the loop oracle") {
    const double s2p = 0.3;
    double pen = 0.0;
    for (size_t i = 0; i < wv.size(); ++i) {
      const double d = wv[i] - mv[i];
      pen += d * d;
    }
    const double want = nll_value(p, t, 0.01) + pen / (2.0 * s2p);
    CHECK(oracle::rel_err(map_value(wv, mv, s2p), want) < 1e-12);
  }
}

TEST_CASE("Adam update rule closed forms", "[trainer]") {
  SECTION("zero gradient leaves parameters unchanged") {
    std::vector<double> params{1.0, -2.0, 0.5};
    std::vector<double> grad{0.0, 0.0, 0.0};
    AdamState<double> st(3);
    adam_step(params, grad, st, 0.1);
    CHECK(params == std::vector<double>{1.0, -2.0, 0.5});
  }
  SECTION("first step from zero moments follows the hand formula") {
    // m = (1-b1)g, v = (1-b2)g^2; bias correction divides both out exactly,
    // so the step is -lr * g / (|g| + eps).
    const double g = 0.37, lr = 0.05, eps = 1e-8;
    std::vector<double> params{2.0};
    std::vector<double> grad{g};
    AdamState<double> st(1);
    adam_step(params, grad, st, lr);
    const double want = 2.0 - lr * g / (std::abs(g) + eps);
    CHECK(oracle::rel_err(params[0], want) < 1e-12);
  }
  SECTION("constant gradient drives the step magnitude toward lr") {
    std::vector<double> params{0.0};
    AdamState<double> st(1);
    double prev = params[0];
    double step = 0.0;
    for (int i = 0; i < 200; ++i) {
      std::vector<double> grad{1.3};
      adam_step(params, grad, st, 0.01);
      step = prev - params[0];
      prev = params[0];
    }
    CHECK(oracle::rel_err(step, 0.01) < 1e-3);
  }
  SECTION("non-finite gradient aborts") {
    std::vector<double> params{0.0};
    std::vector<double> grad{std::numeric_limits<double>::quiet_NaN()};
    AdamState<double> st(1);
    CHECK_THROWS_AS(adam_step(params, grad, st, 0.01), numeric_error);
  }
}

TEST_CASE("one-parameter linear regression recovers the true slope", "[trainer]") {
  // Data y = 2.5 x exactly; the quadratic loss has its minimum at the slope.
  std::vector<double> xs = oracle::uniform_vector(32, 10, 0.5, 2.0);
  const double slope = 2.5;
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (double x : xs) {
    sxx += x * x;
    sxy += x * (slope * x);
    syy += (slope * x) * (slope * x);
  }

  std::vector<double> w{0.0};
  std::vector<double> trace = train_flat(
      w,
      [&](Tape<double>& tape, Var<double> wv) {
        Var<double> quad = scale(square(wv), sxx);
        Var<double> lin = scale(wv, -2.0 * sxy);
        return add_scalar(sum(add(quad, lin)), syy);
      },
      4000, 0.05);

  CHECK(std::abs(w[0] - slope) < 1e-3);
  CHECK(trace.size() == 4000);
  for (double v : trace) CHECK(std::isfinite(v));
  CHECK(trace.back() < 1e-4 * trace.front());
}

TEST_CASE("network training loop contracts", "[trainer]") {
  NetworkSpec s;
  s.height = 8;
  s.width = 8;
  s.encoder_filters = {1, 1};
  s.decoder_filters = {1};

  TrainData<double> data;
  data.train_x = Tensor<double>({4, 1, 8, 8});
  data.train_y = Tensor<double>({4, 1, 8, 8});
  data.val_x = Tensor<double>({2, 1, 8, 8});
  data.val_y = Tensor<double>({2, 1, 8, 8});
  oracle::fill_uniform(data.train_x, 20);
  oracle::fill_uniform(data.train_y, 21);
  oracle::fill_uniform(data.val_x, 22);
  oracle::fill_uniform(data.val_y, 23);

  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.lr = 0.01;
  cfg.seed = 77;

  SECTION("a zero-epoch budget is rejected") {
    TrainConfig bad = cfg;
    bad.epochs = 0;
    NetworkState<double> st = build_network<double>(s, 1);
    CHECK_THROWS_AS(train(st, data, bad), config_error);
  }

  SECTION("trace lengths, finiteness, and the deterministic report") {
    NetworkState<double> st = build_network<double>(s, 1);
    TrainReport rep = train(st, data, cfg);
    CHECK(rep.epochs_run == 5);
    CHECK(rep.loss_trace.size() == 5);
    CHECK(rep.val_mse_trace.size() == 5);
    for (double v : rep.loss_trace) CHECK(std::isfinite(v));
    CHECK(rep.final_val_mse == rep.val_mse_trace.back());
    nlohmann::json j = train_report_json(rep);
    CHECK_FALSE(j.contains("wall_seconds"));  // wall time never enters artifacts
    CHECK(j["seed"].get<uint64_t>() == 77);
  }

  SECTION("training is bitwise reproducible") {
    NetworkState<double> a = build_network<double>(s, 1);
    NetworkState<double> b = build_network<double>(s, 1);
    TrainReport ra = train(a, data, cfg);
    TrainReport rb = train(b, data, cfg);
    CHECK(ra.loss_trace == rb.loss_trace);
    CHECK(ra.val_mse_trace == rb.val_mse_trace);
    std::vector<double> fa = flatten(a), fb = flatten(b);
    REQUIRE(fa.size() == fb.size());
    for (size_t i = 0; i < fa.size(); ++i) CHECK(fa[i] == fb[i]);
  }

  SECTION("training reduces the loss on a learnable target") {
    // Constant target: easily fit, so the first/last epochs must improve.
    TrainData<double> easy = data;
    easy.train_y = Tensor<double>({4, 1, 8, 8}, 0.5);
    easy.val_y = Tensor<double>({2, 1, 8, 8}, 0.5);
    TrainConfig longer = cfg;
    longer.epochs = 60;
    NetworkState<double> st = build_network<double>(s, 1);
    TrainReport rep = train(st, easy, longer);
    CHECK(rep.loss_trace.back() < 0.5 * rep.loss_trace.front());
  }
}

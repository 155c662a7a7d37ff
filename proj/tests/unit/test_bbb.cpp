#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "fstk/bbb.hpp"
#include "support/oracles.hpp"

using namespace fstk;

namespace {

NetworkSpec toy_spec() {
  NetworkSpec s;
  s.height = 8;
  s.width = 8;
  s.encoder_filters = {1, 1};
  s.decoder_filters = {1};
  return s;
}

double scalar_normal_logpdf(double x, double mean, double sigma) {
  const double z = (x - mean) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

// KL(N(m,s^2) || N(m0,v0)) for scalars.
double scalar_kl(double m, double s, double m0, double v0) {
  return std::log(std::sqrt(v0) / s) + (s * s + (m - m0) * (m - m0)) / (2.0 * v0) - 0.5;
}

// Mean-field inference for the conjugate scalar-mean model: observations
// y_i ~ N(omega, s2_noise) with prior omega ~ N(0, s2_prior). The variational
// family contains the exact Gaussian posterior, so the optimum is known in
// closed form. Returns the per-step (mu, sigma) trajectory.
struct ScalarRun {
  std::vector<double> mu_trace, sigma_trace;
};

ScalarRun run_scalar_bbb(const std::vector<double>& ys, double s2_noise, double s2_prior,
                         int steps, int mc_draws, double lr, uint64_t seed) {
  const double n = static_cast<double>(ys.size());
  double sy = 0.0, syy = 0.0;
  for (double y : ys) {
    sy += y;
    syy += y * y;
  }
  const double nll_const = n / 2.0 * std::log(2.0 * std::numbers::pi * s2_noise);

  std::vector<double> params{0.0, inverse_softplus(0.5)};  // [mu, rho]
  AdamState<double> adam(2);
  Rng noise(seed);
  ScalarRun run;
  for (int step = 0; step < steps; ++step) {
    Tape<double> tape;
    Var<double> mu = tape.leaf(Tensor<double>::from_data({1}, {params[0]}), true);
    Var<double> rho = tape.leaf(Tensor<double>::from_data({1}, {params[1]}), true);
    Var<double> sigma = softplus(rho);
    Var<double> prior_mean = tape.constant(Tensor<double>({1}, 0.0));
    Var<double> prior_sigma = tape.constant(Tensor<double>({1}, std::sqrt(s2_prior)));
    Var<double> loss;
    for (int k = 0; k < mc_draws; ++k) {
      Var<double> eps = tape.constant(Tensor<double>({1}, noise.normal()));
      Var<double> omega = add(mu, mul(sigma, eps));
      // sum_i (y_i - w)^2 expands to n w^2 - 2 w sum(y) + sum(y^2).
      Var<double> ss = add_scalar(add(scale(square(omega), n), scale(omega, -2.0 * sy)), syy);
      Var<double> nll = add_scalar(scale(ss, 1.0 / (2.0 * s2_noise)), nll_const);
      Var<double> log_q = gaussian_logpdf_sum(omega, mu, sigma);
      Var<double> log_p = gaussian_logpdf_sum(omega, prior_mean, prior_sigma);
      Var<double> term = add(nll, sub(log_q, log_p));  // full KL weight
      loss = k == 0 ? term : add(loss, term);
    }
    if (mc_draws > 1) loss = scale(loss, 1.0 / static_cast<double>(mc_draws));
    tape.backward(loss);
    std::vector<double> grad{tape.grad(mu).data()[0], tape.grad(rho).data()[0]};
    adam_step(params, grad, adam, lr);
    run.mu_trace.push_back(params[0]);
    run.sigma_trace.push_back(softplus_scalar(params[1]));
  }
  return run;
}

}  // namespace

TEST_CASE("reparameterized weight draw closed forms", "[bbb]") {
  SECTION("unit noise at mu=0, rho=0 gives softplus(0) = ln 2") {
    std::vector<double> w = sample_weights({0.0}, {0.0}, {1.0});
    CHECK(oracle::rel_err(w[0], std::log(2.0)) < 1e-15);
  }
  SECTION("zero noise returns mu exactly") {
    std::vector<double> w = sample_weights({0.7, -0.2}, {1.3, -0.4}, {0.0, 0.0});
    CHECK(w[0] == 0.7);
    CHECK(w[1] == -0.2);
  }
  SECTION("length mismatch is rejected") {
    CHECK_THROWS_AS(sample_weights({0.0, 1.0}, {0.0}, {1.0}), std::invalid_argument);
    CHECK_THROWS_AS(sample_weights({0.0}, {0.0}, {1.0, 2.0}), std::invalid_argument);
  }
  SECTION("inverse softplus round trip") {
    for (double s : {0.01, 0.5, 1.0, 3.0})
      CHECK(oracle::rel_err(softplus_scalar(inverse_softplus(s)), s) < 1e-12);
    CHECK_THROWS_AS(inverse_softplus(0.0), std::invalid_argument);
  }
}

TEST_CASE("the sampling path is differentiable in rho", "[bbb]") {
  // d omega / d rho = sigmoid(rho) * eps; at rho = 0, eps = 1 this is 1/2.
  Tape<double> tape;
  Var<double> mu = tape.leaf(Tensor<double>({1}, 0.0), true);
  Var<double> rho = tape.leaf(Tensor<double>({1}, 0.0), true);
  Var<double> eps = tape.constant(Tensor<double>({1}, 1.0));
  Var<double> omega = add(mu, mul(softplus(rho), eps));
  tape.backward(omega);
  CHECK(oracle::rel_err(tape.grad(rho).data()[0], 0.5) < 1e-14);
  CHECK(tape.grad(mu).data()[0] == 1.0);

  auto f = [](const std::vector<double>& r) {
    return 0.0 + softplus_scalar(r[0]) * 1.0;
  };
  CHECK(oracle::fd_gradient_rel_err(f, {0.0}, {0.5}, 1e-6) < 1e-8);
}

TEST_CASE("Gaussian log density sum matches the brute-force loop", "[bbb]") {
  const int d = 6;
  std::vector<double> xv = oracle::uniform_vector(d, 60);
  std::vector<double> mv = oracle::uniform_vector(d, 61);
  std::vector<double> sv = oracle::uniform_vector(d, 62, 0.3, 2.0);
  Tape<double> tape;
  Var<double> x = tape.leaf(Tensor<double>::from_data({d}, xv), false);
  Var<double> m = tape.leaf(Tensor<double>::from_data({d}, mv), false);
  Var<double> s = tape.leaf(Tensor<double>::from_data({d}, sv), false);
  double want = 0.0;
  for (int i = 0; i < d; ++i) want += scalar_normal_logpdf(xv[i], mv[i], sv[i]);
  CHECK(oracle::rel_err(gaussian_logpdf_sum(x, m, s).value().data()[0], want) < 1e-12);
}

TEST_CASE("Monte Carlo KL estimator is unbiased", "[bbb]") {
  SECTION("q identical to the prior gives exactly zero pointwise") {
    std::mt19937_64 eng(63);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (int i = 0; i < 1000; ++i) {
      const double w = 0.0 + 1.2 * nd(eng);
      CHECK(scalar_normal_logpdf(w, 0.0, 1.2) - scalar_normal_logpdf(w, 0.0, 1.2) == 0.0);
    }
  }
  SECTION("distinct q converges to the closed-form KL within 3 standard errors") {
    const double mq = 0.3, sq = 0.8, sp = 1.2;
    const int n = 10000;
    std::mt19937_64 eng(64);
    std::normal_distribution<double> nd(0.0, 1.0);
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
      const double w = mq + sq * nd(eng);
      const double v = scalar_normal_logpdf(w, mq, sq) - scalar_normal_logpdf(w, 0.0, sp);
      sum += v;
      sumsq += v * v;
    }
    const double mean = sum / n;
    const double sd = std::sqrt((sumsq / n - mean * mean) * n / (n - 1.0));
    const double kl = scalar_kl(mq, sq, 0.0, sp * sp);
    CHECK(std::abs(mean - kl) <= 3.0 * sd / std::sqrt(static_cast<double>(n)));
  }
}

TEST_CASE("variational objective structure on a small network", "[bbb]") {
  NetworkSpec s = toy_spec();
  BbbConfig cfg;
  cfg.seed = 91;
  VariationalState<double> vs = init_variational<double>(s, cfg);
  const int d_var = static_cast<int>(vs.d_var());

  Tensor<double> x({2, 1, 8, 8}), y({2, 1, 8, 8});
  oracle::fill_uniform(x, 70);
  oracle::fill_uniform(y, 71);
  std::vector<std::vector<double>> noise{
      oracle::uniform_vector(static_cast<size_t>(d_var), 72)};

  SECTION("initialization: sigma scale, zero prior mean, unit gamma / zero beta") {
    const double sigma0 = cfg.init_sigma_scale * std::sqrt(cfg.sigma2_prior);
    for (double r : vs.rho) CHECK(oracle::rel_err(softplus_scalar(r), sigma0) < 1e-12);
    for (double m : vs.m_omega) CHECK(m == 0.0);
    for (double v : vs.det_params) CHECK((v == 0.0 || v == 1.0));
    CHECK(static_cast<long long>(vs.mu.size() + vs.det_params.size()) == vs.manifest.total);
  }

  SECTION("a zero penalty weight reduces the objective to the likelihood exactly") {
    VariationalState<double> v0 = vs;
    v0.lambda = 0.0;
    Tape<double> tape;
    ElboGraph<double> g = elbo_loss(tape, v0, x, y, noise, 0.01, /*training=*/false);
    CHECK(g.breakdown.total == g.breakdown.nll);
    CHECK(g.breakdown.log_q == 0.0);
    CHECK(g.breakdown.log_p == 0.0);
  }

  SECTION("the internal weight binding agrees with realize_network") {
    VariationalState<double> v0 = vs;
    v0.lambda = 0.0;
    Tape<double> tape;
    ElboGraph<double> g = elbo_loss(tape, v0, x, y, noise, 0.01, /*training=*/false);
    NetworkState<double> st = realize_network(vs, &noise[0]);
    Tensor<double> pred = predict(st, x);
    double ss = 0.0;
    for (long long i = 0; i < pred.numel(); ++i) {
      const double r = pred.data()[i] - y.data()[i];
      ss += r * r;
    }
    const double n_el = static_cast<double>(pred.numel());
    const double want = ss / 0.02 + n_el / 2.0 * std::log(0.01) +
                        n_el / 2.0 * std::log(2.0 * std::numbers::pi);
    CHECK(oracle::rel_err(g.breakdown.nll, want) < 1e-10);
  }

  SECTION("breakdown terms recompose into the total") {
    VariationalState<double> v1 = vs;
    v1.lambda = 0.37;
    Tape<double> tape;
    ElboGraph<double> g = elbo_loss(tape, v1, x, y, noise, 0.01, /*training=*/false);
    CHECK(oracle::rel_err(g.breakdown.total,
                          g.breakdown.nll + 0.37 * (g.breakdown.log_q - g.breakdown.log_p)) <
          1e-12);
  }

  SECTION("the multi-draw objective is the mean of the single-draw objectives") {
    std::vector<double> n2 = oracle::uniform_vector(static_cast<size_t>(d_var), 73);
    double single0, single1, both;
    {
      Tape<double> tape;
      single0 = elbo_loss(tape, vs, x, y, {noise[0]}, 0.01, false).breakdown.total;
    }
    {
      Tape<double> tape;
      single1 = elbo_loss(tape, vs, x, y, {n2}, 0.01, false).breakdown.total;
    }
    {
      Tape<double> tape;
      both = elbo_loss(tape, vs, x, y, {noise[0], n2}, 0.01, false).breakdown.total;
    }
    CHECK(oracle::rel_err(both, 0.5 * (single0 + single1)) < 1e-12);
  }

  SECTION("the closed-form penalty matches the per-parameter KL loop") {
    VariationalState<double> v1 = vs;
    v1.lambda = 0.37;
    Tape<double> tape;
    ElboGraph<double> g = elbo_loss(tape, v1, x, y, noise, 0.01, false, /*closed_form_kl=*/true);
    double kl = 0.0;
    const double sp = std::sqrt(vs.sigma2_prior);
    for (size_t i = 0; i < vs.mu.size(); ++i)
      kl += scalar_kl(vs.mu[i], softplus_scalar(vs.rho[i]), vs.m_omega[i], sp * sp);
    CHECK(oracle::rel_err(g.breakdown.log_q, kl) < 1e-12);
    CHECK(g.breakdown.log_p == 0.0);
    CHECK(oracle::rel_err(g.breakdown.total, g.breakdown.nll + 0.37 * kl) < 1e-12);
  }

  SECTION("objective gradients match finite differences") {
    VariationalState<double> v1 = vs;
    v1.lambda = 0.05;
    Tape<double> tape;
    ElboGraph<double> g = elbo_loss(tape, v1, x, y, noise, 0.01, /*training=*/false);
    tape.backward(g.loss);
    std::vector<double> gmu = tape.grad(g.mu_leaf).vec();
    std::vector<double> grho = tape.grad(g.rho_leaf).vec();
    std::vector<double> gdet = tape.grad(g.det_leaf).vec();

    auto loss_with = [&](const std::vector<double>& mu, const std::vector<double>& rho,
                         const std::vector<double>& det) {
      VariationalState<double> w = v1;
      w.mu = mu;
      w.rho = rho;
      w.det_params = det;
      Tape<double> t2;
      return elbo_loss(t2, w, x, y, noise, 0.01, false).breakdown.total;
    };
    auto f_mu = [&](const std::vector<double>& m) { return loss_with(m, v1.rho, v1.det_params); };
    auto f_rho = [&](const std::vector<double>& r) { return loss_with(v1.mu, r, v1.det_params); };
    auto f_det = [&](const std::vector<double>& d2) { return loss_with(v1.mu, v1.rho, d2); };
    CHECK(oracle::fd_gradient_rel_err(f_mu, v1.mu, gmu, 1e-6) < 1e-4);
    CHECK(oracle::fd_gradient_rel_err(f_rho, v1.rho, grho, 1e-6) < 1e-4);
    CHECK(oracle::fd_gradient_rel_err(f_det, v1.det_params, gdet, 1e-6) < 1e-4);
  }
}

TEST_CASE("conjugate scalar-mean model recovers the exact posterior", "[bbb]") {
  const double s2_noise = 0.5, s2_prior = 4.0;
  std::vector<double> ys = oracle::uniform_vector(25, 201, 0.6, 1.4);
  oracle::ScalarPosterior post = oracle::scalar_mean_posterior(ys, s2_noise, 0.0, s2_prior);

  ScalarRun run = run_scalar_bbb(ys, s2_noise, s2_prior, /*steps=*/4000, /*mc_draws=*/8,
                                 /*lr=*/0.005, /*seed=*/77);
  const double mu = run.mu_trace.back();
  const double sigma = run.sigma_trace.back();
  CHECK(oracle::rel_err(mu, post.mean) < 0.02);
  CHECK(oracle::rel_err(sigma, std::sqrt(post.var)) < 0.02);

  SECTION("KL to the exact posterior decreases monotonically after smoothing") {
    std::vector<double> kl(run.mu_trace.size());
    for (size_t i = 0; i < kl.size(); ++i)
      kl[i] = scalar_kl(run.mu_trace[i], run.sigma_trace[i], post.mean, post.var);
    const size_t window = 50;
    std::vector<double> smoothed;
    for (size_t lo = 0; lo + window <= kl.size(); lo += window) {
      double acc = 0.0;
      for (size_t i = lo; i < lo + window; ++i) acc += kl[i];
      smoothed.push_back(acc / static_cast<double>(window));
    }
    REQUIRE(smoothed.size() >= 10);
    const size_t start = smoothed.size() / 5;  // trailing 80% of the windows
    for (size_t k = start; k + 1 < smoothed.size(); ++k)
      CHECK(smoothed[k + 1] <= smoothed[k] + 1e-3 + 0.01 * std::abs(smoothed[k]));
    CHECK(smoothed.back() < smoothed[start] + 1e-9);
    CHECK(smoothed.back() < 0.01);
  }
}

TEST_CASE("posterior weight draws average back to the variational mean", "[bbb]") {
  // Central limit check on the draw machinery itself: 1e4 reparameterized
  // draws of a 3-vector must average to mu within 3 sigma / sqrt(N).
  const std::vector<double> mu{0.4, -1.1, 2.0};
  const std::vector<double> rho{inverse_softplus(0.5), inverse_softplus(1.5),
                                inverse_softplus(0.2)};
  const int n_draws = 10000;
  std::vector<double> acc(3, 0.0);
  for (int s = 0; s < n_draws; ++s) {
    Rng rng = Rng::stream(999, static_cast<uint64_t>(s));
    std::vector<double> noise(3);
    for (double& v : noise) v = rng.normal();
    std::vector<double> w = sample_weights(mu, rho, noise);
    for (int k = 0; k < 3; ++k) acc[static_cast<size_t>(k)] += w[static_cast<size_t>(k)];
  }
  const std::vector<double> sigma{0.5, 1.5, 0.2};
  for (int k = 0; k < 3; ++k) {
    const double mean = acc[static_cast<size_t>(k)] / n_draws;
    const double se = sigma[static_cast<size_t>(k)] / std::sqrt(static_cast<double>(n_draws));
    CHECK(std::abs(mean - mu[static_cast<size_t>(k)]) <= 3.0 * se);
  }
}

TEST_CASE("network-level variational training contracts", "[bbb]") {
  NetworkSpec s = toy_spec();
  TrainData<double> data;
  data.train_x = Tensor<double>({4, 1, 8, 8});
  data.train_y = Tensor<double>({4, 1, 8, 8});
  data.val_x = Tensor<double>({2, 1, 8, 8});
  data.val_y = Tensor<double>({2, 1, 8, 8});
  oracle::fill_uniform(data.train_x, 80);
  oracle::fill_uniform(data.train_y, 81);
  oracle::fill_uniform(data.val_x, 82);
  oracle::fill_uniform(data.val_y, 83);

  SECTION("training is bitwise reproducible in the seed") {
    BbbConfig cfg;
    cfg.epochs = 5;
    cfg.seed = 7;
    auto [vs_a, rep_a] = train_bbb<double>(s, data, cfg);
    auto [vs_b, rep_b] = train_bbb<double>(s, data, cfg);
    CHECK(rep_a.elbo_trace == rep_b.elbo_trace);
    CHECK(vs_a.mu == vs_b.mu);
    CHECK(vs_a.rho == vs_b.rho);
    cfg.seed = 8;
    auto [vs_c, rep_c] = train_bbb<double>(s, data, cfg);
    CHECK(vs_a.mu != vs_c.mu);
  }

  SECTION("a zero-epoch budget is rejected") {
    BbbConfig cfg;
    cfg.epochs = 0;
    CHECK_THROWS_AS(train_bbb<double>(s, data, cfg), config_error);
  }

  SECTION("an overwhelming penalty pulls the means to the prior center") {
    BbbConfig cfg;
    cfg.epochs = 1000;
    cfg.lr = 0.005;
    cfg.lambda = 1e6;
    cfg.seed = 9;
    auto [vs, rep] = train_bbb<double>(s, data, cfg);
    double worst_mu = 0.0;
    for (double m : vs.mu) worst_mu = std::max(worst_mu, std::abs(m));
    CHECK(worst_mu < 0.02);
    const double sp = std::sqrt(cfg.sigma2_prior);
    double worst_sigma = 0.0;
    for (double r : vs.rho)
      worst_sigma = std::max(worst_sigma, oracle::rel_err(softplus_scalar(r), sp));
    CHECK(worst_sigma < 0.15);  // sigma relaxes toward the prior scale
    CHECK(rep.epochs_run == 1000);
  }
}

TEST_CASE("variational objective decreases substantially on a learnable task", "[bbb]") {
  NetworkSpec s;
  s.height = 16;
  s.width = 16;
  s.encoder_filters = {2, 4};
  s.decoder_filters = {2};

  TrainData<double> data;
  data.train_x = Tensor<double>({24, 1, 16, 16});
  oracle::fill_uniform(data.train_x, 90);
  data.train_y = data.train_x;
  for (long long i = 0; i < data.train_y.numel(); ++i)
    data.train_y.data()[i] = 0.8 * data.train_y.data()[i] + 0.1;
  data.val_x = Tensor<double>({2, 1, 16, 16});
  oracle::fill_uniform(data.val_x, 91);
  data.val_y = data.val_x;

  BbbConfig cfg;
  cfg.epochs = 200;
  cfg.lr = 0.01;
  cfg.seed = 10;
  auto [vs, rep] = train_bbb<double>(s, data, cfg);
  REQUIRE(rep.elbo_trace.size() == 200);
  CHECK(rep.elbo_trace.back() < rep.elbo_trace.front());
  CHECK(rep.elbo_trace.front() - rep.elbo_trace.back() >= 0.9 * std::abs(rep.elbo_trace.front()));
}

TEST_CASE("collapsed posterior scale makes every ensemble member identical", "[bbb]") {
  NetworkSpec s = toy_spec();
  BbbConfig cfg;
  cfg.seed = 12;
  VariationalState<double> vs = init_variational<double>(s, cfg);
  for (double& r : vs.rho) r = -100.0;  // softplus(-100) underflows to 0

  Tensor<double> x({2, 1, 8, 8});
  oracle::fill_uniform(x, 95);
  Ensemble<double> ens = sample_posterior(vs, x, 3, 1234);
  const long long per = ens.members.numel() / 3;
  for (int m = 1; m < 3; ++m)
    for (long long i = 0; i < per; ++i)
      REQUIRE(ens.members.data()[m * per + i] == ens.members.data()[i]);

  SECTION("the mean network equals a zero-noise draw") {
    VariationalState<double> vs2 = init_variational<double>(s, cfg);
    std::vector<double> zero(vs2.mu.size(), 0.0);
    NetworkState<double> mean_net = realize_network(vs2, nullptr);
    NetworkState<double> zero_net = realize_network(vs2, &zero);
    Tensor<double> a = predict(mean_net, x);
    Tensor<double> b = predict(zero_net, x);
    for (long long i = 0; i < a.numel(); ++i) REQUIRE(a.data()[i] == b.data()[i]);
  }
}

#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "fstk/hmc.hpp"
#include "support/oracles.hpp"

using namespace fstk;

namespace {

// U(w) = 1/2 ||w||^2: the standard normal target.
auto std_normal_pot() {
  return [](const std::vector<double>& w) {
    double u = 0.0;
    for (double x : w) u += 0.5 * x * x;
    return std::pair<double, std::vector<double>>(u, w);
  };
}

// U(w) = 1/2 w' A w for a fixed symmetric positive definite 2x2 A.
auto quad_pot() {
  return [](const std::vector<double>& w) {
    const double a = 2.0, b = 0.6, c = 1.0;
    const double u = 0.5 * (a * w[0] * w[0] + 2.0 * b * w[0] * w[1] + c * w[1] * w[1]);
    std::vector<double> g{a * w[0] + b * w[1], b * w[0] + c * w[1]};
    return std::pair<double, std::vector<double>>(u, std::move(g));
  };
}

NetworkSpec toy_spec() {
  NetworkSpec s;
  s.height = 8;
  s.width = 8;
  s.encoder_filters = {1, 1};
  s.decoder_filters = {1};
  return s;
}

}  // namespace

TEST_CASE("kinetic energy closed forms and loop oracle", "[hmc]") {
  CHECK(kinetic_energy({1.0, 1.0}, {}) == 1.0);
  CHECK(kinetic_energy({0.0, 0.0, 0.0}, {}) == 0.0);

  std::vector<double> r = oracle::uniform_vector(7, 40);
  std::vector<double> m = oracle::uniform_vector(7, 41, 0.5, 3.0);
  double want = 0.0;
  for (size_t i = 0; i < r.size(); ++i) want += 0.5 * r[i] * r[i] / m[i];
  CHECK(oracle::rel_err(kinetic_energy(r, m), want) < 1e-14);

  CHECK_THROWS_AS(kinetic_energy({1.0}, {0.0}), std::invalid_argument);
  CHECK_THROWS_AS(kinetic_energy({1.0}, {-2.0}), std::invalid_argument);
  CHECK_THROWS_AS(kinetic_energy({1.0, 2.0}, {1.0}), std::invalid_argument);
}

TEST_CASE("single leapfrog step on the harmonic oscillator by hand", "[hmc]") {
  // U = w^2/2, eps = 0.1, start (1, 0):
  //   r -> -0.05, w -> 1 + 0.1*(-0.05) = 0.995, r -> -0.05 - 0.05*0.995 = -0.09975.
  LeapfrogResult res = leapfrog({1.0}, {0.0}, 0.1, 1, {}, std_normal_pot());
  REQUIRE_FALSE(res.divergent);
  CHECK(oracle::rel_err(res.omega[0], 0.995) < 1e-14);
  CHECK(oracle::rel_err(res.r[0], -0.09975) < 1e-14);
  CHECK(oracle::rel_err(res.u_final, 0.5 * 0.995 * 0.995) < 1e-14);
  CHECK(res.grad_evals == 2);  // start gradient plus one per drift step
}

TEST_CASE("leapfrog accepts a precomputed start gradient without changing the result", "[hmc]") {
  auto pot = quad_pot();
  std::vector<double> w0{0.8, -0.4}, r0{0.3, 0.7};
  auto [u0, g0] = pot(w0);
  LeapfrogResult a = leapfrog(w0, r0, 0.05, 9, {}, pot);
  LeapfrogResult b = leapfrog(w0, r0, 0.05, 9, {}, pot, &g0);
  CHECK(a.omega == b.omega);
  CHECK(a.r == b.r);
  CHECK(a.u_final == b.u_final);
  CHECK(b.grad_evals == a.grad_evals - 1);
}

TEST_CASE("leapfrog is reversible under momentum flip", "[hmc]") {
  SECTION("2-D quadratic target") {
    auto pot = quad_pot();
    std::vector<double> w0{1.0, -0.5}, r0{0.3, 0.7};
    LeapfrogResult fwd = leapfrog(w0, r0, 0.1, 25, {}, pot);
    REQUIRE_FALSE(fwd.divergent);
    std::vector<double> r_flip = fwd.r;
    for (double& x : r_flip) x = -x;
    LeapfrogResult back = leapfrog(fwd.omega, r_flip, 0.1, 25, {}, pot);
    REQUIRE_FALSE(back.divergent);
    for (int i = 0; i < 2; ++i) {
      CHECK(std::abs(back.omega[i] - w0[i]) < 1e-8);
      CHECK(std::abs(back.r[i] + r0[i]) < 1e-8);
    }
  }
  SECTION("network posterior potential") {
    NetworkSpec s = toy_spec();
    NetworkState<double> st = build_network<double>(s, 3);
    Tensor<double> x({2, 1, 8, 8});
    oracle::fill_uniform(x, 30);
    Tensor<double> y = predict(st, x);
    std::vector<double> m_omega = flatten(st);
    UnetPotential<double> pot(s, st.manifest, st.running, x, y, m_omega, 0.1, 0.01);

    std::vector<double> w0 = m_omega;
    std::vector<double> r0(w0.size());
    for (size_t i = 0; i < w0.size(); ++i) {
      w0[i] += (i % 2 == 0 ? 0.01 : -0.01);
      r0[i] = (i % 3 == 0 ? 0.05 : -0.03);
    }
    LeapfrogResult fwd = leapfrog(w0, r0, 1e-3, 5, {}, pot);
    REQUIRE_FALSE(fwd.divergent);
    std::vector<double> r_flip = fwd.r;
    for (double& v : r_flip) v = -v;
    LeapfrogResult back = leapfrog(fwd.omega, r_flip, 1e-3, 5, {}, pot);
    REQUIRE_FALSE(back.divergent);
    double werr = 0.0, rerr = 0.0;
    for (size_t i = 0; i < w0.size(); ++i) {
      werr = std::max(werr, std::abs(back.omega[i] - w0[i]));
      rerr = std::max(rerr, std::abs(back.r[i] + r0[i]));
    }
    CHECK(werr < 1e-8);
    CHECK(rerr < 1e-8);
  }
}

TEST_CASE("Hamiltonian error scales as eps^2 at fixed integration time", "[hmc]") {
  auto pot = quad_pot();
  std::vector<double> w0{1.0, -0.5}, r0{0.3, 0.7};
  const double h0 = pot(w0).first + kinetic_energy(r0, {});
  std::vector<double> log_eps, log_err;
  for (int k = 0; k < 5; ++k) {
    const double eps = 0.1 / std::pow(2.0, k);
    const int L = 8 << k;  // L * eps = 0.8 for every k
    LeapfrogResult res = leapfrog(w0, r0, eps, L, {}, pot);
    REQUIRE_FALSE(res.divergent);
    const double dh = std::abs(res.u_final + kinetic_energy(res.r, {}) - h0);
    REQUIRE(dh > 0.0);
    log_eps.push_back(std::log(eps));
    log_err.push_back(std::log(dh));
  }
  // Least-squares slope of log|dH| against log(eps).
  double mx = 0.0, my = 0.0;
  for (size_t i = 0; i < log_eps.size(); ++i) {
    mx += log_eps[i];
    my += log_err[i];
  }
  mx /= static_cast<double>(log_eps.size());
  my /= static_cast<double>(log_eps.size());
  double sxy = 0.0, sxx = 0.0;
  for (size_t i = 0; i < log_eps.size(); ++i) {
    sxy += (log_eps[i] - mx) * (log_err[i] - my);
    sxx += (log_eps[i] - mx) * (log_eps[i] - mx);
  }
  const double slope = sxy / sxx;
  CHECK(slope > 1.8);
  CHECK(slope < 2.2);
}

TEST_CASE("one leapfrog step preserves phase-space volume", "[hmc]") {
  // Numerical Jacobian of (w, r) -> leapfrog(w, r, eps, 1) on a 2-D target:
  // the determinant of the 4x4 matrix must equal 1.
  auto pot = quad_pot();
  const double eps = 0.1, h = 1e-5;
  std::vector<double> base{0.7, -0.3, 0.4, 0.9};  // (w0, w1, r0, r1)
  auto step = [&](const std::vector<double>& z) {
    LeapfrogResult res = leapfrog({z[0], z[1]}, {z[2], z[3]}, eps, 1, {}, pot);
    return std::vector<double>{res.omega[0], res.omega[1], res.r[0], res.r[1]};
  };
  Eigen::Matrix4d J;
  for (int j = 0; j < 4; ++j) {
    std::vector<double> zp = base, zm = base;
    zp[j] += h;
    zm[j] -= h;
    std::vector<double> fp = step(zp), fm = step(zm);
    for (int i = 0; i < 4; ++i) J(i, j) = (fp[i] - fm[i]) / (2.0 * h);
  }
  CHECK(std::abs(J.determinant() - 1.0) < 1e-6);
}

TEST_CASE("Metropolis acceptance rule worked examples", "[hmc]") {
  CHECK(mh_accept(5.0, 5.0, 0.999999));            // equal energies always accept
  CHECK(mh_accept(3.0, 1.0, 0.999999));            // downhill always accepts
  const double p = std::exp(-0.5);                 // ~0.60653 for dH = +0.5
  CHECK(mh_accept(1.0, 1.5, p - 1e-6));
  CHECK_FALSE(mh_accept(1.0, 1.5, p + 1e-6));
}

TEST_CASE("chain on a 2-D standard normal reproduces the target moments", "[hmc]") {
  HmcConfig cfg;
  cfg.eps = 0.3;
  cfg.leapfrog_steps = 10;
  cfg.n_samples = 5000;
  cfg.burn_in = 200;
  cfg.seed = 11;
  ChainTrace trace = sample_chain({0.5, -0.5}, std_normal_pot(), cfg);
  REQUIRE(trace.samples.size() == 5000);
  CHECK(trace.accepted.size() == 5200);
  CHECK(trace.acceptance_rate() > 0.6);
  CHECK(trace.divergent == 0);

  for (int k = 0; k < 2; ++k) {
    std::vector<double> coord = oracle::component(trace.samples, k);
    const double ess = effective_sample_size(coord);
    CHECK(ess > 100.0);
    double mean = 0.0;
    for (double v : coord) mean += v;
    mean /= static_cast<double>(coord.size());
    double var = 0.0;
    for (double v : coord) var += (v - mean) * (v - mean);
    var /= static_cast<double>(coord.size() - 1);
    const double se = std::sqrt(var / ess);
    CHECK(std::abs(mean) <= 3.0 * se);              // target mean is 0
    CHECK(oracle::rel_err(var, 1.0) < 0.10);        // target variance is 1
  }

  SECTION("marginal passes a KS test against the target at the 1% level") {
    std::vector<double> z = oracle::component(trace.samples, 0);
    const double n_eff = effective_sample_size(z);
    const double d = oracle::ks_statistic_normal(z);
    CHECK(d < oracle::ks_critical_1pct(n_eff));
  }
}

TEST_CASE("chain matches the conjugate Bayesian linear regression posterior", "[hmc]") {
  const int n = 40, d = 5;
  const double s2_noise = 0.25, s2_prior = 10.0;
  std::vector<double> xraw = oracle::uniform_vector(n * d, 101);
  std::vector<double> noise = oracle::uniform_vector(n, 102, -0.5, 0.5);
  const std::vector<double> beta_true{1.5, -2.0, 0.8, 2.5, -1.2};
  Eigen::MatrixXd X(n, d);
  Eigen::VectorXd y(n);
  for (int i = 0; i < n; ++i) {
    double dot = 0.0;
    for (int j = 0; j < d; ++j) {
      X(i, j) = xraw[static_cast<size_t>(i * d + j)];
      dot += X(i, j) * beta_true[static_cast<size_t>(j)];
    }
    y(i) = dot + noise[static_cast<size_t>(i)];
  }
  oracle::BlrPosterior post = oracle::blr_posterior(X, y, s2_noise, s2_prior);

  auto pot = [&](const std::vector<double>& w) {
    Eigen::Map<const Eigen::VectorXd> b(w.data(), d);
    Eigen::VectorXd resid = y - X * b;
    const double u = resid.squaredNorm() / (2.0 * s2_noise) + b.squaredNorm() / (2.0 * s2_prior);
    Eigen::VectorXd g = -(X.transpose() * resid) / s2_noise + b / s2_prior;
    return std::pair<double, std::vector<double>>(u, std::vector<double>(g.data(), g.data() + d));
  };

  HmcConfig cfg;
  cfg.eps = 0.02;
  cfg.leapfrog_steps = 10;
  cfg.n_samples = 6000;
  cfg.burn_in = 300;
  cfg.seed = 13;
  ChainTrace trace = sample_chain(std::vector<double>(d, 0.0), pot, cfg);
  CHECK(trace.acceptance_rate() > 0.8);

  std::vector<double> mean = oracle::chain_mean(trace.samples);
  Eigen::MatrixXd cov = oracle::chain_cov(trace.samples);
  for (int k = 0; k < d; ++k) {
    std::vector<double> coord = oracle::component(trace.samples, k);
    const double ess = effective_sample_size(coord);
    const double se = std::sqrt(cov(k, k) / ess);
    CHECK(std::abs(mean[static_cast<size_t>(k)] - post.mean(k)) <= 3.0 * se);
    CHECK(oracle::rel_err(mean[static_cast<size_t>(k)], post.mean(k)) < 0.05);
    CHECK(oracle::rel_err(cov(k, k), post.cov(k, k)) < 0.10);
  }
}

TEST_CASE("an oversized step size collapses acceptance and aborts", "[hmc]") {
  HmcConfig cfg;
  cfg.eps = 10.0;  // far beyond the stability limit of the unit Gaussian
  cfg.leapfrog_steps = 20;
  cfg.n_samples = 500;
  cfg.seed = 17;
  CHECK_THROWS_WITH(sample_chain({1.0, 0.0}, std_normal_pot(), cfg),
                    Catch::Matchers::ContainsSubstring("reduce eps"));

  SECTION("the tuner walks the step size back down until acceptance recovers") {
    HmcConfig tcfg = cfg;
    tcfg.eps = 2.5;
    TuneResult tuned = tune_step_size({1.0, 0.0}, std_normal_pot(), tcfg, 0.6, 20);
    CHECK(tuned.acceptance >= 0.6);
    CHECK(tuned.eps < 2.5 + 1e-12);
    REQUIRE_FALSE(tuned.tried.empty());
    CHECK(tuned.tried.front() == 2.5);
    for (size_t i = 1; i < tuned.tried.size(); ++i)
      CHECK(tuned.tried[i] == 0.5 * tuned.tried[i - 1]);
  }
}

TEST_CASE("rejected trajectories duplicate the previous sample exactly", "[hmc]") {
  HmcConfig cfg;
  cfg.eps = 1.9;  // stable but inaccurate: frequent rejections
  cfg.leapfrog_steps = 7;
  cfg.n_samples = 400;
  cfg.seed = 19;
  std::vector<double> init{0.3, -0.2};
  ChainTrace trace = sample_chain(init, std_normal_pot(), cfg);
  const double acc = trace.acceptance_rate();
  REQUIRE(acc > 0.0);
  REQUIRE(acc < 1.0);
  for (size_t i = 0; i < trace.samples.size(); ++i) {
    if (trace.accepted[i]) continue;
    const std::vector<double>& prev = i == 0 ? init : trace.samples[i - 1];
    CHECK(trace.samples[i] == prev);  // bitwise duplication, no re-noising
  }
}

TEST_CASE("chains are bitwise reproducible in the seed", "[hmc]") {
  HmcConfig cfg;
  cfg.eps = 0.3;
  cfg.leapfrog_steps = 10;
  cfg.n_samples = 50;
  cfg.seed = 23;
  ChainTrace a = sample_chain({0.1, 0.2}, std_normal_pot(), cfg);
  ChainTrace b = sample_chain({0.1, 0.2}, std_normal_pot(), cfg);
  CHECK(a.samples == b.samples);
  CHECK(a.accepted == b.accepted);
  CHECK(a.h_before == b.h_before);

  cfg.seed = 24;
  ChainTrace c = sample_chain({0.1, 0.2}, std_normal_pot(), cfg);
  CHECK(a.samples != c.samples);
}

TEST_CASE("chain configuration validation", "[hmc]") {
  HmcConfig cfg;
  cfg.eps = 0.0;
  CHECK_THROWS_AS(sample_chain({0.0}, std_normal_pot(), cfg), config_error);
  cfg.eps = 0.1;
  cfg.mass_diag = {1.0, 1.0};  // wrong length for a 1-D target
  CHECK_THROWS_AS(sample_chain({0.0}, std_normal_pot(), cfg), config_error);
  cfg.mass_diag = {-1.0};
  CHECK_THROWS_AS(sample_chain({0.0}, std_normal_pot(), cfg), config_error);
}

TEST_CASE("autocorrelation and effective sample size diagnostics", "[hmc]") {
  SECTION("lag zero of any non-constant series is exactly 1") {
    std::vector<double> s = oracle::uniform_vector(64, 50);
    CHECK(autocorrelation(s, 0) == 1.0);
  }
  SECTION("independent draws have near-zero lag-1 autocorrelation") {
    std::mt19937_64 eng(7);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> s(10000);
    for (double& v : s) v = nd(eng);
    CHECK(std::abs(autocorrelation(s, 1)) < 0.05);
    CHECK(effective_sample_size(s) > 5000.0);
  }
  SECTION("a strictly alternating series has lag-1 autocorrelation -1") {
    std::vector<double> s(100);
    for (size_t i = 0; i < s.size(); ++i) s[i] = (i % 2 == 0) ? 1.0 : -1.0;
    CHECK(autocorrelation(s, 1) == -1.0);
  }
  SECTION("a constant series is degenerate and reports 0") {
    std::vector<double> s(32, 3.5);
    bool degenerate = false;
    CHECK(autocorrelation(s, 1, &degenerate) == 0.0);
    CHECK(degenerate);
    CHECK(effective_sample_size(s) == 1.0);
  }
  SECTION("argument guards") {
    std::vector<double> s{1.0, 2.0, 3.0};
    CHECK_THROWS_AS(autocorrelation(s, -1), std::invalid_argument);
    CHECK_THROWS_AS(autocorrelation(s, 3), std::invalid_argument);
    CHECK_THROWS_AS(effective_sample_size({1.0}), std::invalid_argument);
  }
}

TEST_CASE("network posterior potential decomposes into data and prior terms", "[hmc]") {
  NetworkSpec s = toy_spec();
  NetworkState<double> st = build_network<double>(s, 3);
  Tensor<double> x({2, 1, 8, 8});
  oracle::fill_uniform(x, 31);
  Tensor<double> y = predict(st, x);
  std::vector<double> m_omega = flatten(st);
  const double s2p = 0.1, s2a = 0.01;

  SECTION("at the prior mean with a perfect fit, U and its gradient vanish") {
    UnetPotential<double> pot(s, st.manifest, st.running, x, y, m_omega, s2p, s2a);
    auto [u, g] = pot(m_omega);
    CHECK(u == 0.0);
    for (double v : g) CHECK(v == 0.0);
    CHECK(pot.grad_evals() == 1);
  }

  std::vector<double> w1 = m_omega;
  for (size_t i = 0; i < w1.size(); ++i) w1[i] += (i % 2 == 0 ? 0.01 : -0.01);
  NetworkState<double> st1 = st;
  unflatten_into(st1, w1);
  const Tensor<double> pred1 = predict(st1, x);
  double data_term = 0.0;
  for (long long i = 0; i < pred1.numel(); ++i) {
    const double r = pred1.data()[i] - y.data()[i];
    data_term += r * r;
  }
  data_term /= 2.0 * s2a;
  double sq_dev = 0.0;
  for (size_t i = 0; i < w1.size(); ++i) {
    const double dv = w1[i] - m_omega[i];
    sq_dev += dv * dv;
  }

  SECTION("away from the mean, U equals data term plus prior penalty") {
    UnetPotential<double> pot(s, st.manifest, st.running, x, y, m_omega, s2p, s2a);
    auto [u, g] = pot(w1);
    CHECK(oracle::rel_err(u, data_term + sq_dev / (2.0 * s2p)) < 1e-10);
    (void)g;
  }

  SECTION("doubling the prior variance halves the prior term") {
    UnetPotential<double> pot1(s, st.manifest, st.running, x, y, m_omega, s2p, s2a);
    UnetPotential<double> pot2(s, st.manifest, st.running, x, y, m_omega, 2.0 * s2p, s2a);
    const double prior1 = pot1(w1).first - data_term;
    const double prior2 = pot2(w1).first - data_term;
    CHECK(oracle::rel_err(prior1, 2.0 * prior2) < 1e-9);
    CHECK(oracle::rel_err(prior1, sq_dev / (2.0 * s2p)) < 1e-9);
  }

  SECTION("gradient matches central finite differences") {
    UnetPotential<double> pot(s, st.manifest, st.running, x, y, m_omega, s2p, s2a);
    std::vector<double> analytic = pot(w1).second;
    auto f = [&](const std::vector<double>& w) { return pot(w).first; };
    CHECK(oracle::fd_gradient_rel_err(f, w1, analytic, 1e-6) < 1e-4);
  }

  SECTION("evaluation results do not depend on the shard count") {
    Tensor<double> x8({8, 1, 8, 8});
    oracle::fill_uniform(x8, 32);
    NetworkState<double> stc = st;
    Tensor<double> y8 = predict(stc, x8);
    UnetPotential<double> p1(s, st.manifest, st.running, x8, y8, m_omega, s2p, s2a, 2, 1);
    UnetPotential<double> p3(s, st.manifest, st.running, x8, y8, m_omega, s2p, s2a, 2, 3);
    auto [u1, g1] = p1(w1);
    auto [u3, g3] = p3(w1);
    // Shard merge order changes the floating-point summation order, so the
    // comparison is tight but not bitwise.
    CHECK(oracle::rel_err(u1, u3) < 1e-12);
    CHECK(oracle::max_rel_err(g1.data(), g3.data(), static_cast<long long>(g1.size())) < 1e-10);
  }
}

TEST_CASE("chain summary reports acceptance, energy drift, and ESS", "[hmc]") {
  HmcConfig cfg;
  cfg.eps = 0.3;
  cfg.leapfrog_steps = 10;
  cfg.n_samples = 200;
  cfg.burn_in = 20;
  cfg.seed = 29;
  ChainTrace trace = sample_chain({0.0, 0.0}, std_normal_pot(), cfg);
  nlohmann::json j = chain_summary_json(trace);
  CHECK(j["iterations"].get<size_t>() == 220);
  CHECK(j["stored_samples"].get<size_t>() == 200);
  CHECK(j["acceptance_rate"].get<double>() == trace.acceptance_rate());
  CHECK(j["mean_abs_dh"].get<double>() >= 0.0);
  CHECK(j["ess"].is_object());
  CHECK_FALSE(j["ess"].empty());
}

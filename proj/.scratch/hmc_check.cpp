// Scratch: HMC analytic-target sanity. Not part of the build.
#include <cstdio>

#include "fstk/hmc.hpp"

using namespace fstk;

int main() {
  auto harmonic = [](const std::vector<double>& w) {
    double u = 0.0;
    std::vector<double> g(w.size());
    for (size_t i = 0; i < w.size(); ++i) {
      u += 0.5 * w[i] * w[i];
      g[i] = w[i];
    }
    return std::make_pair(u, g);
  };

  // hand value: (1,0), eps=0.1, L=1 -> (0.995, -0.09975)
  LeapfrogResult lf = leapfrog({1.0}, {0.0}, 0.1, 1, {}, harmonic);
  printf("leapfrog hand: omega=%.10g (want 0.995) r=%.10g (want -0.09975)\n", lf.omega[0], lf.r[0]);

  // reversibility
  {
    LeapfrogResult fwd = leapfrog({0.3, -1.2}, {0.7, 0.4}, 0.05, 40, {}, harmonic);
    std::vector<double> nr = {-fwd.r[0], -fwd.r[1]};
    LeapfrogResult back = leapfrog(fwd.omega, nr, 0.05, 40, {}, harmonic);
    printf("reversibility err: %.3g %.3g (momentum: %.3g %.3g)\n", std::abs(back.omega[0] - 0.3),
           std::abs(back.omega[1] + 1.2), std::abs(-back.r[0] - 0.7), std::abs(-back.r[1] - 0.4));
  }

  // 2-D normal chain
  {
    HmcConfig cfg;
    cfg.eps = 0.2;
    cfg.leapfrog_steps = 10;
    cfg.n_samples = 5000;
    cfg.seed = 1234;
    ChainTrace t = sample_chain({0.0, 0.0}, harmonic, cfg);
    double m0 = 0, m1 = 0, v0 = 0, v1 = 0;
    for (auto& s : t.samples) {
      m0 += s[0];
      m1 += s[1];
    }
    m0 /= t.samples.size();
    m1 /= t.samples.size();
    for (auto& s : t.samples) {
      v0 += (s[0] - m0) * (s[0] - m0);
      v1 += (s[1] - m1) * (s[1] - m1);
    }
    v0 /= t.samples.size();
    v1 /= t.samples.size();
    std::vector<double> c0(t.samples.size());
    for (size_t i = 0; i < t.samples.size(); ++i) c0[i] = t.samples[i][0];
    const double ess = effective_sample_size(c0);
    printf("2d normal: mean (%.4f, %.4f), var (%.4f, %.4f), acc %.3f, ess %.0f\n", m0, m1, v0, v1,
           t.acceptance_rate(), ess);
    printf("  mean bound 3*std/sqrt(ess) = %.4f\n", 3.0 * std::sqrt(v0 / ess));
  }

  // dH -> O(eps^2): slope of log(maxdH) vs log(eps)
  {
    double prev_dh = 0, prev_eps = 0;
    for (double eps : {0.2, 0.1, 0.05, 0.025}) {
      const int L = static_cast<int>(std::llround(2.0 / eps));
      auto [u0, g0] = harmonic(std::vector<double>{1.0});
      const double h0 = u0 + 0.5 * 0.3 * 0.3;
      LeapfrogResult r = leapfrog({1.0}, {0.3}, eps, L, {}, harmonic);
      const double h1 = r.u_final + 0.5 * r.r[0] * r.r[0];
      const double dh = std::abs(h1 - h0);
      if (prev_eps > 0)
        printf("eps %.3f dh %.3e slope %.3f\n", eps, dh,
               std::log(prev_dh / dh) / std::log(prev_eps / eps));
      prev_dh = dh;
      prev_eps = eps;
    }
  }

  // big eps -> acceptance collapse (abort expected)
  {
    HmcConfig cfg;
    cfg.eps = 10.0;
    cfg.leapfrog_steps = 10;
    cfg.n_samples = 200;
    cfg.seed = 5;
    try {
      ChainTrace t = sample_chain({0.0, 0.0}, harmonic, cfg);
      printf("eps=10 acceptance: %.4f (no abort)\n", t.acceptance_rate());
    } catch (const numeric_error& e) {
      printf("eps=10 aborted as expected: %s\n", e.what());
    }
  }

  // tuner: start eps=10, should shrink
  {
    HmcConfig cfg;
    cfg.eps = 10.0;
    cfg.leapfrog_steps = 10;
    cfg.seed = 42;
    TuneResult tr = tune_step_size({0.0, 0.0}, harmonic, cfg, 0.6, 20);
    printf("tuned eps=%.4g acceptance=%.3f after %zu tries\n", tr.eps, tr.acceptance,
           tr.tried.size());
  }

  // autocorrelation basics
  {
    std::vector<double> alt;
    for (int i = 0; i < 100; ++i) alt.push_back(i % 2 == 0 ? 1.0 : -1.0);
    printf("rho(0)=%.3f rho(1) alternating=%.3f\n", autocorrelation(alt, 0),
           autocorrelation(alt, 1));
    bool degen = false;
    std::vector<double> cst(50, 3.0);
    const double r = autocorrelation(cst, 1, &degen);
    printf("constant series rho=%.3f degenerate=%d\n", r, (int)degen);
  }
  return 0;
}

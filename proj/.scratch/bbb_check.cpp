// Scratch: BBB conjugate-scalar convergence + ELBO FD gradients. Not in build.
#include <cstdio>

#include "fstk/bbb.hpp"

using namespace fstk;

int main() {
  // Conjugate scalar-mean problem: y_i ~ N(w, s2a), prior w ~ N(0, s2p).
  const double s2a = 0.25, s2p = 1.0;
  const int n = 20;
  Rng data_rng(99);
  std::vector<double> y(n);
  double ysum = 0.0;
  for (double& v : y) {
    v = 1.5 + std::sqrt(s2a) * data_rng.normal();
    ysum += v;
  }
  const double post_var = 1.0 / (n / s2a + 1.0 / s2p);
  const double post_mean = post_var * (ysum / s2a);
  const double post_std = std::sqrt(post_var);
  printf("posterior: mean %.6f std %.6f\n", post_mean, post_std);

  // variational scalar state: mu, rho; lambda = 1 (true ELBO)
  double mu = 0.0, rho = inverse_softplus(0.05);
  AdamState<double> adam(2);
  Rng noise(7);
  const int M = 16;
  const double lr = 0.002;
  for (int step = 0; step < 5000; ++step) {
    // average M reparameterized draws per step to cut gradient variance
    double gmu_acc = 0.0, grho_acc = 0.0;
    for (int k = 0; k < M; ++k) {
    const double eps = noise.normal();
    Tape64 tape;
    Var64 vmu = tape.leaf(Tensor64::scalar(mu), true);
    Var64 vrho = tape.leaf(Tensor64::scalar(rho), true);
    Var64 sigma = softplus(vrho);
    Var64 veps = tape.constant(Tensor64::scalar(eps));
    Var64 omega = add(vmu, mul(sigma, veps));
    // nll: sum over observations of (y_i - w)^2/(2 s2a) + const
    Var64 yv = tape.constant(Tensor64::from_data({n}, y));
    Var64 wb = tape.emit(  // broadcast omega over n obs via slice trick: use mul with ones
        "bcast", Tensor64({n}, omega.value().data()[0]), {omega.id},
        [oid = omega.id](Tape64& t, const TapeNode<double>& nd) {
          double acc = 0.0;
          for (long long i = 0; i < nd.grad.numel(); ++i) acc += nd.grad.data()[i];
          Tensor64 g = Tensor64::scalar(acc);
          t.accumulate(oid, g);
        });
    Var64 nll = add_scalar(scale(sum_squares(sub(wb, yv)), 1.0 / (2.0 * s2a)),
                           n / 2.0 * std::log(2.0 * M_PI * s2a));
    Var64 logq = gaussian_logpdf_sum(omega, vmu, sigma);
    Var64 pm = tape.constant(Tensor64::scalar(0.0));
    Var64 ps = tape.constant(Tensor64::scalar(std::sqrt(s2p)));
    Var64 logp = gaussian_logpdf_sum(omega, pm, ps);
    Var64 loss = add(nll, sub(logq, logp));
    tape.backward(loss);
    gmu_acc += tape.grad(vmu).data()[0];
    grho_acc += tape.grad(vrho).data()[0];
    }
    std::vector<double> params = {mu, rho};
    std::vector<double> grad = {gmu_acc / M, grho_acc / M};
    adam_step(params, grad, adam, lr);
    mu = params[0];
    rho = params[1];
  }
  const double sig = softplus_scalar(rho);
  printf("learned: mu %.6f (err %.3f%%) sigma %.6f (err %.3f%%)\n", mu,
         100.0 * std::abs(mu - post_mean) / std::abs(post_mean), sig,
         100.0 * std::abs(sig - post_std) / post_std);

  // ELBO FD gradcheck on a tiny unet
  {
    NetworkSpec spec;
    spec.height = 8;
    spec.width = 8;
    spec.encoder_filters = {2, 4};
    spec.decoder_filters = {2};
    BbbConfig cfg;
    cfg.seed = 3;
    VariationalState64 vs = init_variational(spec, cfg);
    vs.lambda = 0.5;  // make KL term visible
    Rng xr(5);
    Tensor64 x({2, 1, 8, 8}), t({2, 1, 8, 8});
    for (long long i = 0; i < x.numel(); ++i) x.data()[i] = xr.normal();
    for (long long i = 0; i < t.numel(); ++i) t.data()[i] = xr.normal();
    std::vector<std::vector<double>> noise(1, std::vector<double>(vs.mu.size()));
    for (double& v : noise[0]) v = xr.normal();

    auto eval = [&](const std::vector<double>& mu_v, const std::vector<double>& rho_v,
                    const std::vector<double>& det_v) {
      VariationalState64 tmp = vs;
      tmp.mu = mu_v;
      tmp.rho = rho_v;
      tmp.det_params = det_v;
      Tape64 tape;
      // eval-mode forward for FD stability (train-mode running updates don't
      // matter for the value but keep it simple)
      ElboGraph<double> g = elbo_loss(tape, tmp, x, t, noise, 1.0, false);
      return g.breakdown.total;
    };

    Tape64 tape;
    ElboGraph<double> g = elbo_loss(tape, vs, x, t, noise, 1.0, false);
    tape.backward(g.loss);
    const Tensor64& gmu = tape.grad(g.mu_leaf);
    const Tensor64& grho = tape.grad(g.rho_leaf);
    const Tensor64& gdet = tape.grad(g.det_leaf);
    Rng pick(11);
    double worst = 0.0;
    const double h = 1e-6;
    for (int rep = 0; rep < 12; ++rep) {
      const int which = static_cast<int>(pick.below(3));
      std::vector<double> mu_v = vs.mu, rho_v = vs.rho, det_v = vs.det_params;
      double* vecp;
      double an;
      size_t idx;
      if (which == 0) {
        idx = pick.below(mu_v.size());
        vecp = &mu_v[idx];
        an = gmu.data()[idx];
      } else if (which == 1) {
        idx = pick.below(rho_v.size());
        vecp = &rho_v[idx];
        an = grho.data()[idx];
      } else {
        idx = pick.below(det_v.size());
        vecp = &det_v[idx];
        an = gdet.data()[idx];
      }
      const double orig = *vecp;
      *vecp = orig + h;
      const double fp = eval(mu_v, rho_v, det_v);
      *vecp = orig - h;
      const double fm = eval(mu_v, rho_v, det_v);
      *vecp = orig;
      const double fd = (fp - fm) / (2 * h);
      const double re = std::abs(fd - an) / std::max(std::abs(an), 1e-8);
      if (re > worst) {
        worst = re;
        printf("  [which=%d idx=%zu an=%.3e fd=%.3e]\n", which, idx, an, fd);
      }
    }
    printf("elbo fd worst rel err: %.3g\n", worst);
    printf("breakdown: nll %.4f logq %.4f logp %.4f total %.4f (check %.2e)\n", g.breakdown.nll,
           g.breakdown.log_q, g.breakdown.log_p, g.breakdown.total,
           std::abs(g.breakdown.total -
                    (g.breakdown.nll + vs.lambda * (g.breakdown.log_q - g.breakdown.log_p))));
  }
  return 0;
}

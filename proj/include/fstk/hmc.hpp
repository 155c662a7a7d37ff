#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fstk/metrics.hpp"
#include "fstk/parallel.hpp"
#include "fstk/rng.hpp"
#include "fstk/trainer.hpp"
#include "fstk/unet.hpp"

// Hamiltonian Monte Carlo over a flat parameter vector: leapfrog
// integration, Metropolis-Hastings correction, chain diagnostics, and the
// posterior potential for the trained network.
//
// Hamiltonian convention: dw/dt = dH/dr, dr/dt = -dH/dw (the standard
// leapfrog scheme). Additive constants in U are dropped throughout; only
// differences of H enter the acceptance test, so acceptance is unaffected.

namespace fstk {

struct HmcConfig {
  double eps = 0.0005;
  int leapfrog_steps = 300;  // L
  int n_samples = 1000;      // N_s, stored after burn-in
  int burn_in = 0;
  std::vector<double> mass_diag;  // empty = identity
  double sigma2_prior = 0.1;      // per-parameter prior variance
  double sigma2_alpha = 0.01;
  uint64_t seed = 0;
  // Abort when this many consecutive trajectories reject (0 disables).
  int reject_abort_window = 50;
  double divergence_threshold = 1000.0;  // |dH| beyond this marks divergence

  void validate(long long d) const {
    check_config(eps > 0.0, "hmc: eps must be positive");
    check_config(leapfrog_steps >= 1, "hmc: leapfrog_steps must be >= 1");
    check_config(n_samples >= 1, "hmc: n_samples must be >= 1");
    check_config(burn_in >= 0, "hmc: burn_in must be >= 0");
    check_config(reject_abort_window >= 0, "hmc: reject_abort_window must be >= 0");
    check_config(divergence_threshold > 0.0, "hmc: divergence_threshold must be positive");
    if (!mass_diag.empty()) {
      check_config(static_cast<long long>(mass_diag.size()) == d,
                   "hmc: mass_diag length " + std::to_string(mass_diag.size()) +
                       " != parameter count " + std::to_string(d));
      for (double m : mass_diag)
        check_config(m > 0.0, "hmc: mass_diag entries must be strictly positive");
    }
  }
};

struct ChainTrace {
  std::vector<std::vector<double>> samples;  // n_samples x d, post burn-in
  std::vector<uint8_t> accepted;             // one flag per trajectory (incl. burn-in)
  std::vector<double> h_before, h_after;     // per trajectory
  long long divergent = 0;
  uint64_t seed = 0;

  double acceptance_rate() const {
    if (accepted.empty()) return 0.0;
    long long acc = 0;
    for (uint8_t a : accepted) acc += a;
    return static_cast<double>(acc) / static_cast<double>(accepted.size());
  }
};

// K(r) = 1/2 sum_i r_i^2 / m_i. Empty mass = identity.
inline double kinetic_energy(const std::vector<double>& r, const std::vector<double>& mass_diag) {
  if (!mass_diag.empty()) {
    check_arg(mass_diag.size() == r.size(), "kinetic_energy: mass length mismatch");
    for (double m : mass_diag) check_arg(m > 0.0, "kinetic_energy: non-positive mass entry");
  }
  double acc = 0.0;
  for (size_t i = 0; i < r.size(); ++i) {
    const double m = mass_diag.empty() ? 1.0 : mass_diag[i];
    acc += r[i] * r[i] / m;
  }
  return 0.5 * acc;
}

// Accept iff u < min(1, exp(H_old - H_new)).
inline bool mh_accept(double h_old, double h_new, double u) {
  const double dh = h_old - h_new;
  if (dh >= 0.0) return true;
  return u < std::exp(dh);
}

// A potential is any callable omega -> (U, dU/domega). Implementations must
// return a non-finite U (rather than throw) when the position is unusable,
// so the integrator can mark the trajectory divergent.
using Potential = std::function<std::pair<double, std::vector<double>>(const std::vector<double>&)>;

struct LeapfrogResult {
  std::vector<double> omega;
  std::vector<double> r;
  double u_final = 0.0;              // U at the final position
  std::vector<double> grad_final;    // gradient at the final position
  bool divergent = false;
  int grad_evals = 0;
};

namespace detail {

inline bool finite_all(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace detail

// Kick-drift-kick leapfrog: r -= (eps/2) grad U(w); then L times
// { w += eps * M^-1 r; if not last: r -= eps grad U(w) }; final half kick.
// grad0 may carry a precomputed gradient at the start position (saves one
// potential evaluation per trajectory); pass nullptr to evaluate internally.
template <typename PotentialFn>
LeapfrogResult leapfrog(std::vector<double> omega, std::vector<double> r, double eps, int L,
                        const std::vector<double>& mass_diag, PotentialFn&& pot,
                        const std::vector<double>* grad0 = nullptr) {
  check_arg(eps > 0.0, "leapfrog: eps must be positive");
  check_arg(L >= 1, "leapfrog: L must be >= 1");
  check_arg(omega.size() == r.size(), "leapfrog: position/momentum length mismatch");
  LeapfrogResult res;
  auto diverge = [&]() {
    res.divergent = true;
    res.omega = std::move(omega);
    res.r = std::move(r);
    res.u_final = std::numeric_limits<double>::quiet_NaN();
    return res;
  };

  std::vector<double> g;
  if (grad0 != nullptr) {
    g = *grad0;
  } else {
    auto [u0, g0] = pot(omega);
    ++res.grad_evals;
    if (!std::isfinite(u0) || !detail::finite_all(g0)) return diverge();
    g = std::move(g0);
  }
  for (size_t i = 0; i < r.size(); ++i) r[i] -= 0.5 * eps * g[i];
  for (int step = 0; step < L; ++step) {
    for (size_t i = 0; i < omega.size(); ++i) {
      const double m = mass_diag.empty() ? 1.0 : mass_diag[i];
      omega[i] += eps * r[i] / m;
    }
    if (!detail::finite_all(omega)) return diverge();
    auto [u, gn] = pot(omega);
    ++res.grad_evals;
    if (!std::isfinite(u) || !detail::finite_all(gn)) return diverge();
    const double kick = (step + 1 < L) ? eps : 0.5 * eps;
    for (size_t i = 0; i < r.size(); ++i) r[i] -= kick * gn[i];
    if (step + 1 == L) {
      res.u_final = u;
      res.grad_final = std::move(gn);
    }
  }
  if (!detail::finite_all(r)) return diverge();
  res.omega = std::move(omega);
  res.r = std::move(r);
  return res;
}

// One HMC chain. Per iteration: draw r ~ N(0, M), integrate, MH-correct;
// rejected steps duplicate the previous position exactly. Deterministic in
// cfg.seed. Draw order per iteration is fixed: d momentum normals, then one
// uniform.
template <typename PotentialFn>
ChainTrace sample_chain(const std::vector<double>& init, PotentialFn&& pot, const HmcConfig& cfg) {
  const long long d = static_cast<long long>(init.size());
  cfg.validate(d);
  check_arg(detail::finite_all(init), "sample_chain: non-finite initial position");

  Rng rng(cfg.seed);
  ChainTrace trace;
  trace.seed = cfg.seed;
  trace.samples.reserve(static_cast<size_t>(cfg.n_samples));

  std::vector<double> omega = init;
  auto [u_cur, g_cur] = pot(omega);
  check_numeric(std::isfinite(u_cur) && detail::finite_all(g_cur),
                "sample_chain: potential non-finite at the initial position");

  const int total = cfg.burn_in + cfg.n_samples;
  int consecutive_rejects = 0;
  std::vector<double> r(static_cast<size_t>(d));
  for (int it = 0; it < total; ++it) {
    for (long long i = 0; i < d; ++i) {
      const double m = cfg.mass_diag.empty() ? 1.0 : cfg.mass_diag[static_cast<size_t>(i)];
      r[static_cast<size_t>(i)] = rng.normal() * std::sqrt(m);
    }
    const double u_draw = rng.uniform();
    const double h_old = u_cur + kinetic_energy(r, cfg.mass_diag);
    LeapfrogResult lf = leapfrog(omega, r, cfg.eps, cfg.leapfrog_steps, cfg.mass_diag, pot, &g_cur);
    const double h_new =
        lf.divergent ? std::numeric_limits<double>::quiet_NaN()
                     : lf.u_final + kinetic_energy(lf.r, cfg.mass_diag);
    bool divergent = lf.divergent;
    if (!divergent && std::abs(h_new - h_old) > cfg.divergence_threshold) divergent = true;
    bool accept = false;
    if (!divergent) accept = mh_accept(h_old, h_new, u_draw);
    if (divergent) ++trace.divergent;

    trace.h_before.push_back(h_old);
    trace.h_after.push_back(h_new);
    trace.accepted.push_back(accept ? 1 : 0);
    if (accept) {
      omega = std::move(lf.omega);
      u_cur = lf.u_final;
      g_cur = std::move(lf.grad_final);
      consecutive_rejects = 0;
    } else {
      ++consecutive_rejects;
      if (cfg.reject_abort_window > 0 && consecutive_rejects >= cfg.reject_abort_window)
        throw numeric_error("sample_chain: no accepted trajectory in the last " +
                            std::to_string(consecutive_rejects) +
                            " iterations; step size eps = " + std::to_string(cfg.eps) +
                            " is likely too large - reduce eps and retry");
    }
    if (it >= cfg.burn_in) trace.samples.push_back(omega);
  }
  return trace;
}

// Reduce-only step-size tuner: run short pilot chains from init, halving eps
// until the pilot acceptance rate reaches the target. Pilot chains use a
// dedicated RNG stream per round; the main chain's stream is untouched.
struct TuneResult {
  double eps = 0.0;
  double acceptance = 0.0;
  std::vector<double> tried;
};

template <typename PotentialFn>
TuneResult tune_step_size(const std::vector<double>& init, PotentialFn&& pot, HmcConfig cfg,
                          double target_acceptance = 0.6, int pilot_iterations = 20,
                          double shrink = 0.5, int max_rounds = 16) {
  check_config(target_acceptance > 0.0 && target_acceptance <= 1.0,
               "tune_step_size: target acceptance must lie in (0,1]");
  check_config(pilot_iterations >= 1, "tune_step_size: pilot_iterations must be >= 1");
  check_config(shrink > 0.0 && shrink < 1.0, "tune_step_size: shrink must lie in (0,1)");
  TuneResult res;
  for (int round = 0; round < max_rounds; ++round) {
    HmcConfig pilot = cfg;
    pilot.n_samples = pilot_iterations;
    pilot.burn_in = 0;
    pilot.reject_abort_window = 0;  // pilots are allowed to reject everything
    pilot.seed = Rng::stream(cfg.seed, 0xF57BuLL + static_cast<uint64_t>(round)).next_u64();
    res.tried.push_back(pilot.eps);
    ChainTrace t = sample_chain(init, pot, pilot);
    res.eps = pilot.eps;
    res.acceptance = t.acceptance_rate();
    if (res.acceptance >= target_acceptance) return res;
    cfg.eps *= shrink;
  }
  throw numeric_error("tune_step_size: acceptance target " + std::to_string(target_acceptance) +
                      " not reached after " + std::to_string(max_rounds) +
                      " reductions (last eps = " + std::to_string(res.eps) + ", acceptance = " +
                      std::to_string(res.acceptance) + ")");
}

// ---- diagnostics ----------------------------------------------------------

// Normalized sample autocorrelation at the given lag, with the lag-count
// normalization (mean lagged product over mean square) so that a strictly
// alternating series gives exactly -1 at lag 1. A constant series is
// degenerate: the value is defined as 0 (flag reported when requested).
inline double autocorrelation(const std::vector<double>& series, int lag,
                              bool* degenerate = nullptr) {
  const long long n = static_cast<long long>(series.size());
  check_arg(lag >= 0, "autocorrelation: lag must be >= 0");
  check_arg(n > lag, "autocorrelation: series length must exceed lag");
  if (degenerate != nullptr) *degenerate = false;
  double mean = 0.0;
  for (double x : series) mean += x;
  mean /= static_cast<double>(n);
  double denom = 0.0;
  for (double x : series) denom += (x - mean) * (x - mean);
  if (denom == 0.0) {
    if (degenerate != nullptr) *degenerate = true;
    return 0.0;
  }
  denom /= static_cast<double>(n);
  double num = 0.0;
  for (long long t = 0; t + lag < n; ++t) num += (series[t] - mean) * (series[t + lag] - mean);
  num /= static_cast<double>(n - lag);
  return num / denom;
}

// Effective sample size with initial-positive-sequence truncation: sum
// rho(k) while it stays positive, then ESS = n / (1 + 2 sum), clamped to
// [1, n].
inline double effective_sample_size(const std::vector<double>& series) {
  const long long n = static_cast<long long>(series.size());
  check_arg(n >= 2, "effective_sample_size: need at least 2 points");
  bool degenerate = false;
  autocorrelation(series, 0, &degenerate);
  if (degenerate) return 1.0;
  double s = 0.0;
  for (int k = 1; k < n; ++k) {
    const double rho = autocorrelation(series, k);
    if (rho <= 0.0) break;
    s += rho;
  }
  const double ess = static_cast<double>(n) / (1.0 + 2.0 * s);
  return std::min(static_cast<double>(n), std::max(1.0, ess));
}

// JSON chain summary: acceptance rate, divergences, dH statistics, and ESS
// for a few monitored coordinates (evenly spaced across the vector).
inline nlohmann::json chain_summary_json(const ChainTrace& trace, int monitor = 8) {
  nlohmann::json j;
  j["iterations"] = trace.accepted.size();
  j["stored_samples"] = trace.samples.size();
  j["acceptance_rate"] = trace.acceptance_rate();
  j["divergent"] = trace.divergent;
  j["seed"] = trace.seed;
  double max_abs_dh = 0.0, sum_abs_dh = 0.0;
  long long n_fin = 0;
  for (size_t i = 0; i < trace.h_before.size(); ++i) {
    const double dh = trace.h_after[i] - trace.h_before[i];
    if (!std::isfinite(dh)) continue;
    max_abs_dh = std::max(max_abs_dh, std::abs(dh));
    sum_abs_dh += std::abs(dh);
    ++n_fin;
  }
  j["mean_abs_dh"] = n_fin > 0 ? sum_abs_dh / static_cast<double>(n_fin) : 0.0;
  j["max_abs_dh"] = max_abs_dh;
  nlohmann::json ess = nlohmann::json::object();
  if (!trace.samples.empty() && trace.samples.size() >= 2) {
    const long long d = static_cast<long long>(trace.samples.front().size());
    const int k = static_cast<int>(std::min<long long>(monitor, d));
    for (int i = 0; i < k; ++i) {
      const long long idx = k == 1 ? 0 : i * (d - 1) / (k - 1);
      std::vector<double> coord(trace.samples.size());
      for (size_t s = 0; s < trace.samples.size(); ++s)
        coord[s] = trace.samples[s][static_cast<size_t>(idx)];
      ess["param_" + std::to_string(idx)] = effective_sample_size(coord);
    }
  }
  j["ess"] = ess;
  return j;
}

// ---- posterior potential for the trained network ---------------------------

// U(w) = (1/(2 sigma2_alpha)) sum_i ||f(x_i; w) - y_i||^2
//      + (1/(2 sigma2_prior)) ||w - m_w||^2,  constants dropped.
// Batch norm runs in eval mode with running statistics frozen at their
// pre-trained values, so U is a function of w alone; gamma/beta are part of
// w. Evaluation walks the dataset in fixed chunks; with shards > 1 the
// chunks are distributed round-robin over that many workers and merged in
// shard order, so results depend only on the shard count, not on thread
// scheduling.
template <typename T>
class UnetPotential {
 public:
  UnetPotential(const NetworkSpec& spec, const LayoutManifest& man,
                std::vector<BatchNormRunning<T>> running, Tensor<T> x, Tensor<T> y,
                std::vector<double> m_omega, double sigma2_prior, double sigma2_alpha,
                int chunk = 16, int shards = 1)
      : spec_(spec),
        man_(man),
        running_(std::move(running)),
        x_(std::move(x)),
        y_(std::move(y)),
        m_omega_(std::move(m_omega)),
        sigma2_prior_(sigma2_prior),
        sigma2_alpha_(sigma2_alpha),
        chunk_(chunk),
        shards_(shards) {
    check_arg(chunk_ >= 1, "UnetPotential: chunk must be >= 1");
    check_arg(shards_ >= 1, "UnetPotential: shards must be >= 1");
    check_arg(static_cast<long long>(m_omega_.size()) == man_.total,
              "UnetPotential: prior mean length mismatch");
    check_arg(x_.dim(0) == y_.dim(0), "UnetPotential: input/target count mismatch");
    check_arg(sigma2_prior_ > 0.0 && sigma2_alpha_ > 0.0,
              "UnetPotential: variances must be positive");
  }

  long long grad_evals() const { return evals_; }

  std::pair<double, std::vector<double>> operator()(const std::vector<double>& omega) {
    ++evals_;
    const long long d = man_.total;
    check_arg(static_cast<long long>(omega.size()) == d, "UnetPotential: omega length mismatch");
    const int n = x_.dim(0);
    const int n_chunks = (n + chunk_ - 1) / chunk_;

    std::vector<double> resid_u(static_cast<size_t>(shards_), 0.0);
    std::vector<std::vector<double>> resid_g(static_cast<size_t>(shards_),
                                             std::vector<double>(omega.size(), 0.0));
    std::vector<uint8_t> bad(static_cast<size_t>(shards_), 0);

    parallel_shards(shards_, [&](int shard) {
      for (int c = shard; c < n_chunks; c += shards_) {
        const int lo = c * chunk_;
        const int hi = std::min(lo + chunk_, n);
        try {
          Tape<T> tape;
          Var<T> w = tape.leaf(
              Tensor<T>::from_data({static_cast<int>(omega.size())},
                                   std::vector<T>(omega.begin(), omega.end())),
              true);
          std::vector<Var<T>> bound = bind_flat(man_, w);
          Var<T> in = tape.constant(detail::sample_range(x_, lo, hi));
          Var<T> tgt = tape.constant(detail::sample_range(y_, lo, hi));
          // Eval-mode forward never mutates running stats; sharing is safe.
          Var<T> pred = unet_forward(spec_, man_, bound, running_, in, ForwardOptions<T>{});
          Var<T> u = scale(sum_squares(sub(pred, tgt)),
                           static_cast<T>(1.0 / (2.0 * sigma2_alpha_)));
          resid_u[static_cast<size_t>(shard)] += static_cast<double>(u.value().data()[0]);
          tape.backward(u);
          const Tensor<T>& g = tape.grad(w);
          double* acc = resid_g[static_cast<size_t>(shard)].data();
          for (long long i = 0; i < g.numel(); ++i) acc[i] += static_cast<double>(g.data()[i]);
        } catch (const numeric_error&) {
          bad[static_cast<size_t>(shard)] = 1;  // divergent position; report U = inf
          return;
        }
      }
    });

    for (uint8_t b : bad)
      if (b) return {std::numeric_limits<double>::infinity(), std::vector<double>(omega.size(), 0.0)};

    double u_total = 0.0;
    std::vector<double> grad(omega.size(), 0.0);
    for (int s = 0; s < shards_; ++s) {
      u_total += resid_u[static_cast<size_t>(s)];
      const double* src = resid_g[static_cast<size_t>(s)].data();
      for (size_t i = 0; i < grad.size(); ++i) grad[i] += src[i];
    }
    const double inv_prior = 1.0 / (2.0 * sigma2_prior_);
    for (size_t i = 0; i < grad.size(); ++i) {
      const double dev = omega[i] - m_omega_[i];
      u_total += inv_prior * dev * dev;
      grad[i] += dev / sigma2_prior_;
    }
    return {u_total, std::move(grad)};
  }

 private:
  NetworkSpec spec_;
  LayoutManifest man_;
  std::vector<BatchNormRunning<T>> running_;
  Tensor<T> x_, y_;
  std::vector<double> m_omega_;
  double sigma2_prior_, sigma2_alpha_;
  int chunk_, shards_;
  long long evals_ = 0;
};

// Posterior predictive ensemble from stored chain samples: each sample is
// realized as a network (frozen running statistics) and forwarded over the
// inputs in evaluation mode.
template <typename T>
Ensemble<T> chain_ensemble(const NetworkSpec& spec, const LayoutManifest& man,
                           const std::vector<BatchNormRunning<T>>& running,
                           const std::vector<std::vector<double>>& samples, const Tensor<T>& inputs,
                           double sigma2_alpha, uint64_t seed) {
  check_arg(!samples.empty(), "chain_ensemble: no samples");
  check_arg(inputs.rank() == 4, "chain_ensemble: inputs must be rank 4");
  const int S = static_cast<int>(samples.size());
  const int n = inputs.dim(0), H = inputs.dim(2), W = inputs.dim(3);
  Ensemble<T> ens;
  ens.backend = "hmc";
  ens.seed = seed;
  ens.sigma2_alpha = sigma2_alpha;
  ens.members = Tensor<T>({S, n, H, W});
  NetworkState<T> st = build_network<T>(spec, /*seed=*/0);
  check_arg(st.manifest.total == man.total, "chain_ensemble: manifest mismatch");
  st.running = running;
  const long long stride = static_cast<long long>(n) * H * W;
  for (int s = 0; s < S; ++s) {
    check_arg(static_cast<long long>(samples[static_cast<size_t>(s)].size()) == man.total,
              "chain_ensemble: sample length mismatch at draw " + std::to_string(s));
    unflatten_into(st, samples[static_cast<size_t>(s)]);
    Tensor<T> pred = predict(st, inputs);
    std::copy(pred.data(), pred.data() + stride, ens.members.data() + s * stride);
  }
  return ens;
}

}  // namespace fstk

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "fstk/metrics.hpp"
#include "fstk/trainer.hpp"
#include "fstk/unet.hpp"

// Bayes by Backprop: mean-field Gaussian variational inference over the
// convolutional kernels and biases via the reparameterization trick
// omega = mu + softplus(rho) * eps. Batch-norm gamma/beta stay deterministic
// (trained jointly by the same optimizer); running statistics are frozen at
// sampling time.

namespace fstk {

struct BbbConfig {
  int epochs = 1000;
  double lr = 0.005;
  int batch_size = 0;  // 0 = full batch
  double sigma2_alpha = 0.01;
  double sigma2_prior = 0.1;
  double lambda = 1e-8;
  int mc_samples = 1;  // M draws per step
  // KL estimator: single-sample Monte Carlo of lambda*(log q - log p) by
  // default; the closed-form diagonal-Gaussian KL sits behind this flag.
  bool closed_form_kl = false;
  double init_sigma_scale = 0.05;  // initial sigma = scale * sigma_prior
  uint64_t seed = 0;

  void validate() const {
    check_config(epochs >= 1, "bbb: epochs must be >= 1");
    check_config(lr > 0.0, "bbb: learning rate must be positive");
    check_config(sigma2_alpha > 0.0, "bbb: sigma2_alpha must be positive");
    check_config(sigma2_prior > 0.0, "bbb: sigma2_prior must be positive");
    check_config(lambda >= 0.0, "bbb: lambda must be >= 0");
    check_config(mc_samples >= 1, "bbb: mc_samples must be >= 1");
    check_config(init_sigma_scale > 0.0, "bbb: init_sigma_scale must be positive");
    check_config(batch_size >= 0, "bbb: batch_size must be >= 0");
  }
};

// Variational family: one (mu, rho) pair per convolutional parameter
// (manifest entries without a batch-norm slot), flattened in manifest order;
// gamma/beta live in a deterministic vector of their own.
template <typename T>
struct VariationalState {
  NetworkSpec spec;
  LayoutManifest manifest;
  std::vector<double> mu;           // length d_var
  std::vector<double> rho;          // length d_var; sigma = softplus(rho)
  std::vector<double> det_params;   // gamma/beta, concatenated in manifest order
  std::vector<BatchNormRunning<T>> running;
  std::vector<double> m_omega;      // prior mean over variational params (default 0)
  double sigma2_prior = 0.1;
  double lambda = 1e-8;
  int mc_samples = 1;

  long long d_var() const { return static_cast<long long>(mu.size()); }
};

using VariationalState64 = VariationalState<double>;

namespace detail {

// Offsets of each manifest entry inside the variational vector (conv
// entries) or the deterministic vector (gamma/beta entries).
struct VarLayout {
  std::vector<long long> offset;   // per manifest entry, into its home vector
  std::vector<bool> variational;   // per manifest entry
  long long d_var = 0, d_det = 0;
};

inline VarLayout variational_layout(const LayoutManifest& man) {
  VarLayout lay;
  lay.offset.resize(man.entries.size());
  lay.variational.resize(man.entries.size());
  for (size_t e = 0; e < man.entries.size(); ++e) {
    const bool is_var = man.entries[e].bn_index < 0;
    lay.variational[e] = is_var;
    if (is_var) {
      lay.offset[e] = lay.d_var;
      lay.d_var += man.entries[e].numel();
    } else {
      lay.offset[e] = lay.d_det;
      lay.d_det += man.entries[e].numel();
    }
  }
  return lay;
}

}  // namespace detail

// Inverse softplus: the rho with softplus(rho) == sigma.
inline double inverse_softplus(double sigma) {
  check_arg(sigma > 0.0, "inverse_softplus: sigma must be positive");
  return std::log(std::expm1(sigma));
}

// Fresh variational state: mu He-normal over kernels (zero biases), rho set
// so the initial sigma is init_sigma_scale * sqrt(sigma2_prior), gamma 1 /
// beta 0 deterministic. Deterministic in the seed.
template <typename T = double>
VariationalState<T> init_variational(const NetworkSpec& spec, const BbbConfig& cfg) {
  cfg.validate();
  NetworkState<T> st = build_network<T>(spec, cfg.seed);
  detail::VarLayout lay = detail::variational_layout(st.manifest);
  VariationalState<T> vs;
  vs.spec = spec;
  vs.manifest = st.manifest;
  vs.mu.resize(static_cast<size_t>(lay.d_var));
  vs.det_params.resize(static_cast<size_t>(lay.d_det));
  for (size_t e = 0; e < st.manifest.entries.size(); ++e) {
    const Tensor<T>& t = st.params[e];
    double* dst = lay.variational[e] ? vs.mu.data() + lay.offset[e]
                                     : vs.det_params.data() + lay.offset[e];
    for (long long i = 0; i < t.numel(); ++i) dst[i] = static_cast<double>(t.data()[i]);
  }
  const double sigma0 = cfg.init_sigma_scale * std::sqrt(cfg.sigma2_prior);
  vs.rho.assign(static_cast<size_t>(lay.d_var), inverse_softplus(sigma0));
  vs.running = std::move(st.running);
  vs.m_omega.assign(static_cast<size_t>(lay.d_var), 0.0);
  vs.sigma2_prior = cfg.sigma2_prior;
  vs.lambda = cfg.lambda;
  vs.mc_samples = cfg.mc_samples;
  return vs;
}

// omega = mu + softplus(rho) * eps, elementwise (plain, off-tape version).
inline std::vector<double> sample_weights(const std::vector<double>& mu,
                                          const std::vector<double>& rho,
                                          const std::vector<double>& noise) {
  check_arg(mu.size() == rho.size() && mu.size() == noise.size(),
            "sample_weights: length mismatch (mu " + std::to_string(mu.size()) + ", rho " +
                std::to_string(rho.size()) + ", noise " + std::to_string(noise.size()) + ")");
  std::vector<double> omega(mu.size());
  for (size_t i = 0; i < mu.size(); ++i)
    omega[i] = mu[i] + softplus_scalar(rho[i]) * noise[i];
  return omega;
}

// Sum over elements of log N(x_i; mean_i, sigma_i^2), composed on the tape so
// gradients flow into every argument that requires them.
template <typename T>
Var<T> gaussian_logpdf_sum(Var<T> x, Var<T> mean, Var<T> sigma) {
  const T d = static_cast<T>(x.value().numel());
  Var<T> z = sub(x, mean);
  Var<T> quad = scale(sum(divide(square(z), square(sigma))), T{-0.5});
  Var<T> logdet = neg(sum(log_op(sigma)));
  const T constant = -d / T{2} * std::log(T{2} * std::numbers::pi_v<T>);
  return add_scalar(add(quad, logdet), constant);
}

struct ElboBreakdown {
  double nll = 0.0;
  double log_q = 0.0;
  double log_p = 0.0;
  double total = 0.0;  // nll + lambda * (log_q - log_p), averaged over draws
};

namespace detail {

// Closed-form KL(q || p) between diagonal Gaussians, per element summed:
// log(sp/sq) + (sq^2 + (mq - mp)^2) / (2 sp^2) - 1/2.
template <typename T>
Var<T> gaussian_kl_closed(Var<T> mu, Var<T> sigma, Var<T> prior_mean, T sigma_prior) {
  const T d = static_cast<T>(mu.value().numel());
  Var<T> dm = sub(mu, prior_mean);
  Var<T> num = add(square(sigma), square(dm));
  Var<T> quad = scale(sum(num), T{1} / (T{2} * sigma_prior * sigma_prior));
  Var<T> logs = neg(sum(log_op(sigma)));
  const T constant = d * std::log(sigma_prior) - d / T{2};
  return add_scalar(add(quad, logs), constant);
}

}  // namespace detail

// Build the variational objective for one batch on the given tape. Draw
// noise is supplied by the caller (one vector of d_var standard normals per
// MC draw). Emits the (mu, rho, det) leaves and returns the scalar loss plus
// the numeric breakdown of the last draw's terms.
template <typename T>
struct ElboGraph {
  Var<T> loss;
  Var<T> mu_leaf, rho_leaf, det_leaf;
  ElboBreakdown breakdown;
};

template <typename T>
ElboGraph<T> elbo_loss(Tape<T>& tape, VariationalState<T>& vs, const Tensor<T>& batch_x,
                       const Tensor<T>& batch_y, const std::vector<std::vector<double>>& noise,
                       double sigma2_alpha, bool training, bool closed_form_kl = false) {
  check_arg(!noise.empty(), "elbo_loss: need at least one noise draw");
  const detail::VarLayout lay = detail::variational_layout(vs.manifest);
  check_arg(static_cast<long long>(vs.mu.size()) == lay.d_var, "elbo_loss: mu length mismatch");

  ElboGraph<T> g;
  g.mu_leaf = tape.leaf(
      Tensor<T>::from_data({static_cast<int>(lay.d_var)},
                           std::vector<T>(vs.mu.begin(), vs.mu.end())),
      true);
  g.rho_leaf = tape.leaf(
      Tensor<T>::from_data({static_cast<int>(lay.d_var)},
                           std::vector<T>(vs.rho.begin(), vs.rho.end())),
      true);
  g.det_leaf = tape.leaf(
      Tensor<T>::from_data({static_cast<int>(std::max<long long>(lay.d_det, 1))},
                           lay.d_det > 0
                               ? std::vector<T>(vs.det_params.begin(), vs.det_params.end())
                               : std::vector<T>(1, T{0})),
      lay.d_det > 0);
  Var<T> sigma = softplus(g.rho_leaf);
  Var<T> prior_mean = tape.constant(Tensor<T>::from_data(
      {static_cast<int>(lay.d_var)}, std::vector<T>(vs.m_omega.begin(), vs.m_omega.end())));
  const T sigma_prior = static_cast<T>(std::sqrt(vs.sigma2_prior));

  Var<T> in = tape.constant(batch_x);
  Var<T> tgt = tape.constant(batch_y);
  ForwardOptions<T> opt;
  opt.training = training;

  Var<T> total;
  const int M = static_cast<int>(noise.size());
  for (int k = 0; k < M; ++k) {
    check_arg(static_cast<long long>(noise[static_cast<size_t>(k)].size()) == lay.d_var,
              "elbo_loss: noise draw length mismatch");
    Var<T> eps = tape.constant(
        Tensor<T>::from_data({static_cast<int>(lay.d_var)},
                             std::vector<T>(noise[static_cast<size_t>(k)].begin(),
                                            noise[static_cast<size_t>(k)].end())));
    Var<T> omega = add(g.mu_leaf, mul(sigma, eps));

    // Bind manifest entries: conv params from the sampled omega, gamma/beta
    // from the deterministic leaf.
    std::vector<Var<T>> bound;
    bound.reserve(vs.manifest.entries.size());
    for (size_t e = 0; e < vs.manifest.entries.size(); ++e) {
      const ManifestEntry& me = vs.manifest.entries[e];
      bound.push_back(lay.variational[e] ? slice(omega, lay.offset[e], me.shape)
                                         : slice(g.det_leaf, lay.offset[e], me.shape));
    }
    Var<T> pred = unet_forward(vs.spec, vs.manifest, bound, vs.running, in, opt);
    Var<T> nll = nll_gaussian(pred, tgt, static_cast<T>(sigma2_alpha));

    Var<T> term;
    if (vs.lambda == 0.0) {
      term = nll;  // switched-off penalty reduces exactly to the NLL
      g.breakdown.log_q = 0.0;
      g.breakdown.log_p = 0.0;
    } else if (closed_form_kl) {
      Var<T> kl = detail::gaussian_kl_closed(g.mu_leaf, sigma, prior_mean, sigma_prior);
      term = add(nll, scale(kl, static_cast<T>(vs.lambda)));
      g.breakdown.log_q = static_cast<double>(kl.value().data()[0]);
      g.breakdown.log_p = 0.0;
    } else {
      Var<T> log_q = gaussian_logpdf_sum(omega, g.mu_leaf, sigma);
      Var<T> sigma_p = tape.constant(Tensor<T>({static_cast<int>(lay.d_var)}, sigma_prior));
      Var<T> log_p = gaussian_logpdf_sum(omega, prior_mean, sigma_p);
      term = add(nll, scale(sub(log_q, log_p), static_cast<T>(vs.lambda)));
      g.breakdown.log_q = static_cast<double>(log_q.value().data()[0]);
      g.breakdown.log_p = static_cast<double>(log_p.value().data()[0]);
    }
    g.breakdown.nll = static_cast<double>(nll.value().data()[0]);
    total = k == 0 ? term : add(total, term);
  }
  g.loss = M == 1 ? total : scale(total, T{1} / static_cast<T>(M));
  g.breakdown.total = static_cast<double>(g.loss.value().data()[0]);
  check_numeric(std::isfinite(g.breakdown.total), "elbo_loss: non-finite objective");
  return g;
}

struct BbbReport {
  std::vector<double> elbo_trace;  // lambda-weighted total per epoch
  double final_elbo = 0.0;
  double wall_seconds = 0.0;
  uint64_t seed = 0;
  int epochs_run = 0;
};

// Adam over (mu, rho, gamma/beta) on the variational objective, full batch
// by default, trained from scratch. Deterministic in cfg.seed.
template <typename T = double>
std::pair<VariationalState<T>, BbbReport> train_bbb(const NetworkSpec& spec,
                                                    const TrainData<T>& data,
                                                    const BbbConfig& cfg) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  VariationalState<T> vs = init_variational<T>(spec, cfg);
  const detail::VarLayout lay = detail::variational_layout(vs.manifest);
  // Noise stream is separate from the init stream so layout changes in
  // initialization do not shift the draw sequence.
  Rng noise_rng = Rng::stream(cfg.seed, 1);

  const int n_train = data.train_x.dim(0);
  check_arg(n_train >= 1, "train_bbb: empty training split");
  const int bs = cfg.batch_size == 0 ? n_train : std::min(cfg.batch_size, n_train);

  // One Adam state over the concatenation [mu | rho | det].
  const size_t d_var = vs.mu.size();
  const size_t d_det = vs.det_params.size();
  std::vector<double> packed(2 * d_var + d_det);
  auto pack = [&]() {
    std::copy(vs.mu.begin(), vs.mu.end(), packed.begin());
    std::copy(vs.rho.begin(), vs.rho.end(), packed.begin() + static_cast<long long>(d_var));
    std::copy(vs.det_params.begin(), vs.det_params.end(),
              packed.begin() + static_cast<long long>(2 * d_var));
  };
  auto unpack = [&]() {
    std::copy(packed.begin(), packed.begin() + static_cast<long long>(d_var), vs.mu.begin());
    std::copy(packed.begin() + static_cast<long long>(d_var),
              packed.begin() + static_cast<long long>(2 * d_var), vs.rho.begin());
    std::copy(packed.begin() + static_cast<long long>(2 * d_var), packed.end(),
              vs.det_params.begin());
  };
  AdamState<double> adam(packed.size());
  BbbReport rep;
  rep.seed = cfg.seed;

  for (int e = 0; e < cfg.epochs; ++e) {
    double epoch_total = 0.0;
    int n_batches = 0;
    for (int lo = 0; lo < n_train; lo += bs) {
      const int hi = std::min(lo + bs, n_train);
      std::vector<std::vector<double>> noise(static_cast<size_t>(cfg.mc_samples));
      for (auto& nv : noise) {
        nv.resize(d_var);
        for (double& x : nv) x = noise_rng.normal();
      }
      Tape<T> tape;
      ElboGraph<T> g =
          elbo_loss(tape, vs, detail::sample_range(data.train_x, lo, hi),
                    detail::sample_range(data.train_y, lo, hi), noise, cfg.sigma2_alpha,
                    /*training=*/true, cfg.closed_form_kl);
      if (!std::isfinite(g.breakdown.total))
        throw numeric_error("train_bbb: objective diverged at epoch " + std::to_string(e + 1));
      epoch_total += g.breakdown.total;
      ++n_batches;
      tape.backward(g.loss);
      std::vector<double> grad(packed.size(), 0.0);
      const Tensor<T>& gmu = tape.grad(g.mu_leaf);
      const Tensor<T>& grho = tape.grad(g.rho_leaf);
      for (size_t i = 0; i < d_var; ++i) {
        grad[i] = static_cast<double>(gmu.data()[i]);
        grad[d_var + i] = static_cast<double>(grho.data()[i]);
      }
      if (d_det > 0) {
        const Tensor<T>& gdet = tape.grad(g.det_leaf);
        for (size_t i = 0; i < d_det; ++i)
          grad[2 * d_var + i] = static_cast<double>(gdet.data()[i]);
      }
      pack();
      adam_step(packed, grad, adam, cfg.lr);
      unpack();
    }
    rep.elbo_trace.push_back(epoch_total / std::max(1, n_batches));
    rep.epochs_run = e + 1;
  }
  rep.final_elbo = rep.elbo_trace.empty() ? 0.0 : rep.elbo_trace.back();
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(vs), rep};
}

// Materialize a NetworkState carrying one weight draw (or the mean network
// when `noise` is null).
template <typename T>
NetworkState<T> realize_network(const VariationalState<T>& vs, const std::vector<double>* noise) {
  const detail::VarLayout lay = detail::variational_layout(vs.manifest);
  NetworkState<T> st = build_network<T>(vs.spec, 0);
  st.running = vs.running;
  std::vector<double> omega =
      noise != nullptr ? sample_weights(vs.mu, vs.rho, *noise) : vs.mu;
  for (size_t e = 0; e < st.manifest.entries.size(); ++e) {
    Tensor<T>& t = st.params[e];
    const double* src = lay.variational[e] ? omega.data() + lay.offset[e]
                                           : vs.det_params.data() + lay.offset[e];
    for (long long i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(src[i]);
  }
  return st;
}

// N_s independent weight draws, each pushed through an eval-mode forward
// pass over the whole input set. Draw s uses the RNG stream (seed, s), so
// members are independent of evaluation order.
template <typename T>
Ensemble<T> sample_posterior(const VariationalState<T>& vs, const Tensor<T>& inputs, int n_draws,
                             uint64_t seed) {
  check_arg(n_draws >= 1, "sample_posterior: n_draws must be >= 1");
  check_arg(inputs.rank() == 4, "sample_posterior: inputs must be rank 4");
  Ensemble<T> ens;
  ens.backend = "bbb";
  ens.seed = seed;
  const int n = inputs.dim(0), H = inputs.dim(2), W = inputs.dim(3);
  ens.members = Tensor<T>({n_draws, n, H, W});
  const long long per = static_cast<long long>(n) * H * W;
  for (int s = 0; s < n_draws; ++s) {
    Rng draw_rng = Rng::stream(seed, static_cast<uint64_t>(s));
    std::vector<double> noise(vs.mu.size());
    for (double& x : noise) x = draw_rng.normal();
    NetworkState<T> st = realize_network(vs, &noise);
    Tensor<T> pred = predict(st, inputs);  // [n,1,H,W]
    std::copy(pred.data(), pred.data() + per, ens.members.data() + static_cast<long long>(s) * per);
  }
  return ens;
}

}  // namespace fstk

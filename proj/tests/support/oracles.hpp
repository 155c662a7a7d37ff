#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fstk/tensor.hpp"

// Independent reference implementations used to cross-check the library:
// plain quadruple loops for the structured operators, central finite
// differences for gradients, and textbook closed forms for the conjugate
// posteriors. Nothing here shares code with the implementations under test.

namespace oracle {

// ---------------------------------------------------------------------------
// error measures
// ---------------------------------------------------------------------------

inline double rel_err(double got, double want, double floor = 1e-12) {
  return std::abs(got - want) / std::max(std::abs(want), floor);
}

inline double max_rel_err(const double* got, const double* want, long long n,
                          double floor = 1e-12) {
  double worst = 0.0;
  for (long long i = 0; i < n; ++i) worst = std::max(worst, rel_err(got[i], want[i], floor));
  return worst;
}

inline double max_abs_err(const double* got, const double* want, long long n) {
  double worst = 0.0;
  for (long long i = 0; i < n; ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  return worst;
}

// ---------------------------------------------------------------------------
// structured-operator reference loops (zero-padded same-size convolution,
// 2x2 max pooling, 2x nearest upsampling, batch normalization)
// ---------------------------------------------------------------------------

inline fstk::Tensor<double> conv2d_loop(const fstk::Tensor<double>& x, const fstk::Tensor<double>& w,
                                        const fstk::Tensor<double>& b) {
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), k = w.dim(2), r = k / 2;
  fstk::Tensor<double> out({N, Cout, H, W});
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          double acc = b.data()[co];
          for (int ci = 0; ci < Cin; ++ci)
            for (int u = 0; u < k; ++u)
              for (int v = 0; v < k; ++v) {
                const int ii = i + u - r, jj = j + v - r;
                if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
                acc += x.at4(n, ci, ii, jj) * w.at4(co, ci, u, v);
              }
          out.at4(n, co, i, j) = acc;
        }
  return out;
}

inline fstk::Tensor<double> maxpool2_loop(const fstk::Tensor<double>& x) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  fstk::Tensor<double> out({N, C, H / 2, W / 2});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H / 2; ++i)
        for (int j = 0; j < W / 2; ++j)
          out.at4(n, c, i, j) =
              std::max(std::max(x.at4(n, c, 2 * i, 2 * j), x.at4(n, c, 2 * i, 2 * j + 1)),
                       std::max(x.at4(n, c, 2 * i + 1, 2 * j), x.at4(n, c, 2 * i + 1, 2 * j + 1)));
  return out;
}

inline fstk::Tensor<double> upsample2_loop(const fstk::Tensor<double>& x) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  fstk::Tensor<double> out({N, C, 2 * H, 2 * W});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < 2 * H; ++i)
        for (int j = 0; j < 2 * W; ++j) out.at4(n, c, i, j) = x.at4(n, c, i / 2, j / 2);
  return out;
}

// Training-mode batch normalization with population statistics over (N,H,W).
inline fstk::Tensor<double> batchnorm_train_loop(const fstk::Tensor<double>& x,
                                                 const std::vector<double>& gamma,
                                                 const std::vector<double>& beta, double eps) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const double m = static_cast<double>(N) * H * W;
  fstk::Tensor<double> out(x.shape());
  for (int c = 0; c < C; ++c) {
    double mu = 0.0;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) mu += x.at4(n, c, i, j);
    mu /= m;
    double var = 0.0;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const double d = x.at4(n, c, i, j) - mu;
          var += d * d;
        }
    var /= m;
    const double is = 1.0 / std::sqrt(var + eps);
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          out.at4(n, c, i, j) = gamma[static_cast<size_t>(c)] * (x.at4(n, c, i, j) - mu) * is +
                                beta[static_cast<size_t>(c)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// central finite differences
// ---------------------------------------------------------------------------

// Gradient of a scalar function of a flat vector, one central difference per
// coordinate.
template <typename F>
std::vector<double> fd_gradient(F&& f, std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (size_t i = 0; i < x.size(); ++i) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    x[i] = x0;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Worst relative disagreement between an analytic gradient and its central
// finite difference, with the denominator floored so near-zero entries are
// compared absolutely.
template <typename F>
double fd_gradient_rel_err(F&& f, const std::vector<double>& x, const std::vector<double>& analytic,
                           double h, double floor = 1e-8) {
  std::vector<double> fd = fd_gradient(f, x, h);
  double worst = 0.0;
  for (size_t i = 0; i < x.size(); ++i)
    worst = std::max(worst, std::abs(analytic[i] - fd[i]) /
                                std::max(std::max(std::abs(analytic[i]), std::abs(fd[i])), floor));
  return worst;
}

// ---------------------------------------------------------------------------
// sample moments of a chain
// ---------------------------------------------------------------------------

inline std::vector<double> chain_mean(const std::vector<std::vector<double>>& samples) {
  const size_t n = samples.size(), d = samples.front().size();
  std::vector<double> mu(d, 0.0);
  for (const auto& s : samples)
    for (size_t k = 0; k < d; ++k) mu[k] += s[k];
  for (double& v : mu) v /= static_cast<double>(n);
  return mu;
}

// Sample covariance (n-1 normalization).
inline Eigen::MatrixXd chain_cov(const std::vector<std::vector<double>>& samples) {
  const size_t n = samples.size(), d = samples.front().size();
  std::vector<double> mu = chain_mean(samples);
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(static_cast<long>(d), static_cast<long>(d));
  for (const auto& s : samples)
    for (size_t a = 0; a < d; ++a)
      for (size_t b = 0; b < d; ++b) c(static_cast<long>(a), static_cast<long>(b)) += (s[a] - mu[a]) * (s[b] - mu[b]);
  c /= static_cast<double>(n - 1);
  return c;
}

inline std::vector<double> component(const std::vector<std::vector<double>>& samples, size_t k) {
  std::vector<double> out(samples.size());
  for (size_t i = 0; i < samples.size(); ++i) out[i] = samples[i][k];
  return out;
}

// ---------------------------------------------------------------------------
// conjugate closed forms
// ---------------------------------------------------------------------------

// Gaussian-likelihood linear regression with an isotropic zero-mean Gaussian
// prior on the coefficients: the posterior is Gaussian with
//   A = X'X / s2_noise + I / s2_prior,  cov = A^-1,  mean = cov X'y / s2_noise.
struct BlrPosterior {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;
};

inline BlrPosterior blr_posterior(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                  double s2_noise, double s2_prior) {
  const long d = X.cols();
  Eigen::MatrixXd A =
      X.transpose() * X / s2_noise + Eigen::MatrixXd::Identity(d, d) / s2_prior;
  BlrPosterior p;
  p.cov = A.llt().solve(Eigen::MatrixXd::Identity(d, d));
  p.mean = p.cov * (X.transpose() * y / s2_noise);
  return p;
}

// Unknown scalar mean with known noise variance and a Gaussian prior:
//   var = 1 / (n/s2_noise + 1/s2_prior), mean = var (sum y / s2_noise + m0 / s2_prior).
struct ScalarPosterior {
  double mean = 0.0;
  double var = 0.0;
};

inline ScalarPosterior scalar_mean_posterior(const std::vector<double>& y, double s2_noise,
                                             double prior_mean, double s2_prior) {
  double sum = 0.0;
  for (double v : y) sum += v;
  ScalarPosterior p;
  p.var = 1.0 / (static_cast<double>(y.size()) / s2_noise + 1.0 / s2_prior);
  p.mean = p.var * (sum / s2_noise + prior_mean / s2_prior);
  return p;
}

// ---------------------------------------------------------------------------
// distribution checks
// ---------------------------------------------------------------------------

inline double std_normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// One-sample Kolmogorov-Smirnov statistic against the standard normal.
inline double ks_statistic_normal(std::vector<double> z) {
  std::sort(z.begin(), z.end());
  const double n = static_cast<double>(z.size());
  double d = 0.0;
  for (size_t i = 0; i < z.size(); ++i) {
    const double c = std_normal_cdf(z[i]);
    d = std::max(d, std::max((static_cast<double>(i) + 1.0) / n - c,
                             c - static_cast<double>(i) / n));
  }
  return d;
}

// Critical value at the 1% level for an effective sample count; the usual
// asymptotic form c(alpha)/sqrt(n) with c(0.01) = 1.628.
inline double ks_critical_1pct(double n_eff) { return 1.628 / std::sqrt(n_eff); }

// ---------------------------------------------------------------------------
// misc helpers
// ---------------------------------------------------------------------------

// Deterministic uniform filler decoupled from the library's generator.
inline void fill_uniform(fstk::Tensor<double>& t, uint64_t seed, double lo = -1.0,
                         double hi = 1.0) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  for (long long i = 0; i < t.numel(); ++i) t.data()[i] = u(eng);
}

inline std::vector<double> uniform_vector(size_t n, uint64_t seed, double lo = -1.0,
                                          double hi = 1.0) {
  std::mt19937_64 eng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> out(n);
  for (double& v : out) v = u(eng);
  return out;
}

// Content hash of a file (FNV-1a over the raw bytes), for byte-identity
// checks between reruns.
inline uint64_t file_hash(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("file_hash: cannot open '" + path + "'");
  uint64_t h = 1469598103934665603ULL;
  char c;
  while (in.get(c)) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace oracle

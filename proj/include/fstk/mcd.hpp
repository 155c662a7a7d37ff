#pragma once

#include <string>
#include <vector>

#include "fstk/metrics.hpp"
#include "fstk/unet.hpp"

// Monte Carlo Dropout: inject Bernoulli channel dropout into a pre-trained
// network at configured depths, run stochastic forward passes, and compute
// predictive moments. The four placement cases, each crossed with four
// rates, give the standard 16-scenario sweep.
//
// Placement diagram (depth-3 example; D = dropout mask applied to the
// block's output activations):
//
//   enc0 ----------------------- skip ----------------------> dec1
//     |                                                        ^
//   enc1 ------------- skip ------------> dec0 ---------------'
//     |                                     ^
//   enc2 (innermost) ----------------------'
//
//   Case 1: D after enc2            (innermost encoder block)
//   Case 2: D after dec0            (innermost decoder block)
//   Case 3: D after enc2 and enc1   (innermost two encoder blocks)
//   Case 4: D after dec0 and dec1   (innermost two decoder blocks)

namespace fstk {

struct DropoutConfig {
  int case_id = 1;     // 1..4
  double p = 0.1;      // in [0,1)
  int n_draws = 1000;  // N_s
  double sigma2_alpha = 0.01;
  bool per_element = false;  // per-channel masks by default
  uint64_t seed = 0;

  void validate() const {
    check_config(case_id >= 1 && case_id <= 4,
                 "mcd: case_id must be 1..4, got " + std::to_string(case_id));
    check_config(p >= 0.0 && p < 1.0, "mcd: p must lie in [0,1), got " + std::to_string(p));
    check_config(n_draws >= 1, "mcd: n_draws must be >= 1");
    check_config(sigma2_alpha >= 0.0, "mcd: sigma2_alpha must be >= 0");
  }

  std::string label() const {
    std::ostringstream os;
    os << "case" << case_id << "_p" << p;
    return os.str();
  }

  uint64_t id() const { return fnv1a64(label()); }
};

// Dropout sites for a placement case, given the network depth.
inline std::vector<DropoutSite> case_sites(const NetworkSpec& spec, int case_id, double p) {
  const int d = spec.depth();
  check_config(d >= 3 || case_id == 1 || case_id == 2,
               "mcd: cases 3 and 4 need at least 3 encoder blocks");
  switch (case_id) {
    case 1:
      return {{"enc" + std::to_string(d - 1), p}};
    case 2:
      return {{"dec0", p}};
    case 3:
      return {{"enc" + std::to_string(d - 1), p}, {"enc" + std::to_string(d - 2), p}};
    case 4:
      return {{"dec0", p}, {"dec1", p}};
    default:
      check_config(false, "mcd: case_id must be 1..4, got " + std::to_string(case_id));
      return {};
  }
}

// N_s stochastic eval-mode forward passes over the pre-trained network with
// dropout active at the configured sites. No retraining happens here. Member
// s draws its masks from the RNG stream (seed, s), so the ensemble is
// independent of evaluation order and reproducible.
template <typename T>
Ensemble<T> sample_predictions(const NetworkState<T>& state, const Tensor<T>& inputs,
                               const DropoutConfig& cfg) {
  cfg.validate();
  check_arg(inputs.rank() == 4, "sample_predictions: inputs must be rank 4");
  NetworkState<T> st = state;  // local copy: spec gains the dropout sites
  st.spec.dropout = case_sites(st.spec, cfg.case_id, cfg.p);
  st.spec.per_element_dropout = cfg.per_element;

  Ensemble<T> ens;
  ens.backend = "mcd";
  ens.seed = cfg.seed;
  ens.sigma2_alpha = cfg.sigma2_alpha;
  const int n = inputs.dim(0), H = inputs.dim(2), W = inputs.dim(3);
  ens.members = Tensor<T>({cfg.n_draws, n, H, W});
  const long long per = static_cast<long long>(n) * H * W;
  for (int s = 0; s < cfg.n_draws; ++s) {
    Rng member_rng = Rng::stream(cfg.seed, static_cast<uint64_t>(s));
    ForwardOptions<T> opt;
    opt.dropout_rng = &member_rng;  // batch norm stays in eval mode
    Tensor<T> pred = predict(st, inputs, opt);
    std::copy(pred.data(), pred.data() + per, ens.members.data() + static_cast<long long>(s) * per);
  }
  return ens;
}

// Per-pixel predictive moments: the ensemble mean and the total variance
// sigma2_alpha + E[y^2] - (E[y])^2 (population convention). The epistemic
// part (centered second moment) is reported separately.
template <typename T>
struct PredictiveMoments {
  Tensor<T> mean;                // [n,H,W]
  Tensor<T> total_variance;      // [n,H,W]
  Tensor<T> epistemic_variance;  // [n,H,W]
};

template <typename T>
PredictiveMoments<T> predictive_moments(const Ensemble<T>& ens) {
  const Tensor<T>& m = ens.members;
  check_arg(m.rank() == 4, "predictive_moments: members must be rank 4");
  const int S = m.dim(0), n = m.dim(1), H = m.dim(2), W = m.dim(3);
  check_arg(S >= 2, "predictive_moments: need at least 2 members, got " + std::to_string(S));
  PredictiveMoments<T> out{Tensor<T>({n, H, W}), Tensor<T>({n, H, W}), Tensor<T>({n, H, W})};
  const long long per = static_cast<long long>(n) * H * W;
  for (long long p = 0; p < per; ++p) {
    T acc{0};
    for (int s = 0; s < S; ++s) acc += m.data()[static_cast<long long>(s) * per + p];
    const T mu = acc / static_cast<T>(S);
    T vacc{0};
    for (int s = 0; s < S; ++s) {
      const T d = m.data()[static_cast<long long>(s) * per + p] - mu;
      vacc += d * d;
    }
    const T epi = vacc / static_cast<T>(S);
    out.mean.data()[p] = mu;
    out.epistemic_variance.data()[p] = epi;
    out.total_variance.data()[p] = static_cast<T>(ens.sigma2_alpha) + epi;
  }
  return out;
}

// The 4 cases x 4 rates sweep, in stable order (case-major, rates
// ascending), with stable hash ids.
inline std::vector<DropoutConfig> enumerate_scenarios(const DropoutConfig& base = {}) {
  const double rates[4] = {0.01, 0.05, 0.1, 0.2};
  std::vector<DropoutConfig> out;
  out.reserve(16);
  for (int c = 1; c <= 4; ++c)
    for (double p : rates) {
      DropoutConfig cfg = base;
      cfg.case_id = c;
      cfg.p = p;
      out.push_back(cfg);
    }
  return out;
}

}  // namespace fstk

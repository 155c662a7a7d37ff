#pragma once

#include <chrono>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "fstk/unet.hpp"

// Deterministic MLE/MAP training with full-batch Adam: the pre-training
// stage for the posterior samplers and the baseline for comparisons.

namespace fstk {

struct TrainConfig {
  int epochs = 1000;
  double lr = 0.005;
  // 0 = full batch (default); otherwise sequential mini-batches of this size.
  int batch_size = 0;
  double sigma2_alpha = 0.01;
  // MAP mode when set: adds the Gaussian prior penalty around m_omega.
  std::optional<double> sigma2_prior;
  uint64_t seed = 0;
  bool early_stop = false;
  int early_stop_patience = 50;
  double clip_norm = 0.0;  // 0 = no gradient clipping

  void validate() const {
    check_config(epochs >= 1, "trainer: epochs must be >= 1");
    check_config(lr > 0.0, "trainer: learning rate must be positive");
    check_config(sigma2_alpha > 0.0, "trainer: sigma2_alpha must be positive");
    check_config(batch_size >= 0, "trainer: batch_size must be >= 0");
    if (sigma2_prior) check_config(*sigma2_prior > 0.0, "trainer: sigma2_prior must be positive");
  }
};

struct TrainReport {
  std::vector<double> loss_trace;     // raw MSE per epoch (training batch)
  std::vector<double> val_mse_trace;  // validation MSE per epoch
  double final_val_mse = 0.0;
  double wall_seconds = 0.0;  // measured; excluded from deterministic artifacts
  uint64_t seed = 0;
  int epochs_run = 0;
};

// Deterministic fields only: wall time varies across machines and is kept
// out of artifacts that must be byte-identical across reruns.
inline nlohmann::json train_report_json(const TrainReport& r) {
  nlohmann::json j;
  j["loss_trace"] = r.loss_trace;
  j["val_mse_trace"] = r.val_mse_trace;
  j["final_val_mse"] = r.final_val_mse;
  j["seed"] = r.seed;
  j["epochs_run"] = r.epochs_run;
  return j;
}

// Negative Gaussian log likelihood, summed over every element:
//   (1/(2 sigma2)) * sum (pred - target)^2 + (n/2) log sigma2 + (n/2) log 2pi.
// For fixed sigma2 this is a monotone affine map of the MSE.
template <typename T>
Var<T> nll_gaussian(Var<T> pred, Var<T> target, T sigma2_alpha) {
  check_arg(sigma2_alpha > T{0}, "nll_gaussian: sigma2_alpha must be positive");
  const T n = static_cast<T>(pred.value().numel());
  Var<T> ss = sum_squares(sub(pred, target));
  Var<T> data_term = scale(ss, T{1} / (T{2} * sigma2_alpha));
  const T constant = n / T{2} * std::log(sigma2_alpha) +
                     n / T{2} * std::log(T{2} * std::numbers::pi_v<T>);
  return add_scalar(data_term, constant);
}

// MAP objective: NLL plus the Gaussian prior penalty
// (1/(2 sigma2_prior)) * ||omega - m_omega||^2.
template <typename T>
Var<T> map_loss(Var<T> pred, Var<T> target, Var<T> omega, Var<T> m_omega, T sigma2_alpha,
                T sigma2_prior) {
  check_arg(sigma2_prior > T{0}, "map_loss: sigma2_prior must be positive");
  check_arg(omega.value().numel() == m_omega.value().numel(),
            "map_loss: omega length " + std::to_string(omega.value().numel()) +
                " != prior mean length " + std::to_string(m_omega.value().numel()));
  Var<T> nll = nll_gaussian(pred, target, sigma2_alpha);
  Var<T> pen = scale(sum_squares(sub(omega, m_omega)), T{1} / (T{2} * sigma2_prior));
  return add(nll, pen);
}

// Adam optimizer state over a flat parameter vector.
template <typename T>
struct AdamState {
  std::vector<T> m, v;
  long long t = 0;

  explicit AdamState(size_t n = 0) : m(n, T{0}), v(n, T{0}) {}
};

// One standard bias-corrected Adam update, in place.
template <typename T>
void adam_step(std::vector<T>& params, const std::vector<T>& grad, AdamState<T>& st,
               T lr, T beta1 = static_cast<T>(0.9), T beta2 = static_cast<T>(0.999),
               T eps = static_cast<T>(1e-8)) {
  check_arg(params.size() == grad.size() && params.size() == st.m.size(),
            "adam_step: size mismatch");
  for (T g : grad)
    check_numeric(std::isfinite(g), "adam_step: non-finite gradient");
  st.t += 1;
  const T bc1 = T{1} - std::pow(beta1, static_cast<T>(st.t));
  const T bc2 = T{1} - std::pow(beta2, static_cast<T>(st.t));
  for (size_t i = 0; i < params.size(); ++i) {
    st.m[i] = beta1 * st.m[i] + (T{1} - beta1) * grad[i];
    st.v[i] = beta2 * st.v[i] + (T{1} - beta2) * grad[i] * grad[i];
    const T mhat = st.m[i] / bc1;
    const T vhat = st.v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

// Generic Adam loop over a flat vector; make_loss builds the scalar
// objective for the current tape. Returns the per-step loss values.
template <typename T, typename LossFn>
std::vector<double> train_flat(std::vector<T>& params, LossFn&& make_loss, int steps, T lr,
                               double clip_norm = 0.0) {
  AdamState<T> adam(params.size());
  std::vector<double> trace;
  trace.reserve(static_cast<size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    Tape<T> tape;
    Var<T> w = tape.leaf(Tensor<T>::from_data({static_cast<int>(params.size())}, params), true);
    Var<T> loss = make_loss(tape, w);
    const double lv = static_cast<double>(loss.value().data()[0]);
    check_numeric(std::isfinite(lv), "train_flat: loss diverged at step " + std::to_string(s + 1));
    trace.push_back(lv);
    tape.backward(loss);
    std::vector<T> g = tape.grad(w).vec();
    if (clip_norm > 0.0) {
      double nrm = 0.0;
      for (T x : g) nrm += static_cast<double>(x) * static_cast<double>(x);
      nrm = std::sqrt(nrm);
      if (nrm > clip_norm) {
        const T sc = static_cast<T>(clip_norm / nrm);
        for (T& x : g) x *= sc;
      }
    }
    adam_step(params, g, adam, lr);
  }
  return trace;
}

template <typename T>
struct TrainData {
  Tensor<T> train_x, train_y;
  Tensor<T> val_x, val_y;
};

template <typename T>
double mse_value(const Tensor<T>& a, const Tensor<T>& b) {
  check_arg(a.same_shape(b), "mse_value: shape mismatch");
  double acc = 0.0;
  for (long long i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.numel());
}

template <typename T>
double eval_mse(NetworkState<T>& st, const Tensor<T>& x, const Tensor<T>& y) {
  return mse_value(predict(st, x), y);
}

namespace detail {

template <typename T>
Tensor<T> sample_range(const Tensor<T>& t, int lo, int hi) {
  const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
  const long long per = static_cast<long long>(C) * H * W;
  Tensor<T> out({hi - lo, C, H, W});
  std::copy(t.data() + lo * per, t.data() + hi * per, out.data());
  return out;
}

}  // namespace detail

// E epochs of Adam on the Gaussian NLL (or the MAP objective when
// sigma2_prior is set). Full batch by default: one update per epoch over the
// whole training set, with batch-norm batch statistics taken over that
// batch. Mutates the state's parameters and running statistics.
template <typename T>
TrainReport train(NetworkState<T>& st, const TrainData<T>& data, const TrainConfig& cfg) {
  cfg.validate();
  const int n_train = data.train_x.dim(0);
  check_arg(n_train >= 1, "train: empty training split");
  check_arg(data.train_x.dim(0) == data.train_y.dim(0), "train: input/target count mismatch");
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<T> flat = flatten(st);
  const std::vector<T> m_omega = flat;  // prior center for MAP mode
  AdamState<T> adam(flat.size());
  TrainReport rep;
  rep.seed = cfg.seed;

  const int bs = cfg.batch_size == 0 ? n_train : std::min(cfg.batch_size, n_train);
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;

  for (int e = 0; e < cfg.epochs; ++e) {
    double epoch_sse = 0.0;
    long long epoch_elems = 0;
    for (int lo = 0; lo < n_train; lo += bs) {
      const int hi = std::min(lo + bs, n_train);
      Tensor<T> bx = detail::sample_range(data.train_x, lo, hi);
      Tensor<T> by = detail::sample_range(data.train_y, lo, hi);
      Tape<T> tape;
      Var<T> w = tape.leaf(Tensor<T>::from_data({static_cast<int>(flat.size())}, flat), true);
      std::vector<Var<T>> bound = bind_flat(st.manifest, w);
      Var<T> in = tape.constant(std::move(bx));
      Var<T> tgt = tape.constant(std::move(by));
      ForwardOptions<T> opt;
      opt.training = true;
      Var<T> pred = unet_forward(st.spec, st.manifest, bound, st.running, in, opt);
      Var<T> loss;
      if (cfg.sigma2_prior) {
        Var<T> m0 = tape.constant(
            Tensor<T>::from_data({static_cast<int>(m_omega.size())}, m_omega));
        loss = map_loss(pred, tgt, w, m0, static_cast<T>(cfg.sigma2_alpha),
                        static_cast<T>(*cfg.sigma2_prior));
      } else {
        loss = nll_gaussian(pred, tgt, static_cast<T>(cfg.sigma2_alpha));
      }
      const double lv = static_cast<double>(loss.value().data()[0]);
      check_numeric(std::isfinite(lv),
                    "train: loss diverged (non-finite) at epoch " + std::to_string(e + 1));
      // Reported trace is the raw MSE of this epoch's forward pass.
      const T* pp = pred.value().data();
      const T* pt = tgt.value().data();
      for (long long i = 0; i < pred.value().numel(); ++i) {
        const double d = static_cast<double>(pp[i]) - static_cast<double>(pt[i]);
        epoch_sse += d * d;
      }
      epoch_elems += pred.value().numel();
      tape.backward(loss);
      std::vector<T> g = tape.grad(w).vec();
      if (cfg.clip_norm > 0.0) {
        double nrm = 0.0;
        for (T x : g) nrm += static_cast<double>(x) * static_cast<double>(x);
        nrm = std::sqrt(nrm);
        if (nrm > cfg.clip_norm) {
          const T sc = static_cast<T>(cfg.clip_norm / nrm);
          for (T& x : g) x *= sc;
        }
      }
      adam_step(flat, g, adam, static_cast<T>(cfg.lr));
    }
    rep.loss_trace.push_back(epoch_sse / static_cast<double>(epoch_elems));
    unflatten_into(st, flat);
    const double val = data.val_x.dim(0) > 0 ? eval_mse(st, data.val_x, data.val_y) : 0.0;
    rep.val_mse_trace.push_back(val);
    rep.epochs_run = e + 1;
    if (cfg.early_stop) {
      if (val < best_val) {
        best_val = val;
        since_best = 0;
      } else if (++since_best >= cfg.early_stop_patience) {
        break;
      }
    }
  }
  unflatten_into(st, flat);
  rep.final_val_mse = rep.val_mse_trace.empty() ? 0.0 : rep.val_mse_trace.back();
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace fstk

#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fstk/bbb.hpp"
#include "fstk/checkpoint.hpp"
#include "fstk/common.hpp"
#include "fstk/dataspace.hpp"
#include "fstk/hmc.hpp"
#include "fstk/image.hpp"
#include "fstk/io.hpp"
#include "fstk/mcd.hpp"
#include "fstk/metrics.hpp"
#include "fstk/trainer.hpp"
#include "fstk/unet.hpp"

// Command drivers behind the `fstk` front end. Each driver raises the error
// taxonomy from common.hpp; run_guarded maps it onto process exit codes
// (0 success, 2 configuration, 3 numeric, 4 I/O).

namespace fstk {

// ---------------------------------------------------------------------------
// Run configuration: one JSON document with optional sections
// {data, network, trainer, hmc, bbb, mcd, metrics, io} plus a top-level
// master seed. Unknown keys are rejected at every level. The effective
// (defaults-applied) document is hashed and stamped into every artifact.
// ---------------------------------------------------------------------------

struct HmcRunOptions {
  HmcConfig cfg;
  bool tune = true;
  double target_acceptance = 0.6;
  int pilot_iterations = 20;
  int chunk = 16;
  int shards = 1;
};

struct McdRunOptions {
  DropoutConfig cfg;
  std::string scenario = "single";  // single | all
};

struct MetricOptions {
  SigmaEpsForm sigma_eps_form = SigmaEpsForm::kCorrected;
  SigmaAvgForm sigma_avg_form = SigmaAvgForm::kSqrtMeanStd;
};

struct RunConfig {
  uint64_t seed = 0;
  std::string data_path;
  NetworkSpec network;
  TrainConfig trainer;
  HmcRunOptions hmc;
  BbbConfig bbb;
  int bbb_draws = 1000;  // posterior draws emitted by `sample --backend bbb`
  McdRunOptions mcd;
  MetricOptions metrics;
  std::string outdir = ".";
};

namespace detail {

template <typename T>
T take(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw config_error(std::string("config key '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
  reject_unknown_keys(j, {"seed", "data", "network", "trainer", "hmc", "bbb", "mcd", "metrics", "io"}, "config");
  RunConfig rc;
  rc.seed = detail::take<uint64_t>(j, "seed", 0);

  if (j.contains("data")) {
    reject_unknown_keys(j["data"], {"path"}, "config.data");
    rc.data_path = detail::take<std::string>(j["data"], "path", "");
  }
  if (j.contains("network")) rc.network = network_spec_from_json(j["network"]);

  if (j.contains("trainer")) {
    const nlohmann::json& t = j["trainer"];
    reject_unknown_keys(t,
                        {"epochs", "lr", "batch_size", "sigma2_alpha", "sigma2_prior", "early_stop",
                         "early_stop_patience", "clip_norm"},
                        "config.trainer");
    rc.trainer.epochs = detail::take<int>(t, "epochs", rc.trainer.epochs);
    rc.trainer.lr = detail::take<double>(t, "lr", rc.trainer.lr);
    rc.trainer.batch_size = detail::take<int>(t, "batch_size", rc.trainer.batch_size);
    rc.trainer.sigma2_alpha = detail::take<double>(t, "sigma2_alpha", rc.trainer.sigma2_alpha);
    if (t.contains("sigma2_prior")) rc.trainer.sigma2_prior = t["sigma2_prior"].get<double>();
    rc.trainer.early_stop = detail::take<bool>(t, "early_stop", rc.trainer.early_stop);
    rc.trainer.early_stop_patience = detail::take<int>(t, "early_stop_patience", rc.trainer.early_stop_patience);
    rc.trainer.clip_norm = detail::take<double>(t, "clip_norm", rc.trainer.clip_norm);
  }

  if (j.contains("hmc")) {
    const nlohmann::json& h = j["hmc"];
    reject_unknown_keys(h,
                        {"eps", "leapfrog_steps", "n_samples", "burn_in", "sigma2_prior", "sigma2_alpha",
                         "reject_abort_window", "divergence_threshold", "tune", "target_acceptance",
                         "pilot_iterations", "chunk", "shards"},
                        "config.hmc");
    HmcConfig& c = rc.hmc.cfg;
    c.eps = detail::take<double>(h, "eps", c.eps);
    c.leapfrog_steps = detail::take<int>(h, "leapfrog_steps", c.leapfrog_steps);
    c.n_samples = detail::take<int>(h, "n_samples", c.n_samples);
    c.burn_in = detail::take<int>(h, "burn_in", c.burn_in);
    c.sigma2_prior = detail::take<double>(h, "sigma2_prior", c.sigma2_prior);
    c.sigma2_alpha = detail::take<double>(h, "sigma2_alpha", c.sigma2_alpha);
    c.reject_abort_window = detail::take<int>(h, "reject_abort_window", c.reject_abort_window);
    c.divergence_threshold = detail::take<double>(h, "divergence_threshold", c.divergence_threshold);
    rc.hmc.tune = detail::take<bool>(h, "tune", rc.hmc.tune);
    rc.hmc.target_acceptance = detail::take<double>(h, "target_acceptance", rc.hmc.target_acceptance);
    rc.hmc.pilot_iterations = detail::take<int>(h, "pilot_iterations", rc.hmc.pilot_iterations);
    rc.hmc.chunk = detail::take<int>(h, "chunk", rc.hmc.chunk);
    rc.hmc.shards = detail::take<int>(h, "shards", rc.hmc.shards);
  }

  if (j.contains("bbb")) {
    const nlohmann::json& b = j["bbb"];
    reject_unknown_keys(b,
                        {"epochs", "lr", "batch_size", "sigma2_alpha", "sigma2_prior", "lambda", "mc_samples",
                         "closed_form_kl", "init_sigma_scale", "n_draws"},
                        "config.bbb");
    rc.bbb.epochs = detail::take<int>(b, "epochs", rc.bbb.epochs);
    rc.bbb.lr = detail::take<double>(b, "lr", rc.bbb.lr);
    rc.bbb.batch_size = detail::take<int>(b, "batch_size", rc.bbb.batch_size);
    rc.bbb.sigma2_alpha = detail::take<double>(b, "sigma2_alpha", rc.bbb.sigma2_alpha);
    rc.bbb.sigma2_prior = detail::take<double>(b, "sigma2_prior", rc.bbb.sigma2_prior);
    rc.bbb.lambda = detail::take<double>(b, "lambda", rc.bbb.lambda);
    rc.bbb.mc_samples = detail::take<int>(b, "mc_samples", rc.bbb.mc_samples);
    rc.bbb.closed_form_kl = detail::take<bool>(b, "closed_form_kl", rc.bbb.closed_form_kl);
    rc.bbb.init_sigma_scale = detail::take<double>(b, "init_sigma_scale", rc.bbb.init_sigma_scale);
    rc.bbb_draws = detail::take<int>(b, "n_draws", rc.bbb_draws);
    check_config(rc.bbb_draws >= 2, "config.bbb: n_draws must be >= 2");
  }

  if (j.contains("mcd")) {
    const nlohmann::json& m = j["mcd"];
    reject_unknown_keys(m, {"case", "rate", "n_draws", "sigma2_alpha", "per_element", "scenario"}, "config.mcd");
    rc.mcd.cfg.case_id = detail::take<int>(m, "case", rc.mcd.cfg.case_id);
    rc.mcd.cfg.p = detail::take<double>(m, "rate", rc.mcd.cfg.p);
    rc.mcd.cfg.n_draws = detail::take<int>(m, "n_draws", rc.mcd.cfg.n_draws);
    rc.mcd.cfg.sigma2_alpha = detail::take<double>(m, "sigma2_alpha", rc.mcd.cfg.sigma2_alpha);
    rc.mcd.cfg.per_element = detail::take<bool>(m, "per_element", rc.mcd.cfg.per_element);
    rc.mcd.scenario = detail::take<std::string>(m, "scenario", rc.mcd.scenario);
    check_config(rc.mcd.scenario == "single" || rc.mcd.scenario == "all",
                 "config.mcd: scenario must be 'single' or 'all'");
  }

  if (j.contains("metrics")) {
    const nlohmann::json& m = j["metrics"];
    reject_unknown_keys(m, {"sigma_eps_form", "sigma_avg_form"}, "config.metrics");
    std::string se = detail::take<std::string>(m, "sigma_eps_form", "corrected");
    std::string sa = detail::take<std::string>(m, "sigma_avg_form", "sqrt_mean_std");
    check_config(se == "corrected" || se == "literal", "config.metrics: sigma_eps_form must be corrected|literal");
    check_config(sa == "sqrt_mean_std" || sa == "rms_of_std",
                 "config.metrics: sigma_avg_form must be sqrt_mean_std|rms_of_std");
    rc.metrics.sigma_eps_form = se == "literal" ? SigmaEpsForm::kLiteral : SigmaEpsForm::kCorrected;
    rc.metrics.sigma_avg_form = sa == "rms_of_std" ? SigmaAvgForm::kRmsOfStd : SigmaAvgForm::kSqrtMeanStd;
  }

  if (j.contains("io")) {
    reject_unknown_keys(j["io"], {"outdir"}, "config.io");
    rc.outdir = detail::take<std::string>(j["io"], "outdir", rc.outdir);
  }

  // Stage seeds derive from the master seed; modules split sub-streams
  // internally, so stages do not share draw sequences.
  rc.trainer.seed = rc.seed;
  rc.hmc.cfg.seed = rc.seed;
  rc.bbb.seed = rc.seed;
  rc.mcd.cfg.seed = rc.seed;
  return rc;
}

// Effective configuration re-emitted with every default applied; the hash of
// this document identifies the run.
inline nlohmann::json run_config_json(const RunConfig& rc) {
  nlohmann::json j;
  j["seed"] = rc.seed;
  j["data"] = {{"path", rc.data_path}};
  j["network"] = to_json(rc.network);
  j["trainer"] = {{"epochs", rc.trainer.epochs},
                  {"lr", rc.trainer.lr},
                  {"batch_size", rc.trainer.batch_size},
                  {"sigma2_alpha", rc.trainer.sigma2_alpha},
                  {"early_stop", rc.trainer.early_stop},
                  {"early_stop_patience", rc.trainer.early_stop_patience},
                  {"clip_norm", rc.trainer.clip_norm}};
  if (rc.trainer.sigma2_prior) j["trainer"]["sigma2_prior"] = *rc.trainer.sigma2_prior;
  j["hmc"] = {{"eps", rc.hmc.cfg.eps},
              {"leapfrog_steps", rc.hmc.cfg.leapfrog_steps},
              {"n_samples", rc.hmc.cfg.n_samples},
              {"burn_in", rc.hmc.cfg.burn_in},
              {"sigma2_prior", rc.hmc.cfg.sigma2_prior},
              {"sigma2_alpha", rc.hmc.cfg.sigma2_alpha},
              {"reject_abort_window", rc.hmc.cfg.reject_abort_window},
              {"divergence_threshold", rc.hmc.cfg.divergence_threshold},
              {"tune", rc.hmc.tune},
              {"target_acceptance", rc.hmc.target_acceptance},
              {"pilot_iterations", rc.hmc.pilot_iterations},
              {"chunk", rc.hmc.chunk},
              {"shards", rc.hmc.shards}};
  j["bbb"] = {{"epochs", rc.bbb.epochs},
              {"lr", rc.bbb.lr},
              {"batch_size", rc.bbb.batch_size},
              {"sigma2_alpha", rc.bbb.sigma2_alpha},
              {"sigma2_prior", rc.bbb.sigma2_prior},
              {"lambda", rc.bbb.lambda},
              {"mc_samples", rc.bbb.mc_samples},
              {"closed_form_kl", rc.bbb.closed_form_kl},
              {"init_sigma_scale", rc.bbb.init_sigma_scale},
              {"n_draws", rc.bbb_draws}};
  j["mcd"] = {{"case", rc.mcd.cfg.case_id},
              {"rate", rc.mcd.cfg.p},
              {"n_draws", rc.mcd.cfg.n_draws},
              {"sigma2_alpha", rc.mcd.cfg.sigma2_alpha},
              {"per_element", rc.mcd.cfg.per_element},
              {"scenario", rc.mcd.scenario}};
  j["metrics"] = {{"sigma_eps_form",
                   rc.metrics.sigma_eps_form == SigmaEpsForm::kLiteral ? "literal" : "corrected"},
                  {"sigma_avg_form",
                   rc.metrics.sigma_avg_form == SigmaAvgForm::kRmsOfStd ? "rms_of_std" : "sqrt_mean_std"}};
  j["io"] = {{"outdir", rc.outdir}};
  return j;
}

inline std::string run_config_hash(const RunConfig& rc) { return config_hash_hex(run_config_json(rc)); }

// Architecture fingerprint used for checkpoint compatibility checks.
inline std::string network_hash(const NetworkSpec& spec) { return config_hash_hex(to_json(spec)); }

inline RunConfig load_run_config(const std::string& path) {
  nlohmann::json j = read_json_file(path);
  try {
    return parse_run_config(j);
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config '" + path + "': " + e.what());
  }
}

// Relative output paths land in the configured output directory; the
// FSTK_OUTDIR environment variable overrides that directory (the only
// environment knob).
inline std::string resolve_out_path(const RunConfig& rc, const std::string& path) {
  namespace fs = std::filesystem;
  fs::path p(path);
  if (p.is_absolute()) return path;
  const char* env = std::getenv("FSTK_OUTDIR");
  fs::path dir = env && *env ? fs::path(env) : fs::path(rc.outdir);
  return (dir / p).string();
}

namespace detail {

// [n,1,H,W] -> [n,H,W] view copy for the metrics layer.
inline Tensor<double> squeeze_channel(const Tensor<double>& t) {
  check_arg(t.rank() == 4 && t.dim(1) == 1, "expected single-channel [n,1,H,W]");
  return Tensor<double>::from_data({t.dim(0), t.dim(2), t.dim(3)}, t.vec());
}

inline void require_network_matches_data(const NetworkSpec& spec, const DatasetBundle& b) {
  check_config(spec.height == b.height() && spec.width == b.width(),
               "network grid " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                   " does not match dataset " + std::to_string(b.height()) + "x" + std::to_string(b.width()));
}

inline DatasetBundle load_dataset_for(const RunConfig& rc) {
  check_config(!rc.data_path.empty(), "config.data.path is required for this command");
  return read_dataset_fstk(rc.data_path);
}

inline TrainData<double> bundle_train_data(const DatasetBundle& b) {
  TrainData<double> d;
  d.train_x = gather_samples(b.inputs, b.train_idx);
  d.train_y = gather_samples(b.outputs, b.train_idx);
  d.val_x = gather_samples(b.inputs, b.val_idx);
  d.val_y = gather_samples(b.outputs, b.val_idx);
  return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

inline void run_gen_data(const GenConfig& gen, const std::string& out) {
  DatasetBundle b = generate_dataset(gen);
  write_dataset_fstk(b, out);
  const nlohmann::json& meta = b.metadata;
  std::printf("wrote %s: n=%d (%s, %dx%d), splits %zu/%zu/%zu\n", out.c_str(), b.count(),
              gen.preset.c_str(), b.height(), b.width(), b.train_idx.size(), b.val_idx.size(),
              b.test_idx.size());
  if (meta["summary"].contains("volume_fraction_mean"))
    std::printf("volume fraction mean %.4f (min %.4f, max %.4f)\n",
                meta["summary"]["volume_fraction_mean"].get<double>(),
                meta["summary"]["volume_fraction_min"].get<double>(),
                meta["summary"]["volume_fraction_max"].get<double>());
  else
    std::printf("grains per sample: %d\n", meta["summary"]["grain_count"].get<int>());
  std::printf("config hash %s\n", meta["config_hash"].get<std::string>().c_str());
}

// ---------------------------------------------------------------------------
// train: deterministic (optionally MAP) pre-training, checkpointed.
// ---------------------------------------------------------------------------

inline void run_train(const std::string& config_path, const std::string& out_checkpoint) {
  RunConfig rc = load_run_config(config_path);
  DatasetBundle bundle = detail::load_dataset_for(rc);
  detail::require_network_matches_data(rc.network, bundle);
  TrainData<double> data = detail::bundle_train_data(bundle);

  NetworkState<double> st = build_network<double>(rc.network, rc.seed);
  TrainReport rep = train(st, data, rc.trainer);

  nlohmann::json extra;
  extra["train_report"] = train_report_json(rep);
  extra["network_hash"] = network_hash(rc.network);
  extra["data_path"] = rc.data_path;
  const std::string out = resolve_out_path(rc, out_checkpoint);
  save_network_checkpoint(out, st, run_config_hash(rc), rc.seed, extra);
  std::printf("trained %d epochs, final validation MSE %.6f\n", rep.epochs_run, rep.final_val_mse);
  std::printf("wrote %s (config hash %s)\n", out.c_str(), run_config_hash(rc).c_str());
}

// ---------------------------------------------------------------------------
// sample: posterior ensembles per backend.
// ---------------------------------------------------------------------------

namespace detail {

inline LoadedNetwork load_compatible_checkpoint(const RunConfig& rc, const std::string& checkpoint,
                                                const std::string& backend) {
  check_config(!checkpoint.empty(), backend + " sampling requires a pre-trained checkpoint (--checkpoint)");
  LoadedNetwork loaded = load_network_checkpoint(checkpoint);
  const std::string want = network_hash(rc.network);
  const std::string have = network_hash(loaded.state.spec);
  check_config(want == have, "checkpoint '" + checkpoint + "' was trained on network " + have +
                                 " but the request configures network " + want);
  return loaded;
}

inline std::string with_label(const std::string& path, const std::string& label) {
  namespace fs = std::filesystem;
  fs::path p(path);
  fs::path stem = p.parent_path() / p.stem();
  return stem.string() + "." + label + p.extension().string();
}

}  // namespace detail

inline void run_sample_hmc(const RunConfig& rc, const std::string& checkpoint, const std::string& out_path) {
  DatasetBundle bundle = detail::load_dataset_for(rc);
  detail::require_network_matches_data(rc.network, bundle);
  LoadedNetwork loaded = detail::load_compatible_checkpoint(rc, checkpoint, "hmc");

  std::vector<double> map_params = flatten(loaded.state);
  UnetPotential<double> pot(loaded.state.spec, loaded.state.manifest, loaded.state.running,
                            gather_samples(bundle.inputs, bundle.train_idx),
                            gather_samples(bundle.outputs, bundle.train_idx), map_params,
                            rc.hmc.cfg.sigma2_prior, rc.hmc.cfg.sigma2_alpha, rc.hmc.chunk, rc.hmc.shards);

  HmcConfig cfg = rc.hmc.cfg;
  nlohmann::json tuning;
  if (rc.hmc.tune) {
    TuneResult tuned = tune_step_size(map_params, pot, cfg, rc.hmc.target_acceptance, rc.hmc.pilot_iterations);
    tuning = {{"eps", tuned.eps}, {"pilot_acceptance", tuned.acceptance}, {"tried", tuned.tried}};
    cfg.eps = tuned.eps;
  }
  ChainTrace trace = sample_chain(map_params, pot, cfg);

  Ensemble<double> ens = chain_ensemble(loaded.state.spec, loaded.state.manifest, loaded.state.running,
                                        trace.samples, gather_samples(bundle.inputs, bundle.test_idx),
                                        cfg.sigma2_alpha, rc.seed);
  ens.config_hash = run_config_hash(rc);

  const std::string out = resolve_out_path(rc, out_path);
  write_ensemble_fstk(ens, out, "HMC");
  save_chain_trace(out + ".chain.fckp", trace, loaded.state.spec, ens.config_hash);
  nlohmann::json diag;
  diag["backend"] = "hmc";
  diag["config_hash"] = ens.config_hash;
  diag["seed"] = rc.seed;
  diag["eps"] = cfg.eps;
  diag["chain"] = chain_summary_json(trace);
  if (!tuning.is_null()) diag["tuning"] = tuning;
  write_json_file(out + ".diag.json", diag);
  std::printf("hmc: %d samples, acceptance %.3f, eps %.3g\n", static_cast<int>(trace.samples.size()),
              trace.acceptance_rate(), cfg.eps);
  std::printf("wrote %s\n", out.c_str());
}

inline void run_sample_bbb(const RunConfig& rc, const std::string& checkpoint, const std::string& out_path) {
  check_config(checkpoint.empty(),
               "bbb trains its posterior from scratch and does not accept a checkpoint");
  DatasetBundle bundle = detail::load_dataset_for(rc);
  detail::require_network_matches_data(rc.network, bundle);
  TrainData<double> data = detail::bundle_train_data(bundle);

  auto [vs, rep] = train_bbb<double>(rc.network, data, rc.bbb);
  Ensemble<double> ens =
      sample_posterior(vs, gather_samples(bundle.inputs, bundle.test_idx), rc.bbb_draws, rc.seed);
  ens.sigma2_alpha = rc.bbb.sigma2_alpha;
  ens.config_hash = run_config_hash(rc);

  const std::string out = resolve_out_path(rc, out_path);
  write_ensemble_fstk(ens, out, "BBB");
  save_variational_checkpoint(out + ".state.fckp", vs, ens.config_hash, rc.seed);
  nlohmann::json diag;
  diag["backend"] = "bbb";
  diag["config_hash"] = ens.config_hash;
  diag["seed"] = rc.seed;
  diag["elbo_trace"] = rep.elbo_trace;
  diag["final_elbo"] = rep.final_elbo;
  diag["epochs_run"] = rep.epochs_run;
  write_json_file(out + ".diag.json", diag);
  std::printf("bbb: %d epochs, final objective %.6f, %d draws\n", rep.epochs_run, rep.final_elbo, rc.bbb_draws);
  std::printf("wrote %s\n", out.c_str());
}

inline void run_sample_mcd(const RunConfig& rc, const std::string& checkpoint, const std::string& out_path) {
  DatasetBundle bundle = detail::load_dataset_for(rc);
  detail::require_network_matches_data(rc.network, bundle);
  LoadedNetwork loaded = detail::load_compatible_checkpoint(rc, checkpoint, "mcd");
  Tensor<double> test_x = gather_samples(bundle.inputs, bundle.test_idx);
  const std::string hash = run_config_hash(rc);

  std::vector<DropoutConfig> scenarios;
  if (rc.mcd.scenario == "all")
    scenarios = enumerate_scenarios(rc.mcd.cfg);
  else
    scenarios.push_back(rc.mcd.cfg);

  nlohmann::json table = nlohmann::json::array();
  for (const DropoutConfig& sc : scenarios) {
    Ensemble<double> ens = sample_predictions(loaded.state, test_x, sc);
    ens.config_hash = hash;
    ens.seed = rc.seed;
    std::string path = scenarios.size() == 1 ? resolve_out_path(rc, out_path)
                                             : detail::with_label(resolve_out_path(rc, out_path), sc.label());
    write_ensemble_fstk(ens, path, "MCD " + sc.label());
    table.push_back({{"label", sc.label()},
                     {"id", hash_hex(sc.id())},
                     {"case", sc.case_id},
                     {"rate", sc.p},
                     {"file", path}});
  }
  nlohmann::json diag;
  diag["backend"] = "mcd";
  diag["config_hash"] = hash;
  diag["seed"] = rc.seed;
  diag["scenarios"] = table;
  const std::string diag_path = resolve_out_path(rc, out_path) + ".diag.json";
  write_json_file(diag_path, diag);
  std::printf("mcd: wrote %zu ensemble(s), diagnostics at %s\n", scenarios.size(), diag_path.c_str());
}

inline void run_sample(const std::string& backend, const std::string& config_path, const std::string& checkpoint,
                       const std::string& out_path) {
  RunConfig rc = load_run_config(config_path);
  if (backend == "hmc")
    run_sample_hmc(rc, checkpoint, out_path);
  else if (backend == "bbb")
    run_sample_bbb(rc, checkpoint, out_path);
  else if (backend == "mcd")
    run_sample_mcd(rc, checkpoint, out_path);
  else
    throw config_error("unknown backend '" + backend + "' (expected hmc, bbb, or mcd)");
}

// ---------------------------------------------------------------------------
// evaluate: metric suite over persisted ensembles.
// ---------------------------------------------------------------------------

struct EvaluateOptions {
  std::vector<std::string> ensemble_paths;
  std::string reference_path;  // optional
  std::string dataset_path;
  std::string out_report;
  std::string images_dir;  // optional triptych output
  MetricOptions metrics;
};

inline SuiteReport run_evaluate(const EvaluateOptions& opt) {
  check_config(!opt.ensemble_paths.empty(), "evaluate needs at least one ensemble");
  check_config(!opt.dataset_path.empty(), "evaluate needs --dataset");
  DatasetBundle bundle = read_dataset_fstk(opt.dataset_path);
  check_config(!bundle.test_idx.empty(), "dataset '" + opt.dataset_path + "' has no test split");
  Tensor<double> reference_fields = detail::squeeze_channel(gather_samples(bundle.outputs, bundle.test_idx));

  std::optional<SampleStats<double>> ref_stats;
  if (!opt.reference_path.empty()) {
    Ensemble<double> ref = read_ensemble_fstk(opt.reference_path);
    check_config(ref.members.dim(1) == reference_fields.dim(0) &&
                     ref.members.dim(2) == reference_fields.dim(1) &&
                     ref.members.dim(3) == reference_fields.dim(2),
                 "reference ensemble shape " + shape_str(ref.members.shape()) +
                     " does not match the test split " + shape_str(reference_fields.shape()));
    ref_stats = ensemble_stats(ref);
  }

  struct RowBacking {
    std::string backend;
    SuiteRow row;
    SampleStats<double> stats;
  };
  std::vector<RowBacking> rows;
  SuiteReport rep;
  rep.sigma_eps_form = opt.metrics.sigma_eps_form == SigmaEpsForm::kLiteral ? "literal" : "corrected";
  rep.sigma_avg_form = opt.metrics.sigma_avg_form == SigmaAvgForm::kRmsOfStd ? "rms_of_std" : "sqrt_mean_std";
  rep.seed = bundle.metadata.value("seed", uint64_t{0});

  nlohmann::json hash_doc = nlohmann::json::array();
  for (const std::string& path : opt.ensemble_paths) {
    Ensemble<double> ens = read_ensemble_fstk(path);
    check_config(ens.members.dim(1) == reference_fields.dim(0) && ens.members.dim(2) == reference_fields.dim(1) &&
                     ens.members.dim(3) == reference_fields.dim(2),
                 "ensemble '" + path + "' shape " + shape_str(ens.members.shape()) +
                     " does not match the test split " + shape_str(reference_fields.shape()));
    nlohmann::json side = read_json_file(path + ".json");
    RowBacking rb;
    rb.backend = ens.backend;
    rb.row.label = side.value("label", ens.backend);
    rb.stats = ensemble_stats(ens);
    ErrorStats<double> err = error_stats(rb.stats.mean, reference_fields, opt.metrics.sigma_eps_form);
    rb.row.mu_eps = err.mu_eps;
    rb.row.sigma_eps = err.sigma_eps;
    rb.row.sigma_avg = sigma_avg(rb.stats, opt.metrics.sigma_avg_form);
    if (ref_stats) {
      VarianceErrorStats<double> ve = reference_variance_error(rb.stats, *ref_stats, opt.metrics.sigma_eps_form);
      rb.row.mu_eps_sigma = ve.mu_eps_sigma;
      rb.row.sigma_eps_sigma = ve.sigma_eps_sigma;
    }
    hash_doc.push_back({{"path", path}, {"config_hash", ens.config_hash}});

    if (!opt.images_dir.empty()) {
      namespace fs = std::filesystem;
      fs::create_directories(opt.images_dir);
      const int H = reference_fields.dim(1), W = reference_fields.dim(2);
      std::string name = rb.row.label;
      for (char& c : name)
        if (c == ' ' || c == '/') c = '_';
      write_triptych_ppm((fs::path(opt.images_dir) / (name + ".ppm")).string(), rb.stats.mean.data(),
                         rb.stats.stddev.data(), err.abs_error.data(), H, W);
    }
    rows.push_back(std::move(rb));
  }

  // Table-1-like ordering: HMC rows, then BBB, then the MCD cases; stable
  // within each group.
  auto prio = [](const std::string& backend) {
    if (backend == "hmc") return 0;
    if (backend == "bbb") return 1;
    if (backend == "mcd") return 2;
    return 3;
  };
  std::stable_sort(rows.begin(), rows.end(),
                   [&](const RowBacking& a, const RowBacking& b) { return prio(a.backend) < prio(b.backend); });
  for (RowBacking& rb : rows) rep.rows.push_back(rb.row);

  rep.config_hash = config_hash_hex(
      {{"ensembles", hash_doc},
       {"dataset", bundle.metadata.value("config_hash", std::string{})},
       {"reference", opt.reference_path}});

  if (!opt.out_report.empty()) write_json_file(opt.out_report, suite_report_json(rep));
  std::fputs(suite_report_table(rep).c_str(), stdout);
  if (!opt.out_report.empty()) std::printf("wrote %s\n", opt.out_report.c_str());
  return rep;
}

// ---------------------------------------------------------------------------
// Exit-code mapping shared by the command-line tool.
// ---------------------------------------------------------------------------

template <typename Fn>
int run_guarded(Fn&& fn) {
  try {
    fn();
    return 0;
  } catch (const config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const io_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}

}  // namespace fstk

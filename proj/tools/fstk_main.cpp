// Command-line front end: gen-data, train, sample, evaluate.

#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fstk/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"field-regression surrogate toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset (FSTK bundle + sidecar)");
  fstk::GenConfig gen_cfg;
  std::string gen_out = "dataset.fstk";
  gen->add_option("--preset", gen_cfg.preset, "fiber-like | polycrystal-like")->capture_default_str();
  gen->add_option("--size", gen_cfg.size, "grid side length")->capture_default_str();
  gen->add_option("--count", gen_cfg.count, "total sample count")->capture_default_str();
  gen->add_option("--seed", gen_cfg.seed, "master seed")->capture_default_str();
  gen->add_option("--shards", gen_cfg.shards, "worker shard count")->capture_default_str();
  gen->add_option("--out", gen_out, "output path")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "deterministic pre-training, writes a checkpoint");
  std::string train_config, train_out = "network.fckp";
  train->add_option("--config", train_config, "run configuration JSON")->required();
  train->add_option("--out-checkpoint", train_out, "checkpoint path")->capture_default_str();

  // sample
  auto* sample = app.add_subcommand("sample", "draw a posterior predictive ensemble");
  std::string backend, sample_config, sample_ckpt, sample_out = "ensemble.fstk";
  std::string scenario_flag;
  sample->add_option("--backend", backend, "hmc | bbb | mcd")->required();
  sample->add_option("--config", sample_config, "run configuration JSON")->required();
  sample->add_option("--checkpoint", sample_ckpt, "pre-trained checkpoint (hmc/mcd)");
  sample->add_option("--scenario", scenario_flag, "mcd only: single | all");
  sample->add_option("--out", sample_out, "ensemble output path")->capture_default_str();

  // evaluate
  auto* eval = app.add_subcommand("evaluate", "metric suite over persisted ensembles");
  fstk::EvaluateOptions eval_opt;
  std::string sigma_eps_form = "corrected", sigma_avg_form = "sqrt_mean_std";
  eval->add_option("--ensembles", eval_opt.ensemble_paths, "ensemble files")->required()->expected(-1);
  eval->add_option("--reference-ensemble", eval_opt.reference_path, "reference ensemble for variance columns");
  eval->add_option("--dataset", eval_opt.dataset_path, "dataset with the test split")->required();
  eval->add_option("--out-report", eval_opt.out_report, "report JSON path");
  eval->add_option("--images-dir", eval_opt.images_dir, "write mean/std/abs-error triptychs here");
  eval->add_option("--sigma-eps-form", sigma_eps_form, "corrected | literal")->capture_default_str();
  eval->add_option("--sigma-avg-form", sigma_avg_form, "sqrt_mean_std | rms_of_std")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  return fstk::run_guarded([&] {
    if (gen->parsed()) {
      fstk::run_gen_data(gen_cfg, gen_out);
    } else if (train->parsed()) {
      fstk::run_train(train_config, train_out);
    } else if (sample->parsed()) {
      if (!scenario_flag.empty()) {
        fstk::check_config(backend == "mcd", "--scenario applies to the mcd backend only");
        fstk::check_config(scenario_flag == "single" || scenario_flag == "all",
                           "--scenario must be 'single' or 'all'");
        fstk::RunConfig rc = fstk::load_run_config(sample_config);
        rc.mcd.scenario = scenario_flag;
        fstk::run_sample_mcd(rc, sample_ckpt, sample_out);
      } else {
        fstk::run_sample(backend, sample_config, sample_ckpt, sample_out);
      }
    } else if (eval->parsed()) {
      fstk::check_config(sigma_eps_form == "corrected" || sigma_eps_form == "literal",
                         "--sigma-eps-form must be corrected|literal");
      fstk::check_config(sigma_avg_form == "sqrt_mean_std" || sigma_avg_form == "rms_of_std",
                         "--sigma-avg-form must be sqrt_mean_std|rms_of_std");
      eval_opt.metrics.sigma_eps_form =
          sigma_eps_form == "literal" ? fstk::SigmaEpsForm::kLiteral : fstk::SigmaEpsForm::kCorrected;
      eval_opt.metrics.sigma_avg_form =
          sigma_avg_form == "rms_of_std" ? fstk::SigmaAvgForm::kRmsOfStd : fstk::SigmaAvgForm::kSqrtMeanStd;
      fstk::run_evaluate(eval_opt);
    }
  });
}

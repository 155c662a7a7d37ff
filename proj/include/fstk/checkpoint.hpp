#pragma once

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fstk/bbb.hpp"
#include "fstk/common.hpp"
#include "fstk/hmc.hpp"
#include "fstk/io.hpp"
#include "fstk/unet.hpp"

// Typed checkpoint layouts on top of the generic container in io.hpp.
// Every checkpoint header carries the network spec, a config hash, the
// master seed, and the format version, so any artifact can be traced back
// to the run that produced it.

namespace fstk {

namespace detail {

inline nlohmann::json ckpt_meta(const NetworkSpec& spec, const std::string& kind, const std::string& config_hash,
                                uint64_t seed, const nlohmann::json& extra) {
  nlohmann::json meta;
  meta["format_version"] = 1;
  meta["kind"] = kind;
  meta["network"] = to_json(spec);
  meta["config_hash"] = config_hash;
  meta["seed"] = seed;
  if (!extra.is_null()) meta["extra"] = extra;
  return meta;
}

inline void require_ckpt_kind(const CheckpointFile& ckpt, const std::string& path, const std::string& kind) {
  check_io(ckpt.meta.contains("kind"), "'" + path + "' checkpoint does not declare a kind");
  check_io(ckpt.meta["kind"] == kind, "'" + path + "' is a '" + ckpt.meta["kind"].get<std::string>() +
                                          "' checkpoint, expected '" + kind + "'");
  check_io(ckpt.meta.contains("network"), "'" + path + "' checkpoint is missing the network spec");
}

// Running statistics are serialized per normalization layer, flagged
// non-trainable; order follows the layout manifest.
inline void push_running_sections(CheckpointFile& ckpt, const std::vector<BatchNormRunning<double>>& running) {
  for (size_t i = 0; i < running.size(); ++i) {
    ckpt.sections.emplace_back("running_mean_" + std::to_string(i), running[i].mean.vec());
    ckpt.sections.emplace_back("running_var_" + std::to_string(i), running[i].var.vec());
  }
}

inline std::vector<BatchNormRunning<double>> pull_running_sections(const CheckpointFile& ckpt, int bn_count,
                                                                   const std::string& path) {
  std::vector<BatchNormRunning<double>> running;
  for (int i = 0; i < bn_count; ++i) {
    std::string mk = "running_mean_" + std::to_string(i), vk = "running_var_" + std::to_string(i);
    check_io(ckpt.has_section(mk) && ckpt.has_section(vk),
             "'" + path + "' is missing running statistics for normalization layer " + std::to_string(i));
    const int C = static_cast<int>(ckpt.section(mk).size());
    check_io(C >= 1 && ckpt.section(vk).size() == static_cast<size_t>(C),
             "'" + path + "' running statistics for layer " + std::to_string(i) + " are malformed");
    BatchNormRunning<double> r(C);
    r.mean = Tensor<double>::from_data({C}, ckpt.section(mk));
    r.var = Tensor<double>::from_data({C}, ckpt.section(vk));
    running.push_back(std::move(r));
  }
  return running;
}

}  // namespace detail

// --------------------------- network checkpoints ---------------------------

inline void save_network_checkpoint(const std::string& path, const NetworkState<double>& state,
                                    const std::string& config_hash, uint64_t seed,
                                    const nlohmann::json& extra = nullptr) {
  CheckpointFile ckpt;
  ckpt.meta = detail::ckpt_meta(state.spec, "network", config_hash, seed, extra);
  ckpt.meta["trainable_sections"] = {"params"};
  ckpt.sections.emplace_back("params", flatten(state));
  detail::push_running_sections(ckpt, state.running);
  write_checkpoint(path, ckpt);
}

struct LoadedNetwork {
  NetworkState<double> state;
  nlohmann::json meta;
};

inline LoadedNetwork load_network_checkpoint(const std::string& path) {
  CheckpointFile ckpt = read_checkpoint(path);
  detail::require_ckpt_kind(ckpt, path, "network");
  LoadedNetwork out;
  out.meta = ckpt.meta;
  NetworkSpec spec = network_spec_from_json(ckpt.meta["network"]);
  out.state = build_network<double>(spec, /*seed=*/0);
  const std::vector<double>& flat = ckpt.section("params");
  check_io(static_cast<long long>(flat.size()) == out.state.manifest.total,
           "'" + path + "' parameter payload holds " + std::to_string(flat.size()) + " values, network needs " +
               std::to_string(out.state.manifest.total));
  unflatten_into(out.state, flat);
  out.state.running = detail::pull_running_sections(ckpt, out.state.manifest.bn_count, path);
  return out;
}

// ------------------------- variational checkpoints -------------------------

inline void save_variational_checkpoint(const std::string& path, const VariationalState<double>& vs,
                                        const std::string& config_hash, uint64_t seed,
                                        const nlohmann::json& extra = nullptr) {
  CheckpointFile ckpt;
  ckpt.meta = detail::ckpt_meta(vs.spec, "variational", config_hash, seed, extra);
  ckpt.meta["trainable_sections"] = {"mu", "rho", "det_params"};
  ckpt.meta["sigma2_prior"] = vs.sigma2_prior;
  ckpt.meta["lambda"] = vs.lambda;
  ckpt.meta["mc_samples"] = vs.mc_samples;
  ckpt.sections.emplace_back("mu", vs.mu);
  ckpt.sections.emplace_back("rho", vs.rho);
  ckpt.sections.emplace_back("det_params", vs.det_params);
  ckpt.sections.emplace_back("m_omega", vs.m_omega);
  detail::push_running_sections(ckpt, vs.running);
  write_checkpoint(path, ckpt);
}

struct LoadedVariational {
  VariationalState<double> state;
  nlohmann::json meta;
};

inline LoadedVariational load_variational_checkpoint(const std::string& path) {
  CheckpointFile ckpt = read_checkpoint(path);
  detail::require_ckpt_kind(ckpt, path, "variational");
  LoadedVariational out;
  out.meta = ckpt.meta;
  NetworkSpec spec = network_spec_from_json(ckpt.meta["network"]);
  out.state.spec = spec;
  out.state.manifest = build_manifest(spec);
  out.state.mu = ckpt.section("mu");
  out.state.rho = ckpt.section("rho");
  out.state.det_params = ckpt.section("det_params");
  out.state.m_omega = ckpt.section("m_omega");
  out.state.running = detail::pull_running_sections(ckpt, out.state.manifest.bn_count, path);
  out.state.sigma2_prior = ckpt.meta.value("sigma2_prior", out.state.sigma2_prior);
  out.state.lambda = ckpt.meta.value("lambda", out.state.lambda);
  out.state.mc_samples = ckpt.meta.value("mc_samples", out.state.mc_samples);
  detail::VarLayout layout = detail::variational_layout(out.state.manifest);
  check_io(static_cast<long long>(out.state.mu.size()) == layout.d_var &&
               out.state.rho.size() == out.state.mu.size(),
           "'" + path + "' variational payload does not match the network layout");
  return out;
}

// ----------------------------- chain traces -------------------------------

inline void save_chain_trace(const std::string& path, const ChainTrace& trace, const NetworkSpec& spec,
                             const std::string& config_hash, const nlohmann::json& extra = nullptr) {
  CheckpointFile ckpt;
  ckpt.meta = detail::ckpt_meta(spec, "chain", config_hash, trace.seed, extra);
  const size_t n = trace.samples.size();
  const size_t d = n ? trace.samples.front().size() : 0;
  ckpt.meta["n_samples"] = n;
  ckpt.meta["dimension"] = d;
  ckpt.meta["summary"] = chain_summary_json(trace);
  std::vector<double> flat;
  flat.reserve(n * d);
  for (const std::vector<double>& s : trace.samples) flat.insert(flat.end(), s.begin(), s.end());
  ckpt.sections.emplace_back("samples", std::move(flat));
  write_checkpoint(path, ckpt);
}

struct LoadedChain {
  std::vector<std::vector<double>> samples;
  nlohmann::json meta;
};

inline LoadedChain load_chain_trace(const std::string& path) {
  CheckpointFile ckpt = read_checkpoint(path);
  detail::require_ckpt_kind(ckpt, path, "chain");
  LoadedChain out;
  out.meta = ckpt.meta;
  size_t n = ckpt.meta.value("n_samples", size_t{0});
  size_t d = ckpt.meta.value("dimension", size_t{0});
  const std::vector<double>& flat = ckpt.section("samples");
  check_io(flat.size() == n * d, "'" + path + "' sample payload holds " + std::to_string(flat.size()) +
                                     " values, header declares " + std::to_string(n) + "x" + std::to_string(d));
  out.samples.resize(n);
  for (size_t i = 0; i < n; ++i) out.samples[i].assign(flat.begin() + static_cast<long long>(i * d),
                                                       flat.begin() + static_cast<long long>((i + 1) * d));
  return out;
}

}  // namespace fstk

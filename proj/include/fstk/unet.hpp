#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fstk/nn.hpp"

// Convolutional encoder-decoder (U-net) construction, forward evaluation,
// and the flatten/unflatten bridge between structured parameters and a flat
// parameter vector.

namespace fstk {

// A dropout injection point. Sites are named "enc<i>" (encoder blocks,
// 0 = outermost, increasing with depth) and "dec<j>" (decoder blocks,
// 0 = innermost, increasing toward the output). The mask is applied to the
// block's output activations, after the second ReLU, so everything fed by
// that block (pooling path and skip connection alike) sees the dropped
// channels.
struct DropoutSite {
  std::string site;
  double rate = 0.0;

  friend bool operator==(const DropoutSite& a, const DropoutSite& b) {
    return a.site == b.site && a.rate == b.rate;
  }
};

struct NetworkSpec {
  int in_channels = 1;
  int height = 128;
  int width = 128;
  std::vector<int> encoder_filters = {16, 64, 128, 256, 512};
  std::vector<int> decoder_filters = {256, 128, 64, 32};
  int kernel_size = 3;
  int output_kernel_size = 1;
  std::vector<DropoutSite> dropout;
  bool per_element_dropout = false;
  std::string dtype = "float64";

  int depth() const { return static_cast<int>(encoder_filters.size()); }

  // Small configuration that exercises the full pipeline in minutes.
  static NetworkSpec desk() {
    NetworkSpec s;
    s.height = 32;
    s.width = 32;
    s.encoder_filters = {8, 16, 32};
    s.decoder_filters = {16, 8};
    s.kernel_size = 3;
    return s;
  }

  static NetworkSpec fiber() { return NetworkSpec{}; }  // k=3, H=128

  static NetworkSpec polycrystal() {
    NetworkSpec s;
    s.kernel_size = 9;
    return s;
  }
};

inline bool valid_dropout_site(const NetworkSpec& spec, const std::string& site) {
  const int d = spec.depth();
  for (int i = 0; i < d; ++i)
    if (site == "enc" + std::to_string(i)) return true;
  for (int j = 0; j + 1 < d; ++j)
    if (site == "dec" + std::to_string(j)) return true;
  return false;
}

inline void validate(const NetworkSpec& spec) {
  check_config(spec.in_channels >= 1, "network: in_channels must be >= 1");
  const int d = spec.depth();
  check_config(d >= 2, "network: need at least 2 encoder blocks, got " + std::to_string(d));
  check_config(static_cast<int>(spec.decoder_filters.size()) == d - 1,
               "network: encoder depth must equal decoder depth + 1 (got " + std::to_string(d) +
                   " vs " + std::to_string(spec.decoder_filters.size()) + ")");
  for (int f : spec.encoder_filters)
    check_config(f >= 1, "network: encoder filter widths must be positive");
  for (int f : spec.decoder_filters)
    check_config(f >= 1, "network: decoder filter widths must be positive");
  check_config(spec.kernel_size % 2 == 1 && spec.kernel_size >= 1,
               "network: kernel_size must be odd and positive, got " +
                   std::to_string(spec.kernel_size));
  check_config(spec.output_kernel_size % 2 == 1 && spec.output_kernel_size >= 1,
               "network: output_kernel_size must be odd and positive, got " +
                   std::to_string(spec.output_kernel_size));
  const int div = 1 << (d - 1);
  check_config(spec.height >= div && spec.height % div == 0,
               "network: height " + std::to_string(spec.height) + " not divisible by 2^(depth-1) = " +
                   std::to_string(div));
  check_config(spec.width >= div && spec.width % div == 0,
               "network: width " + std::to_string(spec.width) + " not divisible by 2^(depth-1) = " +
                   std::to_string(div));
  for (const DropoutSite& ds : spec.dropout) {
    check_config(valid_dropout_site(spec, ds.site), "network: unknown dropout site '" + ds.site + "'");
    check_config(ds.rate >= 0.0 && ds.rate < 1.0,
                 "network: dropout rate must lie in [0,1), got " + std::to_string(ds.rate));
  }
  check_config(spec.dtype == "float64",
               "network: only dtype 'float64' is supported, got '" + spec.dtype + "'");
}

// One trainable tensor in the canonical parameter layout. bn_index points at
// the running-statistics slot for gamma/beta entries and is -1 for
// convolution kernels/biases.
struct ManifestEntry {
  std::string name;
  long long offset = 0;
  Shape shape;
  int bn_index = -1;

  long long numel() const { return shape_numel(shape); }
};

struct LayoutManifest {
  std::vector<ManifestEntry> entries;
  long long total = 0;  // d: total trainable parameter count
  int bn_count = 0;
};

namespace detail {

inline void push_conv(LayoutManifest& man, const std::string& name, int cout, int cin, int k) {
  man.entries.push_back({name + ".kernel", man.total, {cout, cin, k, k}, -1});
  man.total += static_cast<long long>(cout) * cin * k * k;
  man.entries.push_back({name + ".bias", man.total, {cout}, -1});
  man.total += cout;
}

inline void push_bn(LayoutManifest& man, const std::string& name, int c) {
  man.entries.push_back({name + ".gamma", man.total, {c}, man.bn_count});
  man.total += c;
  man.entries.push_back({name + ".beta", man.total, {c}, man.bn_count});
  man.total += c;
  ++man.bn_count;
}

}  // namespace detail

// Canonical parameter order: encoder blocks outermost-in, then decoder
// blocks innermost-out, then the final projection; within a block
// conv1, bn1, conv2, bn2.
inline LayoutManifest build_manifest(const NetworkSpec& spec) {
  validate(spec);
  LayoutManifest man;
  const int d = spec.depth();
  const int k = spec.kernel_size;
  for (int i = 0; i < d; ++i) {
    const int cin = i == 0 ? spec.in_channels : spec.encoder_filters[static_cast<size_t>(i - 1)];
    const int cout = spec.encoder_filters[static_cast<size_t>(i)];
    const std::string base = "enc" + std::to_string(i);
    detail::push_conv(man, base + ".conv1", cout, cin, k);
    detail::push_bn(man, base + ".bn1", cout);
    detail::push_conv(man, base + ".conv2", cout, cout, k);
    detail::push_bn(man, base + ".bn2", cout);
  }
  for (int j = 0; j + 1 < d; ++j) {
    const int carried =
        j == 0 ? spec.encoder_filters.back() : spec.decoder_filters[static_cast<size_t>(j - 1)];
    const int skip = spec.encoder_filters[static_cast<size_t>(d - 2 - j)];
    const int cout = spec.decoder_filters[static_cast<size_t>(j)];
    const std::string base = "dec" + std::to_string(j);
    detail::push_conv(man, base + ".conv1", cout, carried + skip, k);
    detail::push_bn(man, base + ".bn1", cout);
    detail::push_conv(man, base + ".conv2", cout, cout, k);
    detail::push_bn(man, base + ".bn2", cout);
  }
  detail::push_conv(man, "out", /*cout=*/1, spec.decoder_filters.back(), spec.output_kernel_size);
  return man;
}

// Structured network parameters: trainable tensors in manifest order plus
// the batch-norm running statistics (carried alongside, never flattened).
template <typename T>
struct NetworkState {
  NetworkSpec spec;
  LayoutManifest manifest;
  std::vector<Tensor<T>> params;
  std::vector<BatchNormRunning<T>> running;
};

using NetworkState64 = NetworkState<double>;

// He-normal initialization for kernels (std = sqrt(2/fan_in)), zero biases,
// gamma 1, beta 0. Deterministic in the seed.
template <typename T = double>
NetworkState<T> build_network(const NetworkSpec& spec, uint64_t seed) {
  NetworkState<T> st;
  st.spec = spec;
  st.manifest = build_manifest(spec);
  Rng rng(seed);
  for (const ManifestEntry& e : st.manifest.entries) {
    Tensor<T> t(e.shape);
    if (e.name.ends_with(".kernel")) {
      const long long fan_in = static_cast<long long>(e.shape[1]) * e.shape[2] * e.shape[3];
      const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
      for (long long i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(rng.normal() * stddev);
    } else if (e.name.ends_with(".gamma")) {
      t.fill(T{1});
    } else {
      t.fill(T{0});  // biases and betas
    }
    st.params.push_back(std::move(t));
  }
  for (int b = 0; b < st.manifest.bn_count; ++b) {
    // gamma entries for bn b carry the channel count in shape[0]
    int c = 0;
    for (const ManifestEntry& e : st.manifest.entries)
      if (e.bn_index == b) {
        c = e.shape[0];
        break;
      }
    st.running.emplace_back(c);
  }
  return st;
}

// ---- flatten / unflatten ------------------------------------------------

template <typename T>
std::vector<T> flatten(const NetworkState<T>& st) {
  std::vector<T> flat(static_cast<size_t>(st.manifest.total));
  for (size_t e = 0; e < st.manifest.entries.size(); ++e) {
    const ManifestEntry& me = st.manifest.entries[e];
    const Tensor<T>& t = st.params[e];
    std::copy(t.data(), t.data() + t.numel(), flat.begin() + static_cast<long long>(me.offset));
  }
  return flat;
}

// Rebuild structured parameter tensors from a flat vector; running stats are
// supplied separately (they are not part of the vector).
template <typename T>
void unflatten_into(NetworkState<T>& st, const std::vector<T>& flat) {
  check_arg(static_cast<long long>(flat.size()) == st.manifest.total,
            "unflatten: vector length " + std::to_string(flat.size()) + " != parameter count " +
                std::to_string(st.manifest.total));
  for (size_t e = 0; e < st.manifest.entries.size(); ++e) {
    const ManifestEntry& me = st.manifest.entries[e];
    Tensor<T>& t = st.params[e];
    std::copy(flat.begin() + me.offset, flat.begin() + me.offset + t.numel(), t.data());
  }
}

template <typename T>
NetworkState<T> unflatten(const NetworkSpec& spec, const std::vector<T>& flat,
                          std::vector<BatchNormRunning<T>> running) {
  NetworkState<T> st = build_network<T>(spec, /*seed=*/0);
  check_arg(static_cast<int>(running.size()) == st.manifest.bn_count,
            "unflatten: expected " + std::to_string(st.manifest.bn_count) +
                " running-stat slots, got " + std::to_string(running.size()));
  st.running = std::move(running);
  unflatten_into(st, flat);
  return st;
}

// ---- forward ------------------------------------------------------------

template <typename T>
struct ForwardOptions {
  bool training = false;     // batch statistics + running-stat EMA update
  Rng* dropout_rng = nullptr;  // dropout masks drawn iff non-null and sites configured
};

namespace detail {

template <typename T>
struct BoundParams {
  const NetworkSpec* spec;
  const LayoutManifest* man;
  const std::vector<Var<T>>* vars;  // one Var per manifest entry, in order
  size_t cursor = 0;

  Var<T> next(const char* suffix) {
    check_arg(cursor < vars->size(), "forward: parameter binding underrun");
    const ManifestEntry& e = man->entries[cursor];
    check_arg(e.name.ends_with(suffix),
              "forward: binding order mismatch, expected *" + std::string(suffix) + " got " + e.name);
    return (*vars)[cursor++];
  }
};

template <typename T>
double dropout_rate(const NetworkSpec& spec, const std::string& site) {
  for (const DropoutSite& ds : spec.dropout)
    if (ds.site == site) return ds.rate;
  return 0.0;
}

// conv -> BN -> ReLU, twice.
template <typename T>
Var<T> double_conv(BoundParams<T>& bp, std::vector<BatchNormRunning<T>>& running, Var<T> x,
                   const ForwardOptions<T>& opt) {
  for (int rep = 0; rep < 2; ++rep) {
    Var<T> kern = bp.next(".kernel");
    Var<T> bias = bp.next(".bias");
    Var<T> gamma = bp.next(".gamma");
    const int bn = bp.man->entries[bp.cursor - 1].bn_index;
    Var<T> beta = bp.next(".beta");
    x = conv2d(x, kern, bias);
    x = batchnorm(x, gamma, beta, &running[static_cast<size_t>(bn)], opt.training);
    x = relu(x);
  }
  return x;
}

}  // namespace detail

// Evaluate the network on `input` with parameters bound through `params`
// (one Var per manifest entry, manifest order). Encoder: {conv-BN-ReLU}x2
// then 2x2 max pool (no pool after the innermost block). Decoder: 2x
// nearest-neighbour upsample, concatenate the matching encoder skip, then
// {conv-BN-ReLU}x2. Final projection: 1-channel linear convolution.
template <typename T>
Var<T> unet_forward(const NetworkSpec& spec, const LayoutManifest& man,
                    const std::vector<Var<T>>& params, std::vector<BatchNormRunning<T>>& running,
                    Var<T> input, const ForwardOptions<T>& opt = {}) {
  check_arg(params.size() == man.entries.size(),
            "forward: expected " + std::to_string(man.entries.size()) + " parameter bindings, got " +
                std::to_string(params.size()));
  const Tensor<T>& x0 = input.value();
  check_arg(x0.rank() == 4 && x0.dim(1) == spec.in_channels && x0.dim(2) == spec.height &&
                x0.dim(3) == spec.width,
            "forward: input shape " + shape_str(x0.shape()) + " does not match spec [N," +
                std::to_string(spec.in_channels) + "," + std::to_string(spec.height) + "," +
                std::to_string(spec.width) + "]");
  detail::BoundParams<T> bp{&spec, &man, &params, 0};
  const int d = spec.depth();

  auto maybe_dropout = [&](Var<T> x, const std::string& site) {
    if (opt.dropout_rng == nullptr) return x;
    const double p = detail::dropout_rate<T>(spec, site);
    return apply_dropout(x, static_cast<T>(p), spec.per_element_dropout, *opt.dropout_rng);
  };

  std::vector<Var<T>> skips;
  Var<T> x = input;
  for (int i = 0; i < d; ++i) {
    x = detail::double_conv(bp, running, x, opt);
    x = maybe_dropout(x, "enc" + std::to_string(i));
    if (i + 1 < d) {
      skips.push_back(x);
      x = maxpool2(x);
    }
  }
  for (int j = 0; j + 1 < d; ++j) {
    x = upsample_nearest2(x);
    x = channel_concat(x, skips[static_cast<size_t>(d - 2 - j)]);
    x = detail::double_conv(bp, running, x, opt);
    x = maybe_dropout(x, "dec" + std::to_string(j));
  }
  Var<T> kern = bp.next(".kernel");
  Var<T> bias = bp.next(".bias");
  x = conv2d(x, kern, bias);
  check_arg(bp.cursor == params.size(), "forward: unused parameter bindings");
  check_numeric(x.value().all_finite(), "forward: non-finite values in network output");
  return x;
}

// Bind a NetworkState's tensors as tape leaves (trainable iff requires_grad).
template <typename T>
std::vector<Var<T>> bind_state(Tape<T>& tape, const NetworkState<T>& st, bool requires_grad) {
  std::vector<Var<T>> vars;
  vars.reserve(st.params.size());
  for (const Tensor<T>& t : st.params) vars.push_back(tape.leaf(t, requires_grad));
  return vars;
}

// Bind parameters as windows into one flat leaf (gradient lands on the flat
// vector directly). `flat` must hold manifest.total elements.
template <typename T>
std::vector<Var<T>> bind_flat(const LayoutManifest& man, Var<T> flat) {
  check_arg(flat.value().numel() == man.total,
            "bind_flat: vector length " + std::to_string(flat.value().numel()) +
                " != parameter count " + std::to_string(man.total));
  std::vector<Var<T>> vars;
  vars.reserve(man.entries.size());
  for (const ManifestEntry& e : man.entries) vars.push_back(slice(flat, e.offset, e.shape));
  return vars;
}

// Plain prediction on a state (no tape bookkeeping kept afterwards).
template <typename T>
Tensor<T> predict(NetworkState<T>& st, const Tensor<T>& input, const ForwardOptions<T>& opt = {}) {
  Tape<T> tape;
  std::vector<Var<T>> vars = bind_state(tape, st, /*requires_grad=*/false);
  Var<T> in = tape.constant(input);
  Var<T> out = unet_forward(st.spec, st.manifest, vars, st.running, in, opt);
  return out.value();
}

// ---- JSON (strict) -------------------------------------------------------

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& allowed,
                                const std::string& context) {
  check_config(j.is_object(), context + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const std::string& k : allowed) ok |= (it.key() == k);
    check_config(ok, context + ": unknown key '" + it.key() + "'");
  }
}

inline nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json j;
  j["in_channels"] = spec.in_channels;
  j["height"] = spec.height;
  j["width"] = spec.width;
  j["encoder_filters"] = spec.encoder_filters;
  j["decoder_filters"] = spec.decoder_filters;
  j["kernel_size"] = spec.kernel_size;
  j["output_kernel_size"] = spec.output_kernel_size;
  nlohmann::json drop = nlohmann::json::array();
  for (const DropoutSite& ds : spec.dropout) drop.push_back({{"site", ds.site}, {"rate", ds.rate}});
  j["dropout"] = drop;
  j["per_element_dropout"] = spec.per_element_dropout;
  j["dtype"] = spec.dtype;
  return j;
}

inline NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j,
                      {"in_channels", "height", "width", "encoder_filters", "decoder_filters",
                       "kernel_size", "output_kernel_size", "dropout", "per_element_dropout",
                       "dtype", "preset"},
                      "network");
  NetworkSpec spec;
  if (j.contains("preset")) {
    const std::string p = j["preset"].get<std::string>();
    if (p == "desk")
      spec = NetworkSpec::desk();
    else if (p == "fiber")
      spec = NetworkSpec::fiber();
    else if (p == "polycrystal")
      spec = NetworkSpec::polycrystal();
    else
      check_config(false, "network: unknown preset '" + p + "'");
  }
  if (j.contains("in_channels")) spec.in_channels = j["in_channels"].get<int>();
  if (j.contains("height")) spec.height = j["height"].get<int>();
  if (j.contains("width")) spec.width = j["width"].get<int>();
  if (j.contains("encoder_filters")) spec.encoder_filters = j["encoder_filters"].get<std::vector<int>>();
  if (j.contains("decoder_filters")) spec.decoder_filters = j["decoder_filters"].get<std::vector<int>>();
  if (j.contains("kernel_size")) spec.kernel_size = j["kernel_size"].get<int>();
  if (j.contains("output_kernel_size")) spec.output_kernel_size = j["output_kernel_size"].get<int>();
  if (j.contains("dropout")) {
    spec.dropout.clear();
    for (const auto& d : j["dropout"]) {
      reject_unknown_keys(d, {"site", "rate"}, "network.dropout");
      spec.dropout.push_back({d["site"].get<std::string>(), d["rate"].get<double>()});
    }
  }
  if (j.contains("per_element_dropout")) spec.per_element_dropout = j["per_element_dropout"].get<bool>();
  if (j.contains("dtype")) spec.dtype = j["dtype"].get<std::string>();
  validate(spec);
  return spec;
}

}  // namespace fstk

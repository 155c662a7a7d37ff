#pragma once

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/Sparse>
#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "fstk/common.hpp"
#include "fstk/io.hpp"
#include "fstk/parallel.hpp"
#include "fstk/rng.hpp"
#include "fstk/tensor.hpp"
#include <nlohmann/json.hpp>

namespace fstk {

// ---------------------------------------------------------------------------
// Microstructure specification.
//
// The domain is the unit square; a pixel grid of H rows by W columns covers
// it, pixel (i,j) spanning x in [j/W,(j+1)/W] and y in [i/H,(i+1)/H].
// Lengths such as the disk radius are fractions of the unit side.
// ---------------------------------------------------------------------------

struct MicrostructureSpec {
  std::string kind = "disks";  // disks | voronoi
  int height = 128;
  int width = 128;

  // disks
  int disk_count = 20;
  double radius_fraction = 0.0;   // 0 -> derived from the volume-fraction target
  double volume_fraction = 0.4;   // target inclusion area fraction
  bool non_overlap = true;

  // voronoi
  int grain_count = 20;  // orientations drawn uniform on (-pi, pi]

  uint64_t seed = 0;

  double resolved_radius() const {
    if (radius_fraction > 0.0) return radius_fraction;
    check_config(disk_count > 0, "cannot derive a disk radius with disk_count = 0");
    return std::sqrt(volume_fraction / (disk_count * 3.14159265358979323846));
  }

  void validate() const {
    check_config(kind == "disks" || kind == "voronoi", "microstructure kind must be 'disks' or 'voronoi', got '" + kind + "'");
    check_config(height >= 2 && width >= 2, "microstructure grid must be at least 2x2");
    if (kind == "disks") {
      check_config(disk_count >= 0, "disk_count must be non-negative");
      check_config(volume_fraction >= 0.0 && volume_fraction < 1.0, "volume_fraction target must lie in [0,1)");
      if (disk_count > 0) {
        double r = resolved_radius();
        check_config(r > 0.0 && r < 0.5, "disks must fit within the domain: radius fraction " + std::to_string(r) + " is not in (0, 0.5)");
      }
    } else {
      check_config(grain_count >= 1, "grain_count must be at least 1");
    }
  }
};

// ---------------------------------------------------------------------------
// Disk microstructures: random sequential placement of equal disks, fully
// inside the domain, optionally non-overlapping, rasterized by the
// dominant-area rule (a pixel is labeled inclusion when at least half of its
// area is covered; coverage is measured on an 8x8 subgrid per pixel).
// ---------------------------------------------------------------------------

namespace detail {

struct DiskArrangement {
  std::vector<double> cx, cy;
};

// One placement pass. Returns true when all disks were placed within the
// candidate budget; draws exactly two uniforms per candidate.
inline bool place_disks(Rng& rng, int count, double r, bool non_overlap, long long budget, DiskArrangement& out,
                        long long& attempts_used) {
  out.cx.clear();
  out.cy.clear();
  attempts_used = 0;
  const double lo = r, hi = 1.0 - r;
  while (static_cast<int>(out.cx.size()) < count) {
    if (attempts_used >= budget) return false;
    ++attempts_used;
    double x = lo + (hi - lo) * rng.uniform();
    double y = lo + (hi - lo) * rng.uniform();
    bool ok = true;
    if (non_overlap) {
      for (size_t k = 0; k < out.cx.size() && ok; ++k) {
        double dx = x - out.cx[k], dy = y - out.cy[k];
        if (dx * dx + dy * dy < 4.0 * r * r) ok = false;
      }
    }
    if (ok) {
      out.cx.push_back(x);
      out.cy.push_back(y);
    }
  }
  return true;
}

// Dominant-area rasterization of a disk union. Each pixel carries a 64-bit
// mask of its 8x8 subcell centers; a pixel is labeled 1 when at least half
// the subcells fall inside some disk (ties count as inclusion).
inline void rasterize_disks_into(const DiskArrangement& d, double r, int H, int W, Tensor<double>& field) {
  const int S = 8;
  std::vector<uint64_t> cover(static_cast<size_t>(H) * W, 0);
  const double px = 1.0 / W, py = 1.0 / H;
  for (size_t k = 0; k < d.cx.size(); ++k) {
    int j0 = std::max(0, static_cast<int>(std::floor((d.cx[k] - r) * W)));
    int j1 = std::min(W - 1, static_cast<int>(std::floor((d.cx[k] + r) * W)));
    int i0 = std::max(0, static_cast<int>(std::floor((d.cy[k] - r) * H)));
    int i1 = std::min(H - 1, static_cast<int>(std::floor((d.cy[k] + r) * H)));
    for (int i = i0; i <= i1; ++i) {
      for (int j = j0; j <= j1; ++j) {
        uint64_t& m = cover[static_cast<size_t>(i) * W + j];
        if (m == ~0ULL) continue;
        for (int si = 0; si < S; ++si) {
          double y = (i + (si + 0.5) / S) * py;
          double dy = y - d.cy[k];
          for (int sj = 0; sj < S; ++sj) {
            double x = (j + (sj + 0.5) / S) * px;
            double dx = x - d.cx[k];
            if (dx * dx + dy * dy <= r * r) m |= 1ULL << (si * S + sj);
          }
        }
      }
    }
  }
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j)
      field[static_cast<long long>(i) * W + j] =
          std::popcount(cover[static_cast<size_t>(i) * W + j]) >= S * S / 2 ? 1.0 : 0.0;
}

}  // namespace detail

// Rasterize explicit disk centers (domain-unit coordinates); exposed so the
// geometry and the sampling can be exercised separately.
inline Tensor<double> rasterize_disks(const std::vector<std::pair<double, double>>& centers, double radius, int H,
                                      int W) {
  check_arg(H >= 1 && W >= 1, "raster grid must be positive");
  Tensor<double> field({1, H, W});
  detail::DiskArrangement d;
  for (const auto& [x, y] : centers) {
    d.cx.push_back(x);
    d.cy.push_back(y);
  }
  detail::rasterize_disks_into(d, radius, H, W, field);
  return field;
}

// Binary inclusion/matrix field from randomly placed equal disks. The
// achieved (rasterized) volume fraction must land within 2 percentage points
// of the target; arrangements violating that are re-drawn from the same
// stream, and a persistent failure raises a configuration error with
// placement diagnostics.
inline Tensor<double> gen_disks(const MicrostructureSpec& spec) {
  MicrostructureSpec s = spec;
  s.kind = "disks";
  s.validate();
  const int H = s.height, W = s.width;
  Tensor<double> field({1, H, W});
  if (s.disk_count == 0) return field;

  const double r = s.resolved_radius();
  Rng rng(s.seed);
  const long long budget = 20000;
  const int max_arrangements = 20;
  double best_vf = -1.0;
  for (int attempt = 0; attempt < max_arrangements; ++attempt) {
    detail::DiskArrangement d;
    long long used = 0;
    if (!detail::place_disks(rng, s.disk_count, r, s.non_overlap, budget, d, used)) {
      throw config_error("disk packing failed: placed " + std::to_string(d.cx.size()) + " of " +
                         std::to_string(s.disk_count) + " disks after " + std::to_string(used) +
                         " candidates (radius fraction " + std::to_string(r) + ", non_overlap " +
                         (s.non_overlap ? "true" : "false") + "); reduce count, radius, or the volume-fraction target");
    }
    detail::rasterize_disks_into(d, r, H, W, field);
    double ones = 0;
    for (long long i = 0; i < field.numel(); ++i) ones += field[i];
    double vf = ones / static_cast<double>(field.numel());
    if (std::abs(vf - s.volume_fraction) <= 0.02) return field;
    best_vf = std::max(best_vf, vf);
  }
  throw config_error("disk generation could not reach the volume-fraction target " +
                     std::to_string(s.volume_fraction) + " within 0.02 after " + std::to_string(max_arrangements) +
                     " arrangements (closest achieved " + std::to_string(best_vf) +
                     "); the radius fraction and target are inconsistent");
}

// ---------------------------------------------------------------------------
// Voronoi microstructures: grain labels by nearest seed point (Euclidean,
// ties to the lowest seed index), each grain carrying an orientation drawn
// uniform on (-pi, pi]. The returned field holds the orientation per pixel.
// Draw order: for each grain, x then y then the orientation uniform.
// ---------------------------------------------------------------------------

inline Tensor<double> gen_voronoi(const MicrostructureSpec& spec) {
  MicrostructureSpec s = spec;
  s.kind = "voronoi";
  s.validate();
  const int H = s.height, W = s.width, G = s.grain_count;
  Rng rng(s.seed);
  std::vector<double> sx(static_cast<size_t>(G)), sy(static_cast<size_t>(G)), theta(static_cast<size_t>(G));
  for (int g = 0; g < G; ++g) {
    sx[static_cast<size_t>(g)] = rng.uniform();
    sy[static_cast<size_t>(g)] = rng.uniform();
    // u in [0,1) maps to pi*(1-2u) in (-pi, pi]
    theta[static_cast<size_t>(g)] = 3.14159265358979323846 * (1.0 - 2.0 * rng.uniform());
  }
  Tensor<double> field({1, H, W});
  for (int i = 0; i < H; ++i) {
    double y = (i + 0.5) / H;
    for (int j = 0; j < W; ++j) {
      double x = (j + 0.5) / W;
      int best = 0;
      double bestd = std::numeric_limits<double>::infinity();
      for (int g = 0; g < G; ++g) {
        double dx = x - sx[static_cast<size_t>(g)], dy = y - sy[static_cast<size_t>(g)];
        double d2 = dx * dx + dy * dy;
        if (d2 < bestd) {  // strict: ties keep the lowest index
          bestd = d2;
          best = g;
        }
      }
      field[static_cast<long long>(i) * W + j] = theta[static_cast<size_t>(best)];
    }
  }
  return field;
}

inline Tensor<double> gen_microstructure(const MicrostructureSpec& spec) {
  return spec.kind == "voronoi" ? gen_voronoi(spec) : gen_disks(spec);
}

// ---------------------------------------------------------------------------
// Field oracle: steady diffusion -div(a(x) grad u) = 0 on the pixel grid,
// u = 0 on the left edge, u = 1 on the right edge, zero flux top and bottom.
// Cell-centered 5-point finite differences with harmonic face coefficients;
// the output is the horizontal flux a * du/dx per pixel.
// ---------------------------------------------------------------------------

// Map a microstructure to the scalar coefficient a(x):
//   disks:   a = 87 inside inclusions, 3.2 in the matrix
//   voronoi: a = 2 + cos(2*theta), orientation-dependent and positive
inline Tensor<double> coefficient_field(const Tensor<double>& micro, const std::string& kind) {
  check_arg(micro.rank() == 3 && micro.dim(0) == 1, "microstructure must be [1,H,W], got " + shape_str(micro.shape()));
  Tensor<double> a(micro.shape());
  if (kind == "disks") {
    for (long long i = 0; i < micro.numel(); ++i) a[i] = micro[i] > 0.5 ? 87.0 : 3.2;
  } else if (kind == "voronoi") {
    for (long long i = 0; i < micro.numel(); ++i) a[i] = 2.0 + std::cos(2.0 * micro[i]);
  } else {
    throw config_error("unknown coefficient mapping '" + kind + "'");
  }
  return a;
}

struct FluxSolution {
  Tensor<double> u;     // [1,H,W] potential
  Tensor<double> flux;  // [1,H,W] horizontal flux a*du/dx
  int iterations = 0;
  double residual = 0.0;  // relative residual reported by the solver
};

// Solve for the potential and the per-pixel horizontal flux. The conjugate
// gradient runs to a 1e-12 relative residual by default, comfortably inside
// the 1e-10 contract, so discrete conservation audits at 1e-8 hold.
inline FluxSolution solve_flux_detail(const Tensor<double>& a, double tol = 1e-12, int max_iter = 0) {
  check_arg(a.rank() == 3 && a.dim(0) == 1, "coefficient field must be [1,H,W], got " + shape_str(a.shape()));
  const int H = a.dim(1), W = a.dim(2);
  const long long n = static_cast<long long>(H) * W;
  for (long long i = 0; i < n; ++i) check_arg(a[i] > 0.0, "coefficient field must be strictly positive");
  const double hx = 1.0 / W, hy = 1.0 / H;
  auto harm = [](double l, double r) { return 2.0 * l * r / (l + r); };
  auto at = [&](int i, int j) { return a[static_cast<long long>(i) * W + j]; };
  auto idx = [&](int i, int j) { return static_cast<long long>(i) * W + j; };

  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(static_cast<size_t>(5 * n));
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      double diag = 0.0;
      const long long c = idx(i, j);
      if (j > 0) {
        double t = harm(at(i, j - 1), at(i, j)) * hy / hx;
        diag += t;
        trips.emplace_back(c, idx(i, j - 1), -t);
      } else {
        double t = at(i, j) * hy / (hx / 2.0);  // Dirichlet u=0 half-cell
        diag += t;
      }
      if (j < W - 1) {
        double t = harm(at(i, j), at(i, j + 1)) * hy / hx;
        diag += t;
        trips.emplace_back(c, idx(i, j + 1), -t);
      } else {
        double t = at(i, j) * hy / (hx / 2.0);  // Dirichlet u=1 half-cell
        diag += t;
        b[c] += t * 1.0;
      }
      if (i > 0) {
        double t = harm(at(i - 1, j), at(i, j)) * hx / hy;
        diag += t;
        trips.emplace_back(c, idx(i - 1, j), -t);
      }
      if (i < H - 1) {
        double t = harm(at(i, j), at(i + 1, j)) * hx / hy;
        diag += t;
        trips.emplace_back(c, idx(i + 1, j), -t);
      }
      trips.emplace_back(c, c, diag);
    }
  }
  Eigen::SparseMatrix<double> A(n, n);
  A.setFromTriplets(trips.begin(), trips.end());

  Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper,
                           Eigen::DiagonalPreconditioner<double>>
      cg;
  cg.setTolerance(tol);
  cg.setMaxIterations(max_iter > 0 ? max_iter : 40 * n);
  cg.compute(A);
  Eigen::VectorXd u = cg.solve(b);
  check_numeric(cg.info() == Eigen::Success,
                "flux solver did not converge: relative residual " + std::to_string(cg.error()) + " after " +
                    std::to_string(cg.iterations()) + " iterations");

  FluxSolution out;
  out.u = Tensor<double>({1, H, W});
  out.flux = Tensor<double>({1, H, W});
  out.iterations = static_cast<int>(cg.iterations());
  out.residual = cg.error();
  for (long long i = 0; i < n; ++i) out.u[i] = u[i];
  for (int i = 0; i < H; ++i) {
    for (int j = 0; j < W; ++j) {
      double qw = j > 0 ? harm(at(i, j - 1), at(i, j)) * (u[idx(i, j)] - u[idx(i, j - 1)]) / hx
                        : at(i, j) * (u[idx(i, j)] - 0.0) / (hx / 2.0);
      double qe = j < W - 1 ? harm(at(i, j), at(i, j + 1)) * (u[idx(i, j + 1)] - u[idx(i, j)]) / hx
                            : at(i, j) * (1.0 - u[idx(i, j)]) / (hx / 2.0);
      out.flux[idx(i, j)] = 0.5 * (qw + qe);
    }
  }
  return out;
}

inline Tensor<double> solve_flux(const Tensor<double>& a, double tol = 1e-12, int max_iter = 0) {
  return solve_flux_detail(a, tol, max_iter).flux;
}

inline Tensor<double> field_oracle(const Tensor<double>& micro, const std::string& kind) {
  return solve_flux(coefficient_field(micro, kind));
}

// ---------------------------------------------------------------------------
// Symmetry augmentation. The oracle's boundary conditions are invariant
// under a vertical flip and map onto themselves under u -> 1-u for a
// horizontal flip, so both the input field and the horizontal-flux output
// transform as plain flips with no sign change (verified numerically against
// re-solves in the test suite).
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> flip_field(const Tensor<T>& t, bool hflip, bool vflip) {
  check_arg(t.rank() == 4, "flip_field expects [n,C,H,W], got " + shape_str(t.shape()));
  const int N = t.dim(0), C = t.dim(1), H = t.dim(2), W = t.dim(3);
  Tensor<T> out(t.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
          out.at4(n, c, vflip ? H - 1 - i : i, hflip ? W - 1 - j : j) = t.at4(n, c, i, j);
  return out;
}

// Expands [n,...] paired fields to [4n,...]: for each base sample, the
// variants appear consecutively as (identity, hflip, vflip, both).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> augment_symmetry(const Tensor<T>& inputs, const Tensor<T>& outputs) {
  check_arg(inputs.rank() == 4 && outputs.rank() == 4 && inputs.same_shape(outputs),
            "augment_symmetry expects matched [n,C,H,W] pairs");
  const int N = inputs.dim(0), C = inputs.dim(1), H = inputs.dim(2), W = inputs.dim(3);
  Tensor<T> ai({4 * N, C, H, W}), ao({4 * N, C, H, W});
  const bool flips[4][2] = {{false, false}, {true, false}, {false, true}, {true, true}};
  const long long stride = static_cast<long long>(C) * H * W;
  for (int n = 0; n < N; ++n) {
    Tensor<T> in1({1, C, H, W}), out1({1, C, H, W});
    std::copy(inputs.data() + n * stride, inputs.data() + (n + 1) * stride, in1.data());
    std::copy(outputs.data() + n * stride, outputs.data() + (n + 1) * stride, out1.data());
    for (int v = 0; v < 4; ++v) {
      Tensor<T> fi = flip_field(in1, flips[v][0], flips[v][1]);
      Tensor<T> fo = flip_field(out1, flips[v][0], flips[v][1]);
      std::copy(fi.data(), fi.data() + stride, ai.data() + (4LL * n + v) * stride);
      std::copy(fo.data(), fo.data() + stride, ao.data() + (4LL * n + v) * stride);
    }
  }
  return {std::move(ai), std::move(ao)};
}

// ---------------------------------------------------------------------------
// Dataset bundles: generation, splits, standardization, persistence.
// ---------------------------------------------------------------------------

struct GenConfig {
  std::string preset = "fiber-like";  // fiber-like | polycrystal-like
  int size = 128;                     // grid side H = W
  int count = 1140;                   // total samples (after augmentation for fiber-like)
  uint64_t seed = 0;
  int shards = 1;  // worker count; the result depends only on (preset,size,count,seed)

  void validate() const {
    check_config(preset == "fiber-like" || preset == "polycrystal-like",
                 "preset must be 'fiber-like' or 'polycrystal-like', got '" + preset + "'");
    check_config(size >= 4, "size must be at least 4");
    check_config(count >= 4, "count must be at least 4");
    check_config(shards >= 1, "shards must be at least 1");
    if (preset == "fiber-like")
      check_config(count % 4 == 0, "fiber-like count must be divisible by 4 (symmetry augmentation)");
  }
};

// train/val/test sizes: the 1140-sample default splits 1000/100/40 and the
// 220-sample desk default splits 160/40/20; other totals use a 80/10/10
// rule with the remainder assigned to the test split.
inline std::array<int, 3> split_sizes(int n) {
  check_config(n >= 3, "dataset too small to split: n = " + std::to_string(n));
  if (n == 1140) return {1000, 100, 40};
  if (n == 220) return {160, 40, 20};
  int train = std::max(1, (n * 8) / 10);
  int val = std::max(1, n / 10);
  if (train + val >= n) val = std::max(1, n - train - 1);
  int test = n - train - val;
  check_config(test >= 1, "split rule left no test samples for n = " + std::to_string(n));
  return {train, val, test};
}

struct DatasetBundle {
  Tensor<double> inputs;   // [n,1,H,W], standardized and binary32-quantized
  Tensor<double> outputs;  // [n,1,H,W], standardized and binary32-quantized
  std::vector<int> train_idx, val_idx, test_idx;
  nlohmann::json metadata;

  int count() const { return inputs.dim(0); }
  int height() const { return inputs.dim(2); }
  int width() const { return inputs.dim(3); }
};

inline Tensor<double> gather_samples(const Tensor<double>& t, const std::vector<int>& idx) {
  check_arg(t.rank() == 4, "gather_samples expects [n,C,H,W]");
  const long long stride = static_cast<long long>(t.dim(1)) * t.dim(2) * t.dim(3);
  Tensor<double> out({static_cast<int>(idx.size()), t.dim(1), t.dim(2), t.dim(3)});
  for (size_t k = 0; k < idx.size(); ++k) {
    check_arg(idx[k] >= 0 && idx[k] < t.dim(0), "sample index out of range");
    std::copy(t.data() + idx[k] * stride, t.data() + (idx[k] + 1) * stride, out.data() + static_cast<long long>(k) * stride);
  }
  return out;
}

namespace detail {

struct FieldStats {
  double mean = 0.0, stddev = 1.0;
};

inline FieldStats fit_stats(const Tensor<double>& t, const std::vector<int>& idx) {
  const long long stride = static_cast<long long>(t.dim(1)) * t.dim(2) * t.dim(3);
  double s = 0.0;
  for (int k : idx)
    for (long long i = 0; i < stride; ++i) s += t[k * stride + i];
  const double m = s / (static_cast<double>(idx.size()) * stride);
  double v = 0.0;
  for (int k : idx)
    for (long long i = 0; i < stride; ++i) {
      double d = t[k * stride + i] - m;
      v += d * d;
    }
  v /= static_cast<double>(idx.size()) * stride;
  FieldStats st;
  st.mean = m;
  st.stddev = v > 1e-24 ? std::sqrt(v) : 1.0;
  return st;
}

inline void standardize_inplace(Tensor<double>& t, const FieldStats& st) {
  for (long long i = 0; i < t.numel(); ++i) t[i] = (t[i] - st.mean) / st.stddev;
}

// Quantize through binary32 so the in-memory values match the persisted
// payload bit for bit.
inline void quantize_f32_inplace(Tensor<double>& t) {
  for (long long i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(static_cast<float>(t[i]));
}

}  // namespace detail

inline Tensor<double> destandardize(const Tensor<double>& t, double mean, double stddev) {
  Tensor<double> out(t.shape());
  for (long long i = 0; i < t.numel(); ++i) out[i] = t[i] * stddev + mean;
  return out;
}

// Generate a complete dataset: microstructures, oracle solves, symmetry
// augmentation (fiber-like only), contiguous splits, standardization by the
// training split, and binary32 quantization. Deterministic in the seed;
// sample s draws from the sub-stream (seed, s) so shard count is irrelevant.
inline DatasetBundle generate_dataset(const GenConfig& cfg) {
  cfg.validate();
  const bool fiber = cfg.preset == "fiber-like";
  const int H = cfg.size, W = cfg.size;
  const int base = fiber ? cfg.count / 4 : cfg.count;

  MicrostructureSpec proto;
  proto.kind = fiber ? "disks" : "voronoi";
  proto.height = H;
  proto.width = W;

  Tensor<double> base_in({base, 1, H, W});
  Tensor<double> base_out({base, 1, H, W});
  std::vector<double> vf(static_cast<size_t>(base), 0.0);
  const long long stride = static_cast<long long>(H) * W;

  int shards = std::min(cfg.shards, base);
  parallel_shards(shards, [&](int shard) {
    for (int s = shard; s < base; s += shards) {
      MicrostructureSpec ms = proto;
      ms.seed = Rng::stream(cfg.seed, static_cast<uint64_t>(s)).next_u64();
      Tensor<double> micro = gen_microstructure(ms);
      Tensor<double> flux = field_oracle(micro, ms.kind);
      std::copy(micro.data(), micro.data() + stride, base_in.data() + s * stride);
      std::copy(flux.data(), flux.data() + stride, base_out.data() + s * stride);
      if (fiber) {
        double ones = 0;
        for (long long i = 0; i < stride; ++i) ones += micro[i];
        vf[static_cast<size_t>(s)] = ones / static_cast<double>(stride);
      }
    }
  });

  DatasetBundle b;
  if (fiber) {
    auto [ai, ao] = augment_symmetry(base_in, base_out);
    b.inputs = std::move(ai);
    b.outputs = std::move(ao);
  } else {
    b.inputs = std::move(base_in);
    b.outputs = std::move(base_out);
  }

  const int n = b.inputs.dim(0);
  auto sizes = split_sizes(n);
  for (int i = 0; i < sizes[0]; ++i) b.train_idx.push_back(i);
  for (int i = 0; i < sizes[1]; ++i) b.val_idx.push_back(sizes[0] + i);
  for (int i = 0; i < sizes[2]; ++i) b.test_idx.push_back(sizes[0] + sizes[1] + i);

  detail::FieldStats in_st = detail::fit_stats(b.inputs, b.train_idx);
  detail::FieldStats out_st = detail::fit_stats(b.outputs, b.train_idx);
  detail::standardize_inplace(b.inputs, in_st);
  detail::standardize_inplace(b.outputs, out_st);
  detail::quantize_f32_inplace(b.inputs);
  detail::quantize_f32_inplace(b.outputs);

  nlohmann::json meta;
  meta["format_version"] = 1;
  meta["preset"] = cfg.preset;
  meta["size"] = cfg.size;
  meta["count"] = n;
  meta["base_count"] = base;
  meta["seed"] = cfg.seed;
  meta["config_hash"] = config_hash_hex(
      {{"preset", cfg.preset}, {"size", cfg.size}, {"count", cfg.count}, {"seed", cfg.seed}});
  meta["sample_seed_rule"] = "sub-stream (seed, sample_index)";
  meta["augmentation"] = fiber ? "sym4" : "none";
  meta["microstructure"] = {{"kind", proto.kind},
                            {"disk_count", proto.disk_count},
                            {"radius_fraction", fiber ? proto.resolved_radius() : 0.0},
                            {"volume_fraction_target", proto.volume_fraction},
                            {"non_overlap", proto.non_overlap},
                            {"grain_count", proto.grain_count}};
  meta["oracle"] = {{"equation", "-div(a grad u) = 0"},
                    {"bc", "u=0 left, u=1 right, zero-flux top/bottom"},
                    {"coefficients", fiber ? "two-phase 87/3.2" : "2+cos(2*theta)"},
                    {"output", "horizontal flux a*du/dx"},
                    {"cg_tolerance", 1e-12}};
  meta["splits"] = {{"train", sizes[0]}, {"val", sizes[1]}, {"test", sizes[2]}};
  meta["standardization"] = {{"input_mean", in_st.mean},
                             {"input_std", in_st.stddev},
                             {"output_mean", out_st.mean},
                             {"output_std", out_st.stddev}};
  if (fiber) {
    double lo = 1.0, hi = 0.0, mean = 0.0;
    for (double v : vf) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      mean += v;
    }
    meta["summary"] = {{"volume_fraction_mean", mean / base},
                       {"volume_fraction_min", lo},
                       {"volume_fraction_max", hi}};
  } else {
    meta["summary"] = {{"grain_count", proto.grain_count}};
  }
  b.metadata = std::move(meta);
  return b;
}

// ---------------------------------------------------------------------------
// Persistence: one field stack with two channels (input, output) plus a JSON
// sidecar at <path>.json holding the splits and generation metadata.
// ---------------------------------------------------------------------------

inline std::string sidecar_path(const std::string& path) { return path + ".json"; }

inline void write_dataset_fstk(const DatasetBundle& b, const std::string& path) {
  check_arg(b.inputs.rank() == 4 && b.inputs.same_shape(b.outputs), "bundle inputs/outputs must be matched [n,1,H,W]");
  const int n = b.count(), H = b.height(), W = b.width();
  Tensor<float> stack({n, 2, H, W});
  const long long stride = static_cast<long long>(H) * W;
  for (int s = 0; s < n; ++s)
    for (long long i = 0; i < stride; ++i) {
      stack[(2LL * s) * stride + i] = static_cast<float>(b.inputs[s * stride + i]);
      stack[(2LL * s + 1) * stride + i] = static_cast<float>(b.outputs[s * stride + i]);
    }
  write_field_stack(path, stack);
  nlohmann::json side;
  side["format_version"] = 1;
  side["kind"] = "dataset";
  side["count"] = n;
  side["splits"] = {{"train", b.train_idx}, {"val", b.val_idx}, {"test", b.test_idx}};
  side["metadata"] = b.metadata;
  write_json_file(sidecar_path(path), side);
}

inline DatasetBundle read_dataset_fstk(const std::string& path) {
  Tensor<float> stack = read_field_stack(path);
  check_io(stack.dim(1) == 2, "'" + path + "' is not a dataset stack: expected 2 channels, found " +
                                  std::to_string(stack.dim(1)));
  nlohmann::json side = read_json_file(sidecar_path(path));
  check_io(side.contains("kind") && side["kind"] == "dataset", "'" + sidecar_path(path) + "' is not a dataset sidecar");
  check_io(side.contains("count") && side.contains("splits") && side.contains("metadata"),
           "'" + sidecar_path(path) + "' is missing count/splits/metadata");
  const int n = stack.dim(0), H = stack.dim(2), W = stack.dim(3);
  check_io(side["count"].get<int>() == n, "sidecar/payload count mismatch: sidecar says " +
                                              std::to_string(side["count"].get<int>()) + ", payload holds " +
                                              std::to_string(n));
  DatasetBundle b;
  b.inputs = Tensor<double>({n, 1, H, W});
  b.outputs = Tensor<double>({n, 1, H, W});
  const long long stride = static_cast<long long>(H) * W;
  for (int s = 0; s < n; ++s)
    for (long long i = 0; i < stride; ++i) {
      b.inputs[s * stride + i] = static_cast<double>(stack[(2LL * s) * stride + i]);
      b.outputs[s * stride + i] = static_cast<double>(stack[(2LL * s + 1) * stride + i]);
    }
  auto load_split = [&](const char* name) {
    std::vector<int> idx = side["splits"][name].get<std::vector<int>>();
    for (int v : idx)
      check_io(v >= 0 && v < n, std::string("sidecar split '") + name + "' index " + std::to_string(v) +
                                    " is out of range for " + std::to_string(n) + " samples");
    return idx;
  };
  b.train_idx = load_split("train");
  b.val_idx = load_split("val");
  b.test_idx = load_split("test");
  std::vector<char> seen(static_cast<size_t>(n), 0);
  long long total = 0;
  for (const auto* split : {&b.train_idx, &b.val_idx, &b.test_idx})
    for (int v : *split) {
      check_io(!seen[static_cast<size_t>(v)], "sidecar splits overlap at sample " + std::to_string(v));
      seen[static_cast<size_t>(v)] = 1;
      ++total;
    }
  check_io(total == n, "sidecar splits cover " + std::to_string(total) + " of " + std::to_string(n) + " samples");
  b.metadata = side["metadata"];
  return b;
}

}  // namespace fstk

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "fstk/common.hpp"
#include "fstk/io.hpp"
#include "fstk/tensor.hpp"

// Portable field-map rendering: binary PPM (P6) images of scalar fields and
// the prediction / standard deviation / absolute error triptych.

namespace fstk {

struct Rgb {
  unsigned char r = 0, g = 0, b = 0;
};

// Piecewise-linear sequential colormap (dark blue -> cyan -> yellow -> red)
// over t in [0,1]; clamped outside.
inline Rgb heat_color(double t) {
  t = std::clamp(t, 0.0, 1.0);
  struct Stop {
    double t;
    double r, g, b;
  };
  static const Stop stops[] = {
      {0.0, 0.05, 0.03, 0.35}, {0.33, 0.0, 0.65, 0.85}, {0.66, 0.95, 0.85, 0.15}, {1.0, 0.75, 0.05, 0.05}};
  const Stop* lo = &stops[0];
  const Stop* hi = &stops[3];
  for (int i = 0; i < 3; ++i)
    if (t >= stops[i].t && t <= stops[i + 1].t) {
      lo = &stops[i];
      hi = &stops[i + 1];
      break;
    }
  double f = hi->t > lo->t ? (t - lo->t) / (hi->t - lo->t) : 0.0;
  auto ch = [&](double a, double b) {
    return static_cast<unsigned char>(std::lround(255.0 * (a + f * (b - a))));
  };
  return {ch(lo->r, hi->r), ch(lo->g, hi->g), ch(lo->b, hi->b)};
}

inline void write_ppm(const std::string& path, const std::vector<Rgb>& pixels, int H, int W) {
  check_arg(static_cast<long long>(pixels.size()) == static_cast<long long>(H) * W, "pixel buffer size mismatch");
  std::string out = "P6\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  out.reserve(out.size() + pixels.size() * 3);
  for (const Rgb& p : pixels) {
    out.push_back(static_cast<char>(p.r));
    out.push_back(static_cast<char>(p.g));
    out.push_back(static_cast<char>(p.b));
  }
  detail::write_file_bytes(path, out);
}

// Render one [H,W] field slice, min-max normalized (constant fields map to
// the low end of the scale).
inline std::vector<Rgb> render_field(const double* field, int H, int W) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  const long long n = static_cast<long long>(H) * W;
  for (long long i = 0; i < n; ++i) {
    lo = std::min(lo, field[i]);
    hi = std::max(hi, field[i]);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::vector<Rgb> px(static_cast<size_t>(n));
  for (long long i = 0; i < n; ++i) px[static_cast<size_t>(i)] = heat_color((field[i] - lo) / span);
  return px;
}

// Three panels side by side (mean | stddev | absolute error), separated by a
// 2-pixel white gutter, each panel normalized independently.
inline void write_triptych_ppm(const std::string& path, const double* mean, const double* stddev,
                               const double* abs_error, int H, int W) {
  const int gutter = 2;
  const int outW = 3 * W + 2 * gutter;
  std::vector<Rgb> canvas(static_cast<size_t>(H) * outW, Rgb{255, 255, 255});
  const double* panels[3] = {mean, stddev, abs_error};
  for (int p = 0; p < 3; ++p) {
    std::vector<Rgb> px = render_field(panels[p], H, W);
    const int x0 = p * (W + gutter);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        canvas[static_cast<size_t>(i) * outW + x0 + j] = px[static_cast<size_t>(i) * W + j];
  }
  write_ppm(path, canvas, H, outW);
}

}  // namespace fstk

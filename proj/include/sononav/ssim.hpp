#pragma once

// Windowed structural similarity with an 11x11 Gaussian window, averaged over
// every window position that lies fully inside the image.

#include <cmath>
#include <vector>

#include <nlohmann/json.hpp>

#include "sononav/common.hpp"

namespace sononav {

struct SsimParams {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
  double dynamic_range = 255.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }

  void validate() const {
    if (window < 1 || window % 2 == 0) throw InvalidArgument("SSIM window must be a positive odd size");
    if (!(sigma > 0 && k1 > 0 && k2 > 0 && dynamic_range > 0)) throw InvalidArgument("SSIM constants must be positive");
  }
};

inline void to_json(nlohmann::json& j, const SsimParams& p) {
  j = nlohmann::json{{"window", p.window}, {"sigma", p.sigma}, {"k1", p.k1}, {"k2", p.k2}, {"dynamic_range", p.dynamic_range}};
}
inline void from_json(const nlohmann::json& j, SsimParams& p) {
  for (const auto& [key, value] : j.items()) {
    if (key == "window") p.window = value.get<int>();
    else if (key == "sigma") p.sigma = value.get<double>();
    else if (key == "k1") p.k1 = value.get<double>();
    else if (key == "k2") p.k2 = value.get<double>();
    else if (key == "dynamic_range") p.dynamic_range = value.get<double>();
    else throw InvalidArgument("unknown ssim key: " + key);
  }
  p.validate();
}

// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
inline std::vector<double> gaussian_taps(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  double sum = 0;
  int r = size / 2;
  for (int i = 0; i < size; ++i) {
    g[static_cast<std::size_t>(i)] = std::exp(-0.5 * (i - r) * (i - r) / (sigma * sigma));
    sum += g[static_cast<std::size_t>(i)];
  }
  for (auto& v : g) v /= sum;
  return g;
}

namespace detail {

// Valid-mode separable filtering of a rows x cols plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, int rows, int cols, const std::vector<double>& g) {
  const int k = static_cast<int>(g.size());
  const int orows = rows - k + 1, ocols = cols - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(rows) * ocols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < ocols; ++c) {
      double s = 0;
      for (int t = 0; t < k; ++t) s += g[static_cast<std::size_t>(t)] * src[static_cast<std::size_t>(r) * cols + c + t];
      tmp[static_cast<std::size_t>(r) * ocols + c] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(orows) * ocols);
  for (int r = 0; r < orows; ++r)
    for (int c = 0; c < ocols; ++c) {
      double s = 0;
      for (int t = 0; t < k; ++t) s += g[static_cast<std::size_t>(t)] * tmp[static_cast<std::size_t>(r + t) * ocols + c];
      out[static_cast<std::size_t>(r) * ocols + c] = s;
    }
  return out;
}

}  // namespace detail

inline double ssim(const Image& a, const Image& b, const SsimParams& p = {}) {
  p.validate();
  if (a.rows != b.rows || a.cols != b.cols) throw InvalidArgument("SSIM needs images of equal shape");
  if (a.rows < p.window || a.cols < p.window) throw InvalidArgument("image smaller than the SSIM window");
  const std::size_t n = a.pixels.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a.pixels[i];
    y[i] = b.pixels[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  auto g = gaussian_taps(p.window, p.sigma);
  auto mx = detail::filter_valid(x, a.rows, a.cols, g);
  auto my = detail::filter_valid(y, a.rows, a.cols, g);
  auto sxx = detail::filter_valid(xx, a.rows, a.cols, g);
  auto syy = detail::filter_valid(yy, a.rows, a.cols, g);
  auto sxy = detail::filter_valid(xy, a.rows, a.cols, g);
  const double c1 = p.c1(), c2 = p.c2();
  double total = 0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    double vx = sxx[i] - mx[i] * mx[i];
    double vy = syy[i] - my[i] * my[i];
    double cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

}  // namespace sononav

#pragma once

// Independent reference implementations used as test oracles.

#include <cmath>
#include <vector>

#include "sononav/common.hpp"

namespace sononav::oracle {

// Dense Dirichlet solve of the 8-connected random-walk Laplacian, written
// directly from the weight formula and eliminated in long double without any
// subtraction: the pivot of each node is its remaining edge weight plus what it
// leaks to the two fixed rows, and eliminating a node only adds positive terms
// to the others. Random images give weights near exp(-beta); an LU that forms
// the diagonal as a sum loses the weak ties of isolated pixel clusters.
// Returns rows*cols values, row-major.
inline std::vector<double> dense_confidence(const Image& img, double alpha, double beta, double gamma) {
  using LD = long double;
  const int rows = img.rows, cols = img.cols;
  const int m = (rows - 2) * cols;
  auto g = [&](int r, int c) { return img.at(r, c) / 255.0L * std::exp(-static_cast<LD>(alpha) * r / rows); };
  std::vector<std::vector<LD>> w(static_cast<std::size_t>(m), std::vector<LD>(static_cast<std::size_t>(m), 0));
  std::vector<LD> to_top(static_cast<std::size_t>(m), 0), to_bottom(static_cast<std::size_t>(m), 0);
  for (int r = 1; r < rows - 1; ++r)
    for (int c = 0; c < cols; ++c) {
      const auto i = static_cast<std::size_t>((r - 1) * cols + c);
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if (dr == 0 && dc == 0) continue;
          int rr = r + dr, cc = c + dc;
          if (cc < 0 || cc >= cols) continue;
          LD wt = std::exp(-beta * std::abs(g(r, c) - g(rr, cc)) - (dc != 0 ? gamma : 0.0L));
          if (rr == 0) to_top[i] += wt;
          else if (rr == rows - 1) to_bottom[i] += wt;
          else w[i][static_cast<std::size_t>((rr - 1) * cols + cc)] = wt;
        }
    }
  const auto n = static_cast<std::size_t>(m);
  std::vector<LD> pivot(n);
  for (std::size_t k = 0; k < n; ++k) {
    LD p = to_top[k] + to_bottom[k];
    for (std::size_t j = k + 1; j < n; ++j) p += w[k][j];
    pivot[k] = p;
    for (std::size_t i = k + 1; i < n; ++i) {
      if (w[i][k] == 0) continue;
      LD f = w[i][k] / p;
      to_top[i] += f * to_top[k];
      to_bottom[i] += f * to_bottom[k];
      for (std::size_t j = k + 1; j < n; ++j)
        if (j != i) w[i][j] += f * w[k][j];
    }
  }
  std::vector<LD> x(n);
  for (std::size_t k = n; k-- > 0;) {
    LD s = to_top[k];
    for (std::size_t j = k + 1; j < n; ++j) s += w[k][j] * x[j];
    x[k] = s / pivot[k];
  }
  std::vector<double> out(static_cast<std::size_t>(rows) * cols, 0.0);
  for (int c = 0; c < cols; ++c) out[static_cast<std::size_t>(c)] = 1.0;
  for (std::size_t i = 0; i < n; ++i) out[i + static_cast<std::size_t>(cols)] = static_cast<double>(x[i]);
  return out;
}

// Two-pass textbook Pearson correlation in long double.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

}  // namespace sononav::oracle

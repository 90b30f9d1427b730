#pragma once

// Random-walk confidence maps, ROI statistics and view-specific ROI selection.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>
#include <nlohmann/json.hpp>

#include "sononav/common.hpp"

namespace sononav {

struct ConfidenceParams {
  double alpha = 2.0;   // depth attenuation of the normalized intensity
  double beta = 90.0;   // gradient sensitivity of edge weights
  double gamma = 0.06;  // penalty on edges with a horizontal component
  double tolerance = 1e-6;
  int max_iterations = 20000;

  void validate() const {
    if (alpha < 0 || beta < 0 || gamma < 0) throw InvalidArgument("confidence alpha, beta, gamma must be >= 0");
    if (!(tolerance > 0)) throw InvalidArgument("confidence tolerance must be positive");
    if (max_iterations <= 0) throw InvalidArgument("confidence max_iterations must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ConfidenceParams& p) {
  j = nlohmann::json{{"alpha", p.alpha}, {"beta", p.beta}, {"gamma", p.gamma}, {"tolerance", p.tolerance}, {"max_iterations", p.max_iterations}};
}

inline void from_json(const nlohmann::json& j, ConfidenceParams& p) {
  for (const auto& [key, value] : j.items()) {
    if (key == "alpha") p.alpha = value.get<double>();
    else if (key == "beta") p.beta = value.get<double>();
    else if (key == "gamma") p.gamma = value.get<double>();
    else if (key == "tolerance") p.tolerance = value.get<double>();
    else if (key == "max_iterations") p.max_iterations = value.get<int>();
    else throw InvalidArgument("unknown confidence key: " + key);
  }
}

struct ConfidenceMap {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * cols + c]; }
  double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
};

class ConvergenceError : public Error {
 public:
  ConvergenceError(double residual, int iterations)
      : Error("confidence solve did not converge: residual " + std::to_string(residual) + " after " +
              std::to_string(iterations) + " iterations"),
        residual_(residual),
        iterations_(iterations) {}
  double residual() const { return residual_; }
  int iterations() const { return iterations_; }

 private:
  double residual_;
  int iterations_;
};

struct SolveStats {
  int iterations = 0;
  double residual = 0;  // max_i |r_i| / A_ii at exit
};

// Neighbour offsets of the 8-connected lattice, (drow, dcol).
inline constexpr std::array<std::array<int, 2>, 8> kNeighbours{{{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 1}, {1, -1}, {1, 0}, {1, 1}}};

// Edge weights of the image graph: weights[node*8 + k] links node to neighbour k (0 when absent).
inline std::vector<double> confidence_edge_weights(const Image& image, const ConfidenceParams& p) {
  const int rows = image.rows, cols = image.cols;
  std::vector<double> g(image.pixels.size());
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      g[static_cast<std::size_t>(r) * cols + c] = image.at(r, c) / 255.0 * std::exp(-p.alpha * r / rows);
  std::vector<double> w(g.size() * 8, 0.0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      std::size_t i = static_cast<std::size_t>(r) * cols + c;
      for (std::size_t k = 0; k < 8; ++k) {
        int rr = r + kNeighbours[k][0], cc = c + kNeighbours[k][1];
        if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) continue;
        double penalty = kNeighbours[k][1] != 0 ? p.gamma : 0.0;
        w[i * 8 + k] = std::exp(-p.beta * std::abs(g[i] - g[static_cast<std::size_t>(rr) * cols + cc]) - penalty);
      }
    }
  }
  return w;
}

enum class ConfidenceSolver { direct, pcg };

namespace detail {

// Reduced Dirichlet system over the interior rows (1 .. rows-2); unknown u = (r-1)*cols + c.
// Products with A are formed edge by edge, w_uv (x_u - x_v), and never through the
// assembled diagonal: a pixel cluster tied to the rest of the image by weights below
// double precision relative to its internal weights would otherwise lose those ties.
struct ConfidenceSystem {
  int rows = 0, cols = 0;
  std::vector<double> coupling;  // unknowns * 8; weight to interior neighbour k, 0 when fixed or absent
  std::vector<double> fixed;     // weight to the two Dirichlet rows
  std::vector<double> diag, rhs;

  std::size_t unknowns() const { return static_cast<std::size_t>(rows - 2) * cols; }

  std::size_t neighbour(std::size_t u, std::size_t k) const {
    return u + static_cast<std::size_t>(kNeighbours[k][0] * cols + kNeighbours[k][1]);
  }

  // y = A x
  void apply(const std::vector<double>& x, std::vector<double>& y) const {
    const std::size_t n = unknowns();
    for (std::size_t u = 0; u < n; ++u) {
      const double* wu = &coupling[u * 8];
      double acc = fixed[u] * x[u];
      for (std::size_t k = 0; k < 8; ++k)
        if (wu[k] != 0) acc += wu[k] * (x[u] - x[neighbour(u, k)]);
      y[u] = acc;
    }
  }

  double scaled_residual(const std::vector<double>& x) const {
    std::vector<double> ax(x.size());
    apply(x, ax);
    double m = 0;
    for (std::size_t u = 0; u < x.size(); ++u) m = std::max(m, std::abs(rhs[u] - ax[u]) / diag[u]);
    return m;
  }
};

inline ConfidenceSystem build_confidence_system(const Image& image, const ConfidenceParams& params) {
  ConfidenceSystem sys;
  sys.rows = image.rows;
  sys.cols = image.cols;
  const std::vector<double> weights = confidence_edge_weights(image, params);
  const std::size_t n = sys.unknowns();
  sys.coupling.assign(n * 8, 0.0);
  sys.fixed.assign(n, 0.0);
  sys.diag.assign(n, 0.0);
  sys.rhs.assign(n, 0.0);
  for (std::size_t u = 0; u < n; ++u) {
    int r = static_cast<int>(u / sys.cols) + 1, c = static_cast<int>(u % sys.cols);
    const double* wi = &weights[(static_cast<std::size_t>(r) * sys.cols + c) * 8];
    for (std::size_t k = 0; k < 8; ++k) {
      int rr = r + kNeighbours[k][0];
      sys.diag[u] += wi[k];
      if (rr == 0) sys.rhs[u] += wi[k];
      if (rr == 0 || rr == sys.rows - 1) sys.fixed[u] += wi[k];
      else sys.coupling[u * 8 + k] = wi[k];
    }
  }
  return sys;
}

// Modified incomplete Cholesky with zero fill, computed without subtraction: each pivot
// is the node's leak to the Dirichlet rows plus its remaining neighbour weights, and
// eliminating a node only adds positive terms. Dropped fill keeps row sums, so the
// factor stays exact on near-constant modes of weakly attached clusters.
class MicPreconditioner {
 public:
  explicit MicPreconditioner(const ConfidenceSystem& sys) : cols_(sys.cols), interior_rows_(sys.rows - 2) {
    const std::size_t n = sys.unknowns();
    pivot_.resize(n);
    upper_.resize(n);
    std::vector<double> leak(sys.fixed);
    for (std::size_t u = 0; u < n; ++u)
      for (int a = 0; a < 4; ++a) upper_[u][a] = sys.coupling[u * 8 + 4 + static_cast<std::size_t>(a)];
    for (std::size_t k = 0; k < n; ++k) {
      double p = leak[k];
      for (double w : upper_[k]) p += w;
      pivot_[k] = p;
      for (int a = 0; a < 4; ++a) {
        long i = later(k, a);
        if (i < 0 || upper_[k][a] == 0) continue;
        const double f = upper_[k][a] / p;
        leak[static_cast<std::size_t>(i)] += f * leak[k];
        for (int b = 0; b < 4; ++b) {
          long j = later(k, b);
          if (b == a || j <= i || upper_[k][b] == 0) continue;
          int slot = slot_of(static_cast<std::size_t>(i), j);
          if (slot >= 0) upper_[static_cast<std::size_t>(i)][slot] += f * upper_[k][b];
        }
      }
    }
  }

  // z = M^-1 r
  void solve(std::vector<double> r, std::vector<double>& z) const {
    const std::size_t n = pivot_.size();
    for (std::size_t k = 0; k < n; ++k)
      for (int a = 0; a < 4; ++a)
        if (long i = later(k, a); i >= 0) r[static_cast<std::size_t>(i)] += upper_[k][a] / pivot_[k] * r[k];
    for (std::size_t k = n; k-- > 0;) {
      double s = r[k];
      for (int a = 0; a < 4; ++a)
        if (long j = later(k, a); j >= 0) s += upper_[k][a] * z[static_cast<std::size_t>(j)];
      z[k] = s / pivot_[k];
    }
  }

 private:
  // Neighbours after u in row-major order: right, down-left, down, down-right
  // (neighbour indices 4..7 of kNeighbours). -1 when outside the interior.
  long later(std::size_t u, int a) const {
    int r = static_cast<int>(u / cols_) + kNeighbours[static_cast<std::size_t>(4 + a)][0];
    int c = static_cast<int>(u % cols_) + kNeighbours[static_cast<std::size_t>(4 + a)][1];
    if (r >= interior_rows_ || c < 0 || c >= cols_) return -1;
    return static_cast<long>(r) * cols_ + c;
  }
  int slot_of(std::size_t u, long v) const {
    for (int a = 0; a < 4; ++a)
      if (later(u, a) == v) return a;
    return -1;
  }

  int cols_, interior_rows_;
  std::vector<double> pivot_;
  std::vector<std::array<double, 4>> upper_;
};

inline std::vector<double> solve_pcg(const ConfidenceSystem& sys, std::vector<double> x, const ConfidenceParams& params,
                                     SolveStats& stats) {
  const std::size_t n = sys.unknowns();
  const MicPreconditioner precond(sys);
  std::vector<double> r(n), z(n), p(n), q(n);
  auto refresh = [&] {
    sys.apply(x, q);
    for (std::size_t i = 0; i < n; ++i) r[i] = sys.rhs[i] - q[i];
  };
  auto scaled = [&] {
    double m = 0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::abs(r[i]) / sys.diag[i]);
    return m;
  };
  refresh();
  double res = scaled();
  int it = 0;
  precond.solve(r, z);
  p = z;
  double rz = 0;
  for (std::size_t i = 0; i < n; ++i) rz += r[i] * z[i];
  while (res > params.tolerance && it < params.max_iterations) {
    sys.apply(p, q);
    double pq = 0;
    for (std::size_t i = 0; i < n; ++i) pq += p[i] * q[i];
    if (!(pq > 0)) break;
    double a = rz / pq;
    for (std::size_t i = 0; i < n; ++i) {
      x[i] += a * p[i];
      r[i] -= a * q[i];
    }
    ++it;
    // The recursive residual drifts from b - Ax; refresh it periodically.
    if (it % 50 == 0) refresh();
    res = scaled();
    precond.solve(r, z);
    double rz_next = 0;
    for (std::size_t i = 0; i < n; ++i) rz_next += r[i] * z[i];
    double beta = rz_next / rz;
    rz = rz_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = z[i] + beta * p[i];
  }
  refresh();
  stats = {it, scaled()};
  return x;
}

// Sparse LDL^T; the symbolic analysis depends only on the image shape and is cached per thread.
inline std::vector<double> solve_direct(const ConfidenceSystem& sys, SolveStats& stats) {
  using SpMat = Eigen::SparseMatrix<double>;
  struct Cache {
    int rows = -1, cols = -1;
    Eigen::SimplicialLDLT<SpMat> solver;
  };
  thread_local Cache cache;
  const std::size_t n = sys.unknowns();
  std::vector<Eigen::Triplet<double>> trips;
  trips.reserve(n * 9);
  for (std::size_t u = 0; u < n; ++u) {
    trips.emplace_back(static_cast<int>(u), static_cast<int>(u), sys.diag[u]);
    for (std::size_t k = 0; k < 8; ++k)
      if (double w = sys.coupling[u * 8 + k]; w != 0)
        trips.emplace_back(static_cast<int>(u), static_cast<int>(sys.neighbour(u, k)), -w);
  }
  SpMat a(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  a.setFromTriplets(trips.begin(), trips.end());
  if (cache.rows != sys.rows || cache.cols != sys.cols) {
    cache.solver.analyzePattern(a);
    cache.rows = sys.rows;
    cache.cols = sys.cols;
  }
  cache.solver.factorize(a);
  if (cache.solver.info() != Eigen::Success) throw Error("confidence factorization failed");
  Eigen::Map<const Eigen::VectorXd> b(sys.rhs.data(), static_cast<Eigen::Index>(n));
  Eigen::VectorXd sol = cache.solver.solve(b);
  std::vector<double> x(sol.data(), sol.data() + n);
  stats = {0, sys.scaled_residual(x)};
  return x;
}

}  // namespace detail

// Harmonic solution of the weighted graph Laplacian with row 0 held at 1 and the last row at 0.
// The iterative path is CG preconditioned by a modified incomplete Cholesky factor and
// may be seeded from `initial`.
inline ConfidenceMap confidence_map(const Image& image, const ConfidenceParams& params = {},
                                    ConfidenceSolver solver = ConfidenceSolver::direct,
                                    const ConfidenceMap* initial = nullptr, SolveStats* stats = nullptr) {
  params.validate();
  if (image.rows < 3 || image.cols < 1) throw InvalidArgument("confidence map needs at least 3 rows");
  const detail::ConfidenceSystem sys = detail::build_confidence_system(image, params);
  const int rows = image.rows, cols = image.cols;
  SolveStats local;
  std::vector<double> x;
  if (solver == ConfidenceSolver::direct) {
    x = detail::solve_direct(sys, local);
  } else {
    x.assign(sys.unknowns(), 0.0);
    for (std::size_t u = 0; u < x.size(); ++u) {
      int r = static_cast<int>(u / cols) + 1;
      x[u] = (initial && initial->rows == rows && initial->cols == cols)
                 ? std::clamp(initial->values[u + static_cast<std::size_t>(cols)], 0.0, 1.0)
                 : 1.0 - static_cast<double>(r) / (rows - 1);
    }
    x = detail::solve_pcg(sys, std::move(x), params, local);
  }
  if (stats) *stats = local;
  if (!(local.residual <= params.tolerance)) throw ConvergenceError(local.residual, local.iterations);
  ConfidenceMap map{rows, cols, std::vector<double>(static_cast<std::size_t>(rows) * cols, 0.0)};
  for (int c = 0; c < cols; ++c) map.at(0, c) = 1.0;
  for (std::size_t u = 0; u < x.size(); ++u) map.values[u + static_cast<std::size_t>(cols)] = std::clamp(x[u], 0.0, 1.0);
  return map;
}

// Rescaled to 8 bits for PGM output.
inline Image confidence_to_image(const ConfidenceMap& map) {
  Image img(map.rows, map.cols);
  for (std::size_t i = 0; i < map.values.size(); ++i)
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map.values[i], 0.0, 1.0) * 255.0));
  return img;
}

// --- regions of interest -----------------------------------------------------

struct RoiRect {
  int index = 0;
  int top = 10;
  int left = 35;
  int height = 80;
  int width = 80;

  bool operator==(const RoiRect&) const = default;
};

inline constexpr int kRoiCount = 8;

// Width-major, offset-minor: 0 = (10, 80x80), 1 = (20, 80x80), 2 = (10, 100 wide), ...
inline std::array<RoiRect, kRoiCount> roi_candidates() {
  std::array<RoiRect, kRoiCount> out{};
  constexpr int widths[4] = {80, 100, 120, 140};
  constexpr int offsets[2] = {10, 20};
  for (int w = 0; w < 4; ++w)
    for (int o = 0; o < 2; ++o) {
      int idx = 2 * w + o;
      out[static_cast<std::size_t>(idx)] = RoiRect{idx, offsets[o], (kImageCols - widths[w]) / 2, 80, widths[w]};
    }
  return out;
}

inline RoiRect roi_by_index(int index) {
  if (index < 0 || index >= kRoiCount) throw InvalidArgument("ROI index must be in [0,8)");
  return roi_candidates()[static_cast<std::size_t>(index)];
}

inline double roi_mean_confidence(const ConfidenceMap& map, const RoiRect& roi) {
  if (roi.top < 0 || roi.left < 0 || roi.top + roi.height > map.rows || roi.left + roi.width > map.cols)
    throw InvalidArgument("ROI outside the confidence map");
  double sum = 0;
  for (int r = roi.top; r < roi.top + roi.height; ++r)
    for (int c = roi.left; c < roi.left + roi.width; ++c) sum += map.at(r, c);
  return sum / (static_cast<double>(roi.height) * roi.width);
}

inline std::array<double, kRoiCount> roi_means(const ConfidenceMap& map) {
  std::array<double, kRoiCount> out{};
  for (const auto& roi : roi_candidates()) out[static_cast<std::size_t>(roi.index)] = roi_mean_confidence(map, roi);
  return out;
}

// --- correlation and ROI selection ------------------------------------------

class UndefinedCorrelation : public Error {
 public:
  using Error::Error;
};

// Pearson correlation with population moments.
inline double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw InvalidArgument("pearson needs two equal-length series of length >= 2");
  auto [xmin, xmax] = std::minmax_element(xs.begin(), xs.end());
  auto [ymin, ymax] = std::minmax_element(ys.begin(), ys.end());
  if (*xmin == *xmax || *ymin == *ymax) throw UndefinedCorrelation("correlation undefined for a constant series");
  const double n = static_cast<double>(xs.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double dx = xs[i] - mx, dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0 || syy == 0) throw UndefinedCorrelation("correlation undefined for a constant series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// One training episode, aggregated.
struct NavLogRow {
  int episode = 0;
  double r_nav = 0;      // mean navigation reward per step
  double d_mm = 0;       // final position error
  double theta_deg = 0;  // final orientation error
  std::array<double, kRoiCount> dc{};  // mean per-step confidence change, per ROI
};

struct CorrelationWeights {
  double reward = 0.5;
  double position = 0.25;
  double orientation = 0.25;
};

struct RoiSelection {
  int roi_index = 0;
  int lambda = 1;
  std::array<double, kRoiCount> rho{};
};

inline void to_json(nlohmann::json& j, const RoiSelection& s) {
  j = nlohmann::json{{"roi_index", s.roi_index}, {"lambda", s.lambda}, {"rho", s.rho}};
}

inline RoiSelection select_roi(const std::vector<NavLogRow>& log, const CorrelationWeights& wts = {}) {
  if (log.size() < 10) throw InvalidArgument("ROI selection needs at least 10 episodes");
  std::vector<double> rnav, neg_d, neg_theta;
  for (const auto& row : log) {
    rnav.push_back(row.r_nav);
    neg_d.push_back(-row.d_mm);
    neg_theta.push_back(-row.theta_deg);
  }
  RoiSelection out;
  double best = -1;
  for (int k = 0; k < kRoiCount; ++k) {
    std::vector<double> dc;
    for (const auto& row : log) dc.push_back(row.dc[static_cast<std::size_t>(k)]);
    double rho = wts.reward * pearson(rnav, dc) + wts.position * pearson(neg_d, dc) + wts.orientation * pearson(neg_theta, dc);
    out.rho[static_cast<std::size_t>(k)] = rho;
    if (std::abs(rho) > best) {
      best = std::abs(rho);
      out.roi_index = k;
      out.lambda = rho < 0 ? -1 : 1;
    }
  }
  return out;
}

// NavLog CSV: episode,R_nav,d_mm,theta_deg,dc_roi0..dc_roi7
inline void write_navlog(std::ostream& os, const std::vector<NavLogRow>& rows) {
  os << "episode,R_nav,d_mm,theta_deg";
  for (int k = 0; k < kRoiCount; ++k) os << ",dc_roi" << k;
  os << "\n";
  os.precision(17);
  for (const auto& r : rows) {
    os << r.episode << "," << r.r_nav << "," << r.d_mm << "," << r.theta_deg;
    for (double v : r.dc) os << "," << v;
    os << "\n";
  }
}

inline std::vector<NavLogRow> read_navlog(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw InvalidArgument("empty NavLog");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  std::vector<std::string> expected{"episode", "R_nav", "d_mm", "theta_deg"};
  for (int k = 0; k < kRoiCount; ++k) expected.push_back("dc_roi" + std::to_string(k));
  if (!header.empty() && !header.back().empty() && header.back().back() == '\r') header.back().pop_back();
  if (header != expected) throw InvalidArgument("NavLog header mismatch");
  std::vector<NavLogRow> rows;
  while (std::getline(is, line)) {
    if (line.empty() || line == "\r") continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> v;
    while (std::getline(ss, cell, ',')) {
      try {
        v.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw InvalidArgument("NavLog cell is not numeric: " + cell);
      }
    }
    if (v.size() != expected.size()) throw InvalidArgument("NavLog row has wrong column count");
    NavLogRow row;
    row.episode = static_cast<int>(v[0]);
    row.r_nav = v[1];
    row.d_mm = v[2];
    row.theta_deg = v[3];
    for (int k = 0; k < kRoiCount; ++k) row.dc[static_cast<std::size_t>(k)] = v[4 + static_cast<std::size_t>(k)];
    rows.push_back(row);
  }
  return rows;
}

}  // namespace sononav

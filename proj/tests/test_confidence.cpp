#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "oracles.hpp"
#include "sononav/confidence.hpp"
#include "sononav/phantom.hpp"
#include "support.hpp"

using namespace sononav;
using sononav::testing::planted_log;

namespace {

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(ConfidenceMap, MatchesDenseOracleOnSmallImages) {
  std::mt19937_64 rng(1);
  ConfidenceParams p;
  // Random images give badly conditioned systems; the default stopping rule is too loose for 1e-5.
  p.tolerance = 1e-10;
  for (int size : {8, 16}) {
    for (int i = 0; i < 10; ++i) {
      Image img = sononav::testing::random_image(size, size, rng);
      auto oracle = oracle::dense_confidence(img, p.alpha, p.beta, p.gamma);
      for (auto solver : {ConfidenceSolver::direct, ConfidenceSolver::pcg}) {
        ConfidenceMap m = confidence_map(img, p, solver);
        EXPECT_LE(max_abs_diff(m.values, oracle), 1e-5) << size << " " << i;
      }
    }
  }
}

TEST(ConfidenceMap, IterativeSolveResolvesWeaklyAttachedClusters) {
  // A bright pixel pair on black ties to its surroundings with weights near exp(-88),
  // far below double precision relative to the bond inside the pair.
  Image img(12, 12, 0);
  img.at(5, 5) = img.at(5, 6) = 255;
  img.at(8, 2) = img.at(9, 2) = img.at(9, 3) = 250;
  ConfidenceParams p;
  p.tolerance = 1e-10;
  auto oracle = oracle::dense_confidence(img, p.alpha, p.beta, p.gamma);
  ConfidenceMap m = confidence_map(img, p, ConfidenceSolver::pcg);
  EXPECT_LE(max_abs_diff(m.values, oracle), 1e-6);
}

TEST(ConfidenceMap, IterativeSolveMatchesOracleAcrossSeeds) {
  ConfidenceParams p;
  p.tolerance = 1e-10;
  for (std::uint64_t seed = 20; seed < 25; ++seed) {
    std::mt19937_64 rng(seed);
    for (int i = 0; i < 20; ++i) {
      Image img = sononav::testing::random_image(16, 16, rng);
      ConfidenceMap m = confidence_map(img, p, ConfidenceSolver::pcg);
      EXPECT_LE(max_abs_diff(m.values, oracle::dense_confidence(img, p.alpha, p.beta, p.gamma)), 1e-5) << seed << " " << i;
    }
  }
}

TEST(ConfidenceMap, BoundaryRowsExactAndRange) {
  std::mt19937_64 rng(2);
  Image img = sononav::testing::random_image(150, 150, rng);
  ConfidenceMap m = confidence_map(img);
  for (int c = 0; c < 150; ++c) {
    EXPECT_EQ(m.at(0, c), 1.0);
    EXPECT_EQ(m.at(149, c), 0.0);
  }
  for (double v : m.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(ConfidenceMap, ConstantImageDecreasesMonotonically) {
  Image img(8, 8, 120);
  ConfidenceParams p;
  ConfidenceMap m = confidence_map(img, p);
  auto oracle = oracle::dense_confidence(img, p.alpha, p.beta, p.gamma);
  EXPECT_LE(max_abs_diff(m.values, oracle), 1e-9);
  for (int r = 0; r < 8; ++r)
    for (int c = 1; c < 8; ++c) EXPECT_NEAR(m.at(r, c), m.at(r, 0), 1e-9);
  for (int r = 1; r < 8; ++r) EXPECT_LT(m.at(r, 3), m.at(r - 1, 3));
}

TEST(ConfidenceMap, BrightBarCastsShadow) {
  Image img(16, 16, 60);
  for (int c = 0; c < 8; ++c) img.at(5, c) = 255;
  ConfidenceParams p;
  ConfidenceMap m = confidence_map(img, p);
  auto oracle = oracle::dense_confidence(img, p.alpha, p.beta, p.gamma);
  // The bar couples to its surroundings with weights near exp(-70), so its own common
  // value is not resolvable in double precision. Everything else is.
  for (int r = 0; r < 16; ++r)
    for (int c = 0; c < 16; ++c)
      if (r != 5 || c >= 8) EXPECT_NEAR(m.at(r, c), oracle[static_cast<std::size_t>(r * 16 + c)], 1e-6) << r << "," << c;
  double under = 0, free = 0;
  for (int r = 6; r < 15; ++r)
    for (int c = 0; c < 8; ++c) {
      under += m.at(r, c);
      free += m.at(r, c + 8);
    }
  EXPECT_LT(under, free);
}

TEST(ConfidenceMap, HarmonicOnPhantomSlice) {
  const Phantom& ph = sononav::testing::default_phantom();
  ImageSpec spec;
  spec.seed = 3;
  Image img = slice_image(ph.volume, ph.goals.at(ViewLabel::TSP), spec);
  ConfidenceMap m = confidence_map(img);
  for (int r = 1; r < 149; ++r)
    for (int c = 0; c < 150; ++c) {
      double lo = 2, hi = -1;
      for (int dr = -1; dr <= 1; ++dr)
        for (int dc = -1; dc <= 1; ++dc) {
          if ((dr == 0 && dc == 0) || c + dc < 0 || c + dc >= 150) continue;
          lo = std::min(lo, m.at(r + dr, c + dc));
          hi = std::max(hi, m.at(r + dr, c + dc));
        }
      ASSERT_GE(m.at(r, c), lo - 1e-7);
      ASSERT_LE(m.at(r, c), hi + 1e-7);
    }
}

TEST(ConfidenceMap, SolversAgreeOnFullSizeSlice) {
  const Phantom& ph = sononav::testing::default_phantom();
  Image img = slice_image(ph.volume, ph.goals.at(ViewLabel::PSL), ImageSpec{});
  ConfidenceParams p;
  p.tolerance = 1e-9;
  SolveStats stats;
  ConfidenceMap a = confidence_map(img, p, ConfidenceSolver::direct);
  ConfidenceMap b = confidence_map(img, p, ConfidenceSolver::pcg, nullptr, &stats);
  EXPECT_LE(stats.residual, 1e-9);
  EXPECT_GT(stats.iterations, 0);
  EXPECT_LE(max_abs_diff(a.values, b.values), 1e-5);
  // Warm start from the converged map needs no further iterations.
  ConfidenceMap c = confidence_map(img, ConfidenceParams{}, ConfidenceSolver::pcg, &a, &stats);
  EXPECT_EQ(stats.iterations, 0);
  EXPECT_LE(max_abs_diff(a.values, c.values), 1e-12);
}

TEST(ConfidenceMap, ShadowLowersConfidenceUnderBone) {
  const Phantom& ph = sononav::testing::default_phantom();
  ImageSpec spec;
  spec.speckle_sigma = 0;
  Image img = slice_image(ph.volume, ph.goals.at(ViewLabel::TSP), spec);
  ConfidenceMap m = confidence_map(img);
  // Midline column under the spinous process versus a column between spinous process and lamina.
  EXPECT_LT(m.at(120, 75), m.at(120, 85));
}

TEST(ConfidenceMap, IntensityScalingChangesMapContinuously) {
  std::mt19937_64 rng(12);
  Image img = sononav::testing::random_image(16, 16, rng);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(v / 2);
  Image scaled = img;
  for (auto& v : scaled.pixels) v = static_cast<std::uint8_t>(std::min(255, v + v / 100));
  ConfidenceMap a = confidence_map(img), b = confidence_map(scaled);
  EXPECT_LT(max_abs_diff(a.values, b.values), 0.05);
}

TEST(ConfidenceMap, ErrorsAndValidation) {
  ConfidenceParams p;
  p.max_iterations = 1;
  p.tolerance = 1e-12;
  std::mt19937_64 rng(4);
  Image img = sononav::testing::random_image(40, 40, rng);
  try {
    confidence_map(img, p, ConfidenceSolver::pcg);
    FAIL() << "expected ConvergenceError";
  } catch (const ConvergenceError& e) {
    EXPECT_GT(e.residual(), 1e-12);
    EXPECT_EQ(e.iterations(), 1);
  }
  ConfidenceParams bad;
  bad.beta = -1;
  EXPECT_THROW(confidence_map(img, bad), InvalidArgument);
  EXPECT_THROW(confidence_map(Image(2, 5)), InvalidArgument);
  nlohmann::json j = ConfidenceParams{};
  EXPECT_EQ(j.get<ConfidenceParams>().beta, 90.0);
  j["delta"] = 1;
  EXPECT_THROW(j.get<ConfidenceParams>(), InvalidArgument);
}

TEST(Roi, CandidateGeometry) {
  auto c = roi_candidates();
  EXPECT_EQ(c[0], (RoiRect{0, 10, 35, 80, 80}));
  EXPECT_EQ(c[1], (RoiRect{1, 20, 35, 80, 80}));
  EXPECT_EQ(c[7].width, 140);
  EXPECT_EQ(c[7].left, 5);
  for (const auto& r : c) {
    EXPECT_GE(r.left, 0);
    EXPECT_LE(r.left + r.width, 150);
    EXPECT_LE(r.top + r.height, 150);
    EXPECT_EQ(r.height, 80);
    EXPECT_EQ(2 * r.left + r.width, 150);
  }
  EXPECT_THROW(roi_by_index(8), InvalidArgument);
}

TEST(Roi, MeanConfidence) {
  ConfidenceMap ones{150, 150, std::vector<double>(22500, 1.0)};
  ConfidenceMap checker{150, 150, std::vector<double>(22500, 0.0)};
  for (int r = 0; r < 150; ++r)
    for (int c = 0; c < 150; ++c) checker.at(r, c) = (r + c) % 2;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  ConfidenceMap rnd{150, 150, std::vector<double>(22500)};
  for (auto& v : rnd.values) v = u(rng);
  for (const auto& roi : roi_candidates()) {
    EXPECT_DOUBLE_EQ(roi_mean_confidence(ones, roi), 1.0);
    EXPECT_DOUBLE_EQ(roi_mean_confidence(checker, roi), 0.5);
    double s = 0;
    for (int r = roi.top; r < roi.top + roi.height; ++r)
      for (int c = roi.left; c < roi.left + roi.width; ++c) s += rnd.at(r, c);
    EXPECT_NEAR(roi_mean_confidence(rnd, roi), s / (roi.height * roi.width), 1e-12);
  }
  ConfidenceMap tiny{8, 8, std::vector<double>(64, 0.5)};
  EXPECT_THROW(roi_mean_confidence(tiny, roi_by_index(0)), InvalidArgument);
}

TEST(Pearson, Examples) {
  std::vector<double> x{1, 2, 3, 4, 5};
  std::vector<double> lin, neg;
  for (double v : x) {
    lin.push_back(2 * v + 1);
    neg.push_back(-v);
  }
  EXPECT_NEAR(pearson(x, lin), 1.0, 1e-15);
  EXPECT_NEAR(pearson(x, neg), -1.0, 1e-15);
  // Hand arithmetic: sxy = 8, sxx = syy = 10.
  EXPECT_NEAR(pearson(x, {2, 1, 4, 3, 5}), 0.8, 1e-12);
  EXPECT_THROW(pearson(x, {1, 1, 1, 1, 1}), UndefinedCorrelation);
  EXPECT_THROW(pearson({1}, {2}), InvalidArgument);
  EXPECT_THROW(pearson(x, {1, 2}), InvalidArgument);
}

TEST(Pearson, MatchesOracleAndIsSymmetric) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> n(0, 1);
  std::uniform_int_distribution<int> len(2, 60);
  for (int t = 0; t < 100; ++t) {
    int m = len(rng);
    std::vector<double> a(m), b(m);
    for (int i = 0; i < m; ++i) {
      a[i] = n(rng) * 3 + 1;
      b[i] = 0.5 * a[i] + n(rng);
    }
    double r = pearson(a, b);
    EXPECT_NEAR(r, oracle::pearson(a, b), 1e-12);
    EXPECT_NEAR(r, pearson(b, a), 1e-15);
    EXPECT_LE(std::abs(r), 1.0 + 1e-12);
  }
}

TEST(SelectRoi, WeightedCombinationMatchesOracle) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0, 1);
  for (int t = 0; t < 100; ++t) {
    std::vector<NavLogRow> log(25);
    for (auto& row : log) {
      row.r_nav = n(rng);
      row.d_mm = 10 + 3 * n(rng);
      row.theta_deg = 8 + 2 * n(rng);
      for (auto& v : row.dc) v = 0.01 * n(rng) + 0.003 * row.r_nav;
    }
    RoiSelection sel = select_roi(log);
    std::vector<double> r, nd, nt;
    for (const auto& row : log) {
      r.push_back(row.r_nav);
      nd.push_back(-row.d_mm);
      nt.push_back(-row.theta_deg);
    }
    double best = -1;
    int arg = -1;
    for (int k = 0; k < kRoiCount; ++k) {
      std::vector<double> dc;
      for (const auto& row : log) dc.push_back(row.dc[static_cast<std::size_t>(k)]);
      double rho = 0.5 * oracle::pearson(r, dc) + 0.25 * oracle::pearson(nd, dc) + 0.25 * oracle::pearson(nt, dc);
      EXPECT_NEAR(sel.rho[static_cast<std::size_t>(k)], rho, 1e-12);
      if (std::abs(rho) > best) {
        best = std::abs(rho);
        arg = k;
      }
    }
    EXPECT_EQ(sel.roi_index, arg);
    EXPECT_EQ(sel.lambda, sel.rho[static_cast<std::size_t>(arg)] < 0 ? -1 : 1);
  }
}

TEST(SelectRoi, PlantedCorrelation) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    RoiSelection pos = select_roi(planted_log(rng, 40, 3, +1));
    EXPECT_EQ(pos.roi_index, 3);
    EXPECT_EQ(pos.lambda, 1);
    RoiSelection neg = select_roi(planted_log(rng, 40, 3, -1));
    EXPECT_EQ(neg.roi_index, 3);
    EXPECT_EQ(neg.lambda, -1);
  }
}

TEST(SelectRoi, InvariantUnderPositiveRescaling) {
  std::mt19937_64 rng(9);
  auto log = planted_log(rng, 30, 5, 1);
  for (auto& row : log)
    for (auto& v : row.dc) v += 0.02 * std::sin(v * 1000);
  RoiSelection a = select_roi(log);
  for (auto& row : log)
    for (auto& v : row.dc) v *= 37.5;
  RoiSelection b = select_roi(log);
  EXPECT_EQ(a.roi_index, b.roi_index);
  EXPECT_EQ(a.lambda, b.lambda);
  for (int k = 0; k < kRoiCount; ++k) EXPECT_NEAR(a.rho[static_cast<std::size_t>(k)], b.rho[static_cast<std::size_t>(k)], 1e-12);
}

TEST(SelectRoi, Errors) {
  std::mt19937_64 rng(10);
  EXPECT_THROW(select_roi(planted_log(rng, 9, 0, 1)), InvalidArgument);
  auto log = planted_log(rng, 12, 0, 1);
  for (auto& row : log) row.dc[2] = 0.1;
  EXPECT_THROW(select_roi(log), UndefinedCorrelation);
}

TEST(NavLog, CsvRoundTrip) {
  std::mt19937_64 rng(11);
  auto log = planted_log(rng, 12, 1, 1);
  std::stringstream ss;
  write_navlog(ss, log);
  std::string header;
  std::getline(std::stringstream(ss.str()), header);
  EXPECT_EQ(header, "episode,R_nav,d_mm,theta_deg,dc_roi0,dc_roi1,dc_roi2,dc_roi3,dc_roi4,dc_roi5,dc_roi6,dc_roi7");
  auto back = read_navlog(ss);
  ASSERT_EQ(back.size(), log.size());
  for (std::size_t i = 0; i < log.size(); ++i) {
    EXPECT_EQ(back[i].episode, log[i].episode);
    EXPECT_EQ(back[i].r_nav, log[i].r_nav);
    EXPECT_EQ(back[i].dc, log[i].dc);
  }
  std::stringstream bad("episode,R_nav\n1,2\n");
  EXPECT_THROW(read_navlog(bad), InvalidArgument);
}

#pragma once

#include <filesystem>
#include <memory>
#include <random>
#include <string>

#include "sononav/env.hpp"
#include "sononav/phantom.hpp"

namespace sononav::testing {

// Default phantom, generated once per test binary.
inline const Phantom& default_phantom() {
  static const Phantom p = generate_phantom(PhantomSpec{});
  return p;
}

inline std::shared_ptr<const VoxelVolume> shared_volume() {
  static const auto v = std::make_shared<const VoxelVolume>(default_phantom().volume);
  return v;
}

inline std::shared_ptr<const SkinSurface> shared_surface() {
  static const auto s = std::make_shared<const SkinSurface>(default_phantom().surface);
  return s;
}

inline NavigationEnv make_env(ViewLabel view = ViewLabel::PSL, EnvConfig cfg = {}) {
  return NavigationEnv(shared_volume(), shared_surface(), default_phantom().goals.at(view), std::move(cfg));
}

inline Image random_image(int rows, int cols, std::mt19937_64& rng) {
  Image img(rows, cols);
  std::uniform_int_distribution<int> u(0, 255);
  for (auto& p : img.pixels) p = static_cast<std::uint8_t>(u(rng));
  return img;
}

// Fresh, empty scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("sononav_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Navigation log whose ROI `roi` change tracks the reward with the given sign while
// position and orientation errors fall as the reward rises; other ROIs are noise.
inline std::vector<NavLogRow> planted_log(std::mt19937_64& rng, int rows, int roi, double sign) {
  std::normal_distribution<double> n(0, 1);
  std::vector<NavLogRow> log;
  for (int e = 0; e < rows; ++e) {
    NavLogRow row;
    row.episode = e;
    row.r_nav = n(rng);
    row.d_mm = 20 - 4 * row.r_nav;
    row.theta_deg = 15 - 2 * row.r_nav;
    for (int k = 0; k < kRoiCount; ++k) row.dc[static_cast<std::size_t>(k)] = 0.01 * n(rng);
    row.dc[static_cast<std::size_t>(roi)] = sign * 0.01 * row.r_nav;
    log.push_back(row);
  }
  return log;
}

}  // namespace sononav::testing

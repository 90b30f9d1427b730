#pragma once

// Virtual-patient volumes: procedural spine phantoms, skin-surface extraction,
// SVOL1 volume files and oblique B-mode slicing with per-beam shadowing.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sononav/common.hpp"
#include "sononav/geometry.hpp"

namespace sononav {

// Scalar intensity grid. Voxel (i,j,k) has its center at world (i,j,k)*spacing mm, z up.
struct VoxelVolume {
  std::array<std::uint32_t, 3> dims{0, 0, 0};
  std::array<float, 3> spacing{0.5f, 0.5f, 0.5f};
  std::vector<std::uint8_t> voxels;

  static constexpr std::uint32_t kMinDim = 16;

  VoxelVolume() = default;
  VoxelVolume(std::uint32_t nx, std::uint32_t ny, std::uint32_t nz, float spacing_mm = 0.5f)
      : dims{nx, ny, nz}, spacing{spacing_mm, spacing_mm, spacing_mm} {
    if (nx < kMinDim || ny < kMinDim || nz < kMinDim) throw InvalidArgument("volume dims must be >= 16");
    voxels.assign(static_cast<std::size_t>(nx) * ny * nz, 0);
  }

  std::size_t offset(std::uint32_t x, std::uint32_t y, std::uint32_t z) const {
    return x + static_cast<std::size_t>(dims[0]) * (y + static_cast<std::size_t>(dims[1]) * z);
  }
  std::uint8_t& at(std::uint32_t x, std::uint32_t y, std::uint32_t z) { return voxels[offset(x, y, z)]; }
  std::uint8_t at(std::uint32_t x, std::uint32_t y, std::uint32_t z) const { return voxels[offset(x, y, z)]; }

  double width_mm() const { return dims[0] * static_cast<double>(spacing[0]); }
  double length_mm() const { return dims[1] * static_cast<double>(spacing[1]); }

  bool operator==(const VoxelVolume&) const = default;
};

// Skin height map z = f(x, y), one sample per voxel column, millimeters.
struct SkinSurface {
  std::uint32_t nx = 0, ny = 0;
  double spacing_mm = 0.5;
  std::vector<double> height_mm;

  double at(std::uint32_t i, std::uint32_t j) const { return height_mm[i + static_cast<std::size_t>(nx) * j]; }

  // Bilinear in (x, y); positions outside the footprint clamp to the edge.
  double height(double x_mm, double y_mm) const {
    double u = std::clamp(x_mm / spacing_mm, 0.0, static_cast<double>(nx - 1));
    double v = std::clamp(y_mm / spacing_mm, 0.0, static_cast<double>(ny - 1));
    auto i0 = static_cast<std::uint32_t>(std::floor(u));
    auto j0 = static_cast<std::uint32_t>(std::floor(v));
    std::uint32_t i1 = std::min(i0 + 1, nx - 1), j1 = std::min(j0 + 1, ny - 1);
    double fu = u - i0, fv = v - j0;
    return (1 - fv) * ((1 - fu) * at(i0, j0) + fu * at(i1, j0)) + fv * ((1 - fu) * at(i0, j1) + fu * at(i1, j1));
  }
};

enum class ViewLabel { PSL = 0, PSAP = 1, TSP = 2, BG = 3 };

inline constexpr std::array<ViewLabel, 3> kStandardViews{ViewLabel::PSL, ViewLabel::PSAP, ViewLabel::TSP};

inline std::string to_string(ViewLabel v) {
  switch (v) {
    case ViewLabel::PSL: return "PSL";
    case ViewLabel::PSAP: return "PSAP";
    case ViewLabel::TSP: return "TSP";
    case ViewLabel::BG: return "BG";
  }
  return "?";
}

inline ViewLabel view_from_string(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (s == "PSL") return ViewLabel::PSL;
  if (s == "PSAP") return ViewLabel::PSAP;
  if (s == "TSP") return ViewLabel::TSP;
  if (s == "BG") return ViewLabel::BG;
  throw InvalidArgument("unknown view label: " + s);
}

struct GoalPoseSet {
  std::map<ViewLabel, Pose> poses;

  const Pose& at(ViewLabel v) const {
    auto it = poses.find(v);
    if (it == poses.end()) throw InvalidArgument("no goal pose for view " + to_string(v));
    return it->second;
  }
};

inline void to_json(nlohmann::json& j, const GoalPoseSet& g) {
  j = nlohmann::json::object();
  for (const auto& [view, pose] : g.poses) j[to_string(view)] = pose;
}

inline void from_json(const nlohmann::json& j, GoalPoseSet& g) {
  g.poses.clear();
  for (ViewLabel v : kStandardViews) g.poses[v] = j.at(to_string(v)).get<Pose>();
  if (j.size() != 3) throw InvalidArgument("goal set must have exactly PSL, PSAP and TSP");
}

struct PhantomSpec {
  std::array<std::uint32_t, 3> dims{200, 240, 176};
  double spacing_mm = 0.5;
  double vertebra_pitch_mm = 30;
  double spinous_half_width_mm = 3;
  double lamina_offset_mm = 12;
  double articular_offset_mm = 21;
  double skin_height_mm = 80;
  double skin_curvature_per_mm = 0.004;  // lateral parabolic fall-off of the back
  double spinous_depth_mm = 13;
  double lamina_depth_mm = 28;
  double articular_depth_mm = 22;
  double lordosis_mm = 5;          // amplitude of the craniocaudal bone-depth curve
  double axial_rotation = 0.15;    // extra depth per mm of lateral offset
  int bone_intensity = 230;
  int tissue_intensity = 110;
  double tissue_decay_mm = 70;
  double speckle_sigma = 0.1;
  double shadow_threshold = 200;   // must stay below bone_intensity
  std::uint64_t seed = 1;

  double center_x_mm() const { return 0.5 * (dims[0] - 1) * spacing_mm; }
  double center_y_mm() const { return 0.5 * (dims[1] - 1) * spacing_mm; }

  double skin_height(double x_mm, double /*y_mm*/) const {
    double u = x_mm - center_x_mm();
    return skin_height_mm - skin_curvature_per_mm * u * u;
  }

  // Depth of bone landmarks varies with craniocaudal position and laterality.
  double bone_shift(double x_mm, double y_mm) const {
    double half_len = 0.5 * dims[1] * spacing_mm;
    double t = (y_mm - center_y_mm()) / half_len;
    return lordosis_mm * t * t + 0.3 * lordosis_mm * t + axial_rotation * (x_mm - center_x_mm());
  }

  // Center y of vertebral level k; level 0 sits nearest the volume center.
  double level_y(int k) const { return center_y_mm() + k * vertebra_pitch_mm; }

  void validate() const {
    for (auto d : dims)
      if (d < VoxelVolume::kMinDim) throw InvalidArgument("phantom dims must be >= 16");
    double half_width = 0.5 * dims[0] * spacing_mm;
    if (!(spacing_mm > 0)) throw InvalidArgument("spacing must be positive");
    if (lamina_offset_mm >= half_width || articular_offset_mm >= half_width)
      throw InvalidArgument("lateral offsets must be below half the volume width");
    if (bone_intensity <= shadow_threshold || bone_intensity > 255 || bone_intensity < 200)
      throw InvalidArgument("bone intensity must be in [200,255] and above the shadow threshold");
    if (tissue_intensity <= 0 || tissue_intensity >= shadow_threshold)
      throw InvalidArgument("tissue intensity must be below the shadow threshold");
    if (!(vertebra_pitch_mm > 0)) throw InvalidArgument("vertebra pitch must be positive");
    if (skin_height_mm >= dims[2] * spacing_mm || skin_height_mm <= 0)
      throw InvalidArgument("skin height outside the volume");
  }

  // A geometric variant for held-out anatomy; speckle seed changes as well.
  PhantomSpec perturbed(std::uint64_t variant_seed) const {
    std::mt19937_64 rng(mix_seed(variant_seed, 0x5eed));
    std::uniform_real_distribution<double> jitter(-1.0, 1.0);
    PhantomSpec s = *this;
    s.vertebra_pitch_mm *= 1.0 + 0.08 * jitter(rng);
    s.lamina_offset_mm *= 1.0 + 0.10 * jitter(rng);
    s.articular_offset_mm *= 1.0 + 0.08 * jitter(rng);
    s.spinous_depth_mm *= 1.0 + 0.10 * jitter(rng);
    s.lamina_depth_mm *= 1.0 + 0.08 * jitter(rng);
    s.articular_depth_mm *= 1.0 + 0.08 * jitter(rng);
    s.lordosis_mm *= 1.0 + 0.3 * jitter(rng);
    s.skin_curvature_per_mm *= 1.0 + 0.3 * jitter(rng);
    s.seed = mix_seed(variant_seed, seed);
    return s;
  }
};

inline void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = nlohmann::json{{"dims", s.dims},
                     {"spacing_mm", s.spacing_mm},
                     {"vertebra_pitch_mm", s.vertebra_pitch_mm},
                     {"spinous_half_width_mm", s.spinous_half_width_mm},
                     {"lamina_offset_mm", s.lamina_offset_mm},
                     {"articular_offset_mm", s.articular_offset_mm},
                     {"skin_height_mm", s.skin_height_mm},
                     {"skin_curvature_per_mm", s.skin_curvature_per_mm},
                     {"spinous_depth_mm", s.spinous_depth_mm},
                     {"lamina_depth_mm", s.lamina_depth_mm},
                     {"articular_depth_mm", s.articular_depth_mm},
                     {"lordosis_mm", s.lordosis_mm},
                     {"axial_rotation", s.axial_rotation},
                     {"bone_intensity", s.bone_intensity},
                     {"tissue_intensity", s.tissue_intensity},
                     {"tissue_decay_mm", s.tissue_decay_mm},
                     {"speckle_sigma", s.speckle_sigma},
                     {"shadow_threshold", s.shadow_threshold},
                     {"seed", s.seed}};
}

// Strict: every key must be known; missing keys keep defaults.
inline void from_json(const nlohmann::json& j, PhantomSpec& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "dims") s.dims = value.get<std::array<std::uint32_t, 3>>();
    else if (key == "spacing_mm") s.spacing_mm = value.get<double>();
    else if (key == "vertebra_pitch_mm") s.vertebra_pitch_mm = value.get<double>();
    else if (key == "spinous_half_width_mm") s.spinous_half_width_mm = value.get<double>();
    else if (key == "lamina_offset_mm") s.lamina_offset_mm = value.get<double>();
    else if (key == "articular_offset_mm") s.articular_offset_mm = value.get<double>();
    else if (key == "skin_height_mm") s.skin_height_mm = value.get<double>();
    else if (key == "skin_curvature_per_mm") s.skin_curvature_per_mm = value.get<double>();
    else if (key == "spinous_depth_mm") s.spinous_depth_mm = value.get<double>();
    else if (key == "lamina_depth_mm") s.lamina_depth_mm = value.get<double>();
    else if (key == "articular_depth_mm") s.articular_depth_mm = value.get<double>();
    else if (key == "lordosis_mm") s.lordosis_mm = value.get<double>();
    else if (key == "axial_rotation") s.axial_rotation = value.get<double>();
    else if (key == "bone_intensity") s.bone_intensity = value.get<int>();
    else if (key == "tissue_intensity") s.tissue_intensity = value.get<int>();
    else if (key == "tissue_decay_mm") s.tissue_decay_mm = value.get<double>();
    else if (key == "speckle_sigma") s.speckle_sigma = value.get<double>();
    else if (key == "shadow_threshold") s.shadow_threshold = value.get<double>();
    else if (key == "seed") s.seed = value.get<std::uint64_t>();
    else throw InvalidArgument("unknown phantom key: " + key);
  }
}

inline constexpr int kSurfaceThreshold = 8;

inline SkinSurface extract_surface(const VoxelVolume& volume, int threshold = kSurfaceThreshold) {
  if (threshold <= 0 || threshold >= 255) throw InvalidArgument("surface threshold must be in (0,255)");
  const auto [nx, ny, nz] = volume.dims;
  SkinSurface s;
  s.nx = nx;
  s.ny = ny;
  s.spacing_mm = volume.spacing[0];
  s.height_mm.assign(static_cast<std::size_t>(nx) * ny, std::numeric_limits<double>::quiet_NaN());
  double lowest = std::numeric_limits<double>::infinity();
  for (std::uint32_t j = 0; j < ny; ++j) {
    for (std::uint32_t i = 0; i < nx; ++i) {
      for (std::uint32_t k = nz; k-- > 0;) {
        if (volume.at(i, j, k) >= threshold) {
          double h = k * static_cast<double>(volume.spacing[2]);
          s.height_mm[i + static_cast<std::size_t>(nx) * j] = h;
          lowest = std::min(lowest, h);
          break;
        }
      }
    }
  }
  if (!std::isfinite(lowest)) lowest = 0;
  for (auto& h : s.height_mm)
    if (std::isnan(h)) h = lowest;
  return s;
}

namespace detail {

inline bool spinous_bone(const PhantomSpec& s, double u, double y, double z, double zref) {
  if (std::abs(u) > s.spinous_half_width_mm) return false;
  double p = s.vertebra_pitch_mm;
  double k = std::round((y - s.center_y_mm()) / p);
  double dy = y - s.level_y(static_cast<int>(k));
  double half = 0.3 * p;
  if (std::abs(dy) > half) return false;
  double r = dy / half;
  double top = zref - s.spinous_depth_mm - 4.0 * r * r - 1.5 * (u / s.spinous_half_width_mm) * (u / s.spinous_half_width_mm);
  double bottom = zref - s.lamina_depth_mm - 3.0;
  return z <= top && z >= bottom;
}

// Shingled laminae: the surface rises caudally within each level with an interlaminar gap.
inline bool lamina_bone(const PhantomSpec& s, double u, double y, double z, double zref) {
  double lateral = std::abs(std::abs(u) - s.lamina_offset_mm);
  if (lateral > 5.0) return false;
  double p = s.vertebra_pitch_mm;
  double phase = (y - s.center_y_mm()) / p + 0.5;
  double t = phase - std::floor(phase);
  if (t < 0.12 || t > 0.86) return false;
  double top = zref - s.lamina_depth_mm + 6.0 * (t - 0.5) - 0.05 * lateral * lateral;
  return z <= top && z >= top - 3.0;
}

// Facet domes between levels.
inline bool articular_bone(const PhantomSpec& s, double u, double y, double z, double zref) {
  double lateral = std::abs(std::abs(u) - s.articular_offset_mm);
  if (lateral > 4.0) return false;
  double p = s.vertebra_pitch_mm;
  double k = std::floor((y - s.center_y_mm()) / p);
  double dy = y - (s.level_y(static_cast<int>(k)) + 0.5 * p);
  double radius = 0.36 * p;
  if (std::abs(dy) > radius) return false;
  double r = dy / radius;
  double top = zref - s.articular_depth_mm + 4.0 * (1.0 - r * r) - 0.1 * lateral * lateral;
  return z <= top && z >= top - 4.0;
}

}  // namespace detail

struct Phantom {
  VoxelVolume volume;
  SkinSurface surface;
  GoalPoseSet goals;
};

// Standard-view poses: yaw 90 puts the image plane across the spine (probe y = world +x),
// yaw 180 puts it along the spine (probe y = world +y).
inline GoalPoseSet phantom_goals(const PhantomSpec& spec, const SkinSurface& surface) {
  auto on_skin = [&](double x, double y, double yaw) {
    return Pose(Eigen::Vector3d(x, y, surface.height(x, y)), downward_orientation(yaw));
  };
  double xc = spec.center_x_mm();
  GoalPoseSet g;
  g.poses[ViewLabel::TSP] = on_skin(xc, spec.level_y(0), 90.0);
  g.poses[ViewLabel::PSL] = on_skin(xc + spec.lamina_offset_mm, spec.center_y_mm(), 180.0);
  g.poses[ViewLabel::PSAP] = on_skin(xc + spec.articular_offset_mm, spec.level_y(0) + 0.5 * spec.vertebra_pitch_mm, 180.0);
  return g;
}

inline Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  const auto [nx, ny, nz] = spec.dims;
  Phantom out;
  out.volume = VoxelVolume(nx, ny, nz, static_cast<float>(spec.spacing_mm));
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double sp = spec.spacing_mm;
  const double xc = spec.center_x_mm();
  for (std::uint32_t k = 0; k < nz; ++k) {
    double z = k * sp;
    for (std::uint32_t j = 0; j < ny; ++j) {
      double y = j * sp;
      for (std::uint32_t i = 0; i < nx; ++i) {
        double x = i * sp;
        double skin = spec.skin_height(x, y);
        if (z > skin) continue;
        double u = x - xc;
        double zref = spec.skin_height(xc, y) - spec.bone_shift(x, y);
        if (detail::spinous_bone(spec, u, y, z, zref) || detail::lamina_bone(spec, u, y, z, zref) ||
            detail::articular_bone(spec, u, y, z, zref)) {
          out.volume.at(i, j, k) = static_cast<std::uint8_t>(spec.bone_intensity);
          continue;
        }
        double depth = skin - z;
        double base = spec.tissue_intensity * (0.35 + 0.65 * std::exp(-depth / spec.tissue_decay_mm));
        if (depth > 4.0 && depth < 5.0) base += 40.0;  // fascia layer
        double v = base * (1.0 + spec.speckle_sigma * normal(rng));
        v = std::clamp(v, static_cast<double>(2 * kSurfaceThreshold), spec.shadow_threshold - 1.0);
        out.volume.at(i, j, k) = static_cast<std::uint8_t>(std::lround(v));
      }
    }
  }
  out.surface = extract_surface(out.volume);
  out.goals = phantom_goals(spec, out.surface);
  return out;
}

struct ImageSpec {
  int rows = kImageRows;
  int cols = kImageCols;
  double pixel_pitch_mm = 0.5;
  double shadow_threshold = 200;
  double kappa = 0.1;
  double speckle_sigma = 0.08;
  std::uint64_t seed = 0;

  void validate() const {
    if (rows != kImageRows || cols != kImageCols) throw InvalidArgument("probe field of view is 150x150");
    if (!(kappa > 0 && kappa < 1)) throw InvalidArgument("shadow transmission must be in (0,1)");
    if (!(pixel_pitch_mm > 0)) throw InvalidArgument("pixel pitch must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ImageSpec& s) {
  j = nlohmann::json{{"pixel_pitch_mm", s.pixel_pitch_mm},
                     {"shadow_threshold", s.shadow_threshold},
                     {"kappa", s.kappa},
                     {"speckle_sigma", s.speckle_sigma}};
}

inline void from_json(const nlohmann::json& j, ImageSpec& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "pixel_pitch_mm") s.pixel_pitch_mm = value.get<double>();
    else if (key == "shadow_threshold") s.shadow_threshold = value.get<double>();
    else if (key == "kappa") s.kappa = value.get<double>();
    else if (key == "speckle_sigma") s.speckle_sigma = value.get<double>();
    else throw InvalidArgument("unknown image key: " + key);
  }
}

// Trilinear sample at continuous voxel coordinates; 0 outside the grid.
inline double sample_trilinear(const VoxelVolume& vol, double u, double v, double w) {
  const double mx = vol.dims[0] - 1, my = vol.dims[1] - 1, mz = vol.dims[2] - 1;
  constexpr double eps = 1e-9;
  if (u < -eps || v < -eps || w < -eps || u > mx + eps || v > my + eps || w > mz + eps) return 0.0;
  u = std::clamp(u, 0.0, mx);
  v = std::clamp(v, 0.0, my);
  w = std::clamp(w, 0.0, mz);
  auto i0 = static_cast<std::uint32_t>(u), j0 = static_cast<std::uint32_t>(v), k0 = static_cast<std::uint32_t>(w);
  std::uint32_t i1 = std::min<std::uint32_t>(i0 + 1, vol.dims[0] - 1);
  std::uint32_t j1 = std::min<std::uint32_t>(j0 + 1, vol.dims[1] - 1);
  std::uint32_t k1 = std::min<std::uint32_t>(k0 + 1, vol.dims[2] - 1);
  double fu = u - i0, fv = v - j0, fw = w - k0;
  auto lerp = [](double a, double b, double t) { return t == 0.0 ? a : a + (b - a) * t; };
  double c00 = lerp(vol.at(i0, j0, k0), vol.at(i1, j0, k0), fu);
  double c10 = lerp(vol.at(i0, j1, k0), vol.at(i1, j1, k0), fu);
  double c01 = lerp(vol.at(i0, j0, k1), vol.at(i1, j0, k1), fu);
  double c11 = lerp(vol.at(i0, j1, k1), vol.at(i1, j1, k1), fu);
  return lerp(lerp(c00, c10, fv), lerp(c01, c11, fv), fw);
}

// Samples the probe y-z plane. The probe origin maps to (row 0, col cols/2).
inline Image slice_image(const VoxelVolume& volume, const Pose& pose, const ImageSpec& spec) {
  spec.validate();
  const Eigen::Matrix3d r = pose.rotation();
  const Eigen::Vector3d ey = r.col(1) * spec.pixel_pitch_mm;
  const Eigen::Vector3d ez = r.col(2) * spec.pixel_pitch_mm;
  const Eigen::Vector3d inv_spacing(1.0 / volume.spacing[0], 1.0 / volume.spacing[1], 1.0 / volume.spacing[2]);
  std::vector<double> raw(static_cast<std::size_t>(spec.rows) * spec.cols);
  for (int row = 0; row < spec.rows; ++row) {
    for (int col = 0; col < spec.cols; ++col) {
      Eigen::Vector3d w = pose.position + (col - spec.cols / 2) * ey + row * ez;
      Eigen::Vector3d g = w.cwiseProduct(inv_spacing);
      raw[static_cast<std::size_t>(row) * spec.cols + col] = sample_trilinear(volume, g.x(), g.y(), g.z());
    }
  }
  // Each beam loses a factor kappa of transmission every time it enters a reflector,
  // i.e. at the first sample of each run of supra-threshold samples.
  std::vector<double> shaded(raw.size());
  for (int col = 0; col < spec.cols; ++col) {
    double t = 1.0;
    bool inside = false;
    for (int row = 0; row < spec.rows; ++row) {
      std::size_t idx = static_cast<std::size_t>(row) * spec.cols + col;
      shaded[idx] = raw[idx] * t;
      bool hit = raw[idx] >= spec.shadow_threshold;
      if (hit && !inside) t *= spec.kappa;
      inside = hit;
    }
  }
  Image img(spec.rows, spec.cols);
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const bool speckle = spec.speckle_sigma > 0;
  for (std::size_t idx = 0; idx < shaded.size(); ++idx) {
    double v = shaded[idx];
    if (speckle) v *= 1.0 + spec.speckle_sigma * normal(rng);
    img.pixels[idx] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
  }
  return img;
}

inline double nonzero_fraction(const Image& image) {
  if (image.pixels.empty()) return 0.0;
  auto n = std::count_if(image.pixels.begin(), image.pixels.end(), [](std::uint8_t v) { return v > 0; });
  return static_cast<double>(n) / static_cast<double>(image.pixels.size());
}

// --- SVOL1 volume files ------------------------------------------------------

class VolumeFormatError : public Error {
 public:
  enum class Kind { bad_magic, truncated, dim_overflow, bad_dims, io };
  VolumeFormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr char kVolumeMagic[] = "SVOL1\n";
inline constexpr std::uint64_t kMaxVoxels = std::uint64_t{1} << 32;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

inline void put_f32(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(os, bits);
}

inline float get_f32(const unsigned char* b) {
  std::uint32_t bits = get_u32(b);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

inline void write_volume(std::ostream& os, const VoxelVolume& vol) {
  os.write(kVolumeMagic, 6);
  for (auto d : vol.dims) detail::put_u32(os, d);
  for (auto s : vol.spacing) detail::put_f32(os, s);
  os.write(reinterpret_cast<const char*>(vol.voxels.data()), static_cast<std::streamsize>(vol.voxels.size()));
  if (!os) throw VolumeFormatError(VolumeFormatError::Kind::io, "failed writing volume");
}

inline void write_volume(const std::string& path, const VoxelVolume& vol) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw VolumeFormatError(VolumeFormatError::Kind::io, "cannot open for writing: " + path);
  write_volume(os, vol);
}

inline VoxelVolume read_volume(std::istream& is) {
  using K = VolumeFormatError::Kind;
  char magic[6] = {};
  is.read(magic, 6);
  if (is.gcount() != 6 || std::memcmp(magic, kVolumeMagic, 6) != 0) throw VolumeFormatError(K::bad_magic, "not an SVOL1 volume");
  unsigned char header[24];
  is.read(reinterpret_cast<char*>(header), 24);
  if (is.gcount() != 24) throw VolumeFormatError(K::truncated, "truncated SVOL1 header");
  VoxelVolume vol;
  std::uint64_t count = 1;
  for (int i = 0; i < 3; ++i) {
    vol.dims[i] = detail::get_u32(header + 4 * i);
    vol.spacing[i] = detail::get_f32(header + 12 + 4 * i);
    if (vol.dims[i] != 0 && count > kMaxVoxels / vol.dims[i]) throw VolumeFormatError(K::dim_overflow, "SVOL1 voxel count overflows");
    count *= vol.dims[i];
  }
  if (count > kMaxVoxels) throw VolumeFormatError(K::dim_overflow, "SVOL1 voxel count overflows");
  for (int i = 0; i < 3; ++i) {
    if (vol.dims[i] < VoxelVolume::kMinDim) throw VolumeFormatError(K::bad_dims, "SVOL1 dims must be >= 16");
    if (!(vol.spacing[i] > 0) || !std::isfinite(vol.spacing[i])) throw VolumeFormatError(K::bad_dims, "SVOL1 spacing must be positive");
  }
  if (auto here = is.tellg(); here != std::streampos(-1)) {
    is.seekg(0, std::ios::end);
    auto end = is.tellg();
    is.seekg(here);
    if (end != std::streampos(-1) && static_cast<std::uint64_t>(end - here) < count)
      throw VolumeFormatError(K::truncated, "truncated SVOL1 payload");
  }
  vol.voxels.resize(static_cast<std::size_t>(count));
  is.read(reinterpret_cast<char*>(vol.voxels.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::uint64_t>(is.gcount()) != count) throw VolumeFormatError(K::truncated, "truncated SVOL1 payload");
  return vol;
}

inline VoxelVolume read_volume(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw MissingArtifact("cannot open volume: " + path);
  return read_volume(is);
}

}  // namespace sononav

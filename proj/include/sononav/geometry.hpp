#pragma once

// Rigid probe poses, the ten navigation primitives, pose-error metrics and the
// coarse-to-fine step schedule.

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <numbers>

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include "sononav/common.hpp"

namespace sononav {

inline constexpr double deg2rad(double d) { return d * std::numbers::pi / 180.0; }
inline constexpr double rad2deg(double r) { return r * 180.0 / std::numbers::pi; }

inline double clamped_acos(double v) { return std::acos(std::clamp(v, -1.0, 1.0)); }

// Probe pose in the world frame. Position in millimeters.
struct Pose {
  Eigen::Vector3d position = Eigen::Vector3d::Zero();
  Eigen::Quaterniond orientation = Eigen::Quaterniond::Identity();

  Pose() = default;
  Pose(const Eigen::Vector3d& p, const Eigen::Quaterniond& q) : position(p), orientation(q.normalized()) {}

  Eigen::Matrix3d rotation() const { return orientation.toRotationMatrix(); }
  Eigen::Vector3d axis(int i) const { return rotation().col(i); }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation();
    m.topRightCorner<3, 1>() = position;
    return m;
  }

  static Pose from_matrix(const Eigen::Matrix4d& m) {
    Eigen::Matrix3d r = m.topLeftCorner<3, 3>();
    return Pose(m.topRightCorner<3, 1>(), Eigen::Quaterniond(r));
  }
};

inline void to_json(nlohmann::json& j, const Pose& p) {
  j = nlohmann::json{{"p", {p.position.x(), p.position.y(), p.position.z()}},
                     {"q", {p.orientation.w(), p.orientation.x(), p.orientation.y(), p.orientation.z()}}};
}

inline void from_json(const nlohmann::json& j, Pose& p) {
  const auto& pj = j.at("p");
  const auto& qj = j.at("q");
  if (pj.size() != 3 || qj.size() != 4) throw InvalidArgument("pose json needs p[3] and q[4]");
  Eigen::Quaterniond q(qj[0].get<double>(), qj[1].get<double>(), qj[2].get<double>(), qj[3].get<double>());
  if (q.norm() < 1e-12) throw InvalidArgument("pose quaternion has zero norm");
  p = Pose(Eigen::Vector3d(pj[0].get<double>(), pj[1].get<double>(), pj[2].get<double>()), q);
}

// Probe pointing straight down (probe z = world -z) and yawed by `yaw_deg`
// about the world vertical. Yaw 0 aligns the probe x-axis with world +x.
inline Eigen::Quaterniond downward_orientation(double yaw_deg) {
  Eigen::Quaterniond down(Eigen::AngleAxisd(std::numbers::pi, Eigen::Vector3d::UnitX()));
  Eigen::Quaterniond yaw(Eigen::AngleAxisd(deg2rad(yaw_deg), Eigen::Vector3d::UnitZ()));
  return (yaw * down).normalized();
}

enum class ActionKind { translation, rotation };

struct ActionPrimitive {
  int index = 0;
  ActionKind kind = ActionKind::translation;
  int axis = 0;  // 0=x, 1=y, 2=z of the probe frame
  int sign = 1;

  static constexpr int kCount = 10;

  static constexpr ActionPrimitive from_index(int i) {
    constexpr std::array<ActionPrimitive, kCount> table{{
        {0, ActionKind::translation, 0, +1},
        {1, ActionKind::translation, 0, -1},
        {2, ActionKind::translation, 1, +1},
        {3, ActionKind::translation, 1, -1},
        {4, ActionKind::rotation, 0, +1},
        {5, ActionKind::rotation, 0, -1},
        {6, ActionKind::rotation, 1, +1},
        {7, ActionKind::rotation, 1, -1},
        {8, ActionKind::rotation, 2, +1},
        {9, ActionKind::rotation, 2, -1},
    }};
    if (i < 0 || i >= kCount) throw InvalidArgument("action index out of range: " + std::to_string(i));
    return table[static_cast<std::size_t>(i)];
  }

  bool is_rotation() const { return kind == ActionKind::rotation; }
  bool operator==(const ActionPrimitive&) const = default;
};

struct PoseError {
  double d_mm = 0;
  double theta_deg = 0;
};

class StepSchedule {
 public:
  static constexpr int kInitialStep = 5;
  static constexpr std::size_t kBufferCapacity = 30;
  static constexpr double kConvergenceDistance = 0.01;
  static constexpr int kConvergedPairs = 3;

  int d_step_mm() const { return d_step_; }
  int theta_step_deg() const { return theta_step_; }
  bool exhausted() const { return d_step_ == 0 || theta_step_ == 0; }
  std::size_t buffered() const { return buffer_.size(); }

  void reset() {
    d_step_ = theta_step_ = kInitialStep;
    buffer_.clear();
  }

  // Records the pose; returns true when this call reduced the step sizes.
  // Poses are compared as (position mm, quaternion with w >= 0).
  bool update(const Pose& pose) {
    buffer_.push_back(key(pose));
    if (buffer_.size() > kBufferCapacity) buffer_.pop_front();
    int close_pairs = 0;
    for (std::size_t i = 0; i < buffer_.size() && close_pairs < kConvergedPairs; ++i) {
      for (std::size_t j = i + 1; j < buffer_.size(); ++j) {
        if (distance(buffer_[i], buffer_[j]) < kConvergenceDistance && ++close_pairs >= kConvergedPairs) break;
      }
    }
    if (close_pairs < kConvergedPairs) return false;
    d_step_ = std::max(0, d_step_ - 1);
    theta_step_ = std::max(0, theta_step_ - 1);
    buffer_.clear();
    return true;
  }

  static std::array<double, 7> key(const Pose& pose) {
    Eigen::Quaterniond q = pose.orientation.normalized();
    if (q.w() < 0) q.coeffs() = -q.coeffs();
    return {pose.position.x(), pose.position.y(), pose.position.z(), q.w(), q.x(), q.y(), q.z()};
  }

  static double distance(const std::array<double, 7>& a, const std::array<double, 7>& b) {
    double s = 0;
    for (std::size_t i = 0; i < 7; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  }

 private:
  int d_step_ = kInitialStep;
  int theta_step_ = kInitialStep;
  std::deque<std::array<double, 7>> buffer_;
};

// Right-multiplies the pose by a single primitive expressed in the probe frame.
inline Pose compose_pose(const Pose& pose, const ActionPrimitive& action, const StepSchedule& schedule) {
  Eigen::Vector3d unit = Eigen::Vector3d::Unit(action.axis) * action.sign;
  Pose out = pose;
  if (action.is_rotation()) {
    if (schedule.theta_step_deg() <= 0) throw InvalidArgument("rotation step exhausted");
    Eigen::Quaterniond delta(Eigen::AngleAxisd(deg2rad(schedule.theta_step_deg()), unit));
    out.orientation = (pose.orientation * delta).normalized();
  } else {
    if (schedule.d_step_mm() <= 0) throw InvalidArgument("translation step exhausted");
    out.position = pose.position + pose.rotation() * (unit * schedule.d_step_mm());
    out.orientation = pose.orientation.normalized();
  }
  return out;
}

// Angle between the probe z-axis and world -z, degrees.
inline double tilt_angle(const Pose& pose) { return rad2deg(clamped_acos(-pose.rotation()(2, 2))); }

inline PoseError pose_distance(const Pose& pose, const Pose& goal) {
  double dot = std::abs(pose.orientation.normalized().dot(goal.orientation.normalized()));
  return {(pose.position - goal.position).norm(), rad2deg(2.0 * clamped_acos(dot))};
}

}  // namespace sononav

#pragma once

// Episodic probe-navigation environment over a virtual patient.

#include <array>
#include <limits>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "sononav/confidence.hpp"
#include "sononav/geometry.hpp"
#include "sononav/phantom.hpp"
#include "sononav/reward.hpp"

namespace sononav {

enum class EnvMode { train, infer };

enum class TerminationCause { none, goal, timeout, step_exhausted, out_of_patient };

inline std::string to_string(TerminationCause c) {
  switch (c) {
    case TerminationCause::none: return "none";
    case TerminationCause::goal: return "goal";
    case TerminationCause::timeout: return "timeout";
    case TerminationCause::step_exhausted: return "step-exhausted";
    case TerminationCause::out_of_patient: return "out-of-patient";
  }
  return "?";
}

struct ResetDistribution {
  double x_lo = 0.3, x_hi = 0.7;  // fractions of the volume width
  double y_lo = 0.2, y_hi = 0.8;  // fractions of the volume length
  double yaw_lo_deg = 0, yaw_hi_deg = 360;
};

struct EnvConfig {
  int max_steps = 120;
  EnvMode mode = EnvMode::train;
  RewardConfig reward;
  ImageSpec image;
  ConfidenceParams confidence;
  bool track_confidence = false;  // ROI confidences every step even without ASR
  std::array<bool, ActionPrimitive::kCount> allowed_actions{true, true, true, true, true, true, true, true, true, true};
  ResetDistribution reset;

  bool needs_confidence() const { return track_confidence || reward.asr_enabled; }
};

using Frame = std::shared_ptr<const Image>;

// The four most recent frames, oldest first.
struct Observation {
  static constexpr int kFrames = 4;
  std::array<Frame, kFrames> frames;

  const Image& latest() const { return *frames.back(); }
};

struct TransitionRecord {
  Observation observation;
  int action = 0;
  double reward = 0;
  Observation next_observation;
  bool terminal = false;
  TerminationCause cause = TerminationCause::none;
};

struct StepInfo {
  TransitionRecord transition;
  Pose pose;
  double nav_reward = 0;
  bool tilt_violation = false;
  bool out_of_patient = false;
  std::optional<PoseError> error;  // offline metric when a goal is known
  std::array<double, kRoiCount> roi_confidence{};
};

struct ConstrainedMove {
  Pose pose;
  bool tilt_violation = false;
};

class NavigationEnv {
 public:
  NavigationEnv(std::shared_ptr<const VoxelVolume> volume, std::shared_ptr<const SkinSurface> surface,
                std::optional<Pose> goal, EnvConfig config)
      : volume_(std::move(volume)), surface_(std::move(surface)), goal_(std::move(goal)), config_(std::move(config)) {
    if (!volume_ || !surface_) throw InvalidArgument("environment needs a volume and a surface");
    config_.reward.validate();
    config_.image.validate();
    if (config_.max_steps <= 0) throw InvalidArgument("max_steps must be positive");
    if (config_.mode == EnvMode::train && !goal_) throw InvalidArgument("training needs a goal pose");
  }

  const EnvConfig& config() const { return config_; }
  const VoxelVolume& volume() const { return *volume_; }
  const SkinSurface& surface() const { return *surface_; }
  const std::optional<Pose>& goal() const { return goal_; }
  void clear_goal() {
    if (config_.mode == EnvMode::train) throw InvalidArgument("training needs a goal pose");
    goal_.reset();
  }
  const Pose& pose() const { return pose_; }
  const StepSchedule& schedule() const { return schedule_; }
  int steps() const { return steps_; }
  bool terminal() const { return terminal_; }
  const Observation& observation() const { return obs_; }
  const Image& last_image() const { return *obs_.frames.back(); }
  const std::array<double, kRoiCount>& roi_confidence() const { return roi_conf_; }
  std::uint64_t episode_seed() const { return episode_seed_; }

  bool allowed(int action) const { return config_.allowed_actions[static_cast<std::size_t>(action)]; }

  // Horizontal position from the reset distribution, probe pointing down with a random yaw.
  Pose sample_start_pose(std::mt19937_64& rng) const {
    const auto& d = config_.reset;
    std::uniform_real_distribution<double> ux(d.x_lo * volume_->width_mm(), d.x_hi * volume_->width_mm());
    std::uniform_real_distribution<double> uy(d.y_lo * volume_->length_mm(), d.y_hi * volume_->length_mm());
    std::uniform_real_distribution<double> uyaw(d.yaw_lo_deg, d.yaw_hi_deg);
    double x = ux(rng);
    double y = uy(rng);
    double yaw = uyaw(rng);
    return Pose(Eigen::Vector3d(x, y, surface_->height(x, y)), downward_orientation(yaw));
  }

  Observation reset(std::uint64_t seed) {
    episode_seed_ = seed;
    std::mt19937_64 rng(mix_seed(seed, 0xe5e7));
    return start_round(sample_start_pose(rng));
  }

  // New start pose from the reset distribution with a fresh schedule and step counter.
  Observation reposition(std::uint64_t seed) { return reset(seed); }

  // Starts a round from an explicit pose (snapped to the skin).
  Observation start_round(const Pose& start) {
    pose_ = start;
    pose_.position.z() = surface_->height(pose_.position.x(), pose_.position.y());
    schedule_.reset();
    steps_ = 0;
    terminal_ = false;
    Frame f = std::make_shared<const Image>(acquire(pose_, 0));
    for (auto& slot : obs_.frames) slot = f;
    update_confidence(*f);
    return obs_;
  }

  // Pose after the surface-following and tilt constraints, without side effects.
  ConstrainedMove simulate(const Pose& from, int action) const {
    ActionPrimitive a = ActionPrimitive::from_index(action);
    ConstrainedMove m{compose_pose(from, a, schedule_), false};
    if (a.is_rotation() && tilt_angle(m.pose) > config_.reward.tilt_limit_deg) {
      m.pose.orientation = from.orientation;
      m.tilt_violation = true;
    }
    m.pose.position.z() = surface_->height(m.pose.position.x(), m.pose.position.y());
    return m;
  }

  StepInfo step(int action) {
    if (terminal_) throw InvalidArgument("step on a terminal episode");
    if (!allowed(action)) throw InvalidArgument("action " + std::to_string(action) + " is masked");
    StepInfo info;
    info.transition.observation = obs_;
    info.transition.action = action;

    const bool train = config_.mode == EnvMode::train;
    StepOutcome outcome;
    outcome.d_step_mm = schedule_.d_step_mm();
    outcome.theta_step_deg = schedule_.theta_step_deg();
    std::optional<PoseError> before;
    if (goal_) before = pose_distance(pose_, *goal_);

    ConstrainedMove move = simulate(pose_, action);
    pose_ = move.pose;
    ++steps_;
    Frame f = std::make_shared<const Image>(acquire(pose_, static_cast<std::uint64_t>(steps_)));
    for (int i = 0; i + 1 < Observation::kFrames; ++i) obs_.frames[static_cast<std::size_t>(i)] = obs_.frames[static_cast<std::size_t>(i) + 1];
    obs_.frames.back() = f;

    outcome.tilt_violation = move.tilt_violation;
    outcome.out_of_patient = nonzero_fraction(*f) < config_.reward.out_of_patient_fraction;
    if (goal_) info.error = pose_distance(pose_, *goal_);
    if (train) {
      outcome.prev_d_mm = before->d_mm;
      outcome.prev_theta_deg = before->theta_deg;
      outcome.d_mm = info.error->d_mm;
      outcome.theta_deg = info.error->theta_deg;
      outcome.goal_reached = !outcome.out_of_patient && info.error->d_mm <= config_.reward.goal_d_mm &&
                             info.error->theta_deg <= config_.reward.goal_theta_deg;
    }
    if (config_.needs_confidence()) {
      std::size_t k = static_cast<std::size_t>(config_.reward.roi_index);
      outcome.prev_roi_confidence = roi_conf_[k];
      update_confidence(*f);
      outcome.roi_confidence = roi_conf_[k];
    }
    info.nav_reward = navigation_reward(outcome, config_.reward.clamp_nav_reward);
    info.transition.reward = total_reward(outcome, config_.reward);

    schedule_.update(pose_);

    TerminationCause cause = TerminationCause::none;
    if (outcome.goal_reached) cause = TerminationCause::goal;
    else if (steps_ >= config_.max_steps) cause = TerminationCause::timeout;
    else if (schedule_.exhausted()) cause = TerminationCause::step_exhausted;
    else if (outcome.out_of_patient) cause = TerminationCause::out_of_patient;
    terminal_ = cause != TerminationCause::none;

    info.transition.next_observation = obs_;
    info.transition.terminal = terminal_;
    info.transition.cause = cause;
    info.pose = pose_;
    info.tilt_violation = move.tilt_violation;
    info.out_of_patient = outcome.out_of_patient;
    info.roi_confidence = roi_conf_;
    return info;
  }

  // One-step lookahead through the constrained transition toward the goal;
  // minimizes d/d_step + theta/theta_step, lowest index on ties.
  int expert_action() const {
    if (!goal_) throw InvalidArgument("expert policy needs the goal pose");
    return expert_action_toward(*goal_);
  }

  int expert_action_toward(const Pose& goal) const {
    if (schedule_.exhausted()) throw InvalidArgument("step schedule exhausted");
    int best = -1;
    double best_score = 0;
    for (int a = 0; a < ActionPrimitive::kCount; ++a) {
      if (!allowed(a)) continue;
      PoseError e = pose_distance(simulate(pose_, a).pose, goal);
      double score = e.d_mm / schedule_.d_step_mm() + e.theta_deg / schedule_.theta_step_deg();
      if (best < 0 || score < best_score) {
        best = a;
        best_score = score;
      }
    }
    if (best < 0) throw InvalidArgument("every action is masked");
    return best;
  }

  // Moves the probe (surface-snapped) and re-acquires the current frame; used to
  // settle on a chosen stop. Does not count as a step.
  const Image& place(const Pose& pose) {
    pose_ = pose;
    pose_.position.z() = surface_->height(pose_.position.x(), pose_.position.y());
    Frame f = std::make_shared<const Image>(acquire(pose_, static_cast<std::uint64_t>(steps_)));
    obs_.frames.back() = f;
    return *f;
  }

  Image acquire(const Pose& pose, std::uint64_t step) const {
    ImageSpec spec = config_.image;
    spec.seed = mix_seed(episode_seed_, step);
    return slice_image(*volume_, pose, spec);
  }

 private:
  void update_confidence(const Image& img) {
    if (!config_.needs_confidence()) return;
    roi_conf_ = roi_means(confidence_map(img, config_.confidence));
  }

  std::shared_ptr<const VoxelVolume> volume_;
  std::shared_ptr<const SkinSurface> surface_;
  std::optional<Pose> goal_;
  EnvConfig config_;
  Pose pose_;
  StepSchedule schedule_;
  Observation obs_;
  int steps_ = 0;
  bool terminal_ = true;
  std::uint64_t episode_seed_ = 0;
  std::array<double, kRoiCount> roi_conf_{};
};

// Trajectory CSV: step,action,x_mm,y_mm,z_mm,qw,qx,qy,qz,d_mm,theta_deg,reward,c_roi,cause
struct TrajectoryRow {
  int step = 0;
  int action = -1;
  Pose pose;
  double d_mm = std::numeric_limits<double>::quiet_NaN();
  double theta_deg = std::numeric_limits<double>::quiet_NaN();
  double reward = 0;
  double c_roi = std::numeric_limits<double>::quiet_NaN();
  TerminationCause cause = TerminationCause::none;
};

inline TrajectoryRow trajectory_row(const StepInfo& info, int step, int roi_index) {
  TrajectoryRow row;
  row.step = step;
  row.action = info.transition.action;
  row.pose = info.pose;
  if (info.error) {
    row.d_mm = info.error->d_mm;
    row.theta_deg = info.error->theta_deg;
  }
  row.reward = info.transition.reward;
  row.c_roi = info.roi_confidence[static_cast<std::size_t>(roi_index)];
  row.cause = info.transition.cause;
  return row;
}

inline void write_trajectory(std::ostream& os, const std::vector<TrajectoryRow>& rows) {
  os << "step,action,x_mm,y_mm,z_mm,qw,qx,qy,qz,d_mm,theta_deg,reward,c_roi,cause\n";
  os.precision(10);
  for (const auto& r : rows) {
    const auto& p = r.pose.position;
    const auto& q = r.pose.orientation;
    os << r.step << "," << r.action << "," << p.x() << "," << p.y() << "," << p.z() << "," << q.w() << "," << q.x() << ","
       << q.y() << "," << q.z() << "," << r.d_mm << "," << r.theta_deg << "," << r.reward << "," << r.c_roi << ","
       << to_string(r.cause) << "\n";
  }
}

}  // namespace sononav

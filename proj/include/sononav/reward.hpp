#pragma once

// Navigation reward, safety penalties, goal bonus and the acoustic-shadow term.

#include <algorithm>

#include <nlohmann/json.hpp>

#include "sononav/common.hpp"
#include "sononav/confidence.hpp"

namespace sononav {

struct RewardConfig {
  double goal_bonus = 10.0;
  double out_of_patient_penalty = -1.0;
  double tilt_penalty = -0.5;
  double tilt_limit_deg = 30.0;
  double goal_d_mm = 1.0;
  double goal_theta_deg = 1.0;
  double out_of_patient_fraction = 0.30;
  bool clamp_nav_reward = true;
  bool asr_enabled = false;
  int lambda = 1;
  int roi_index = 0;

  void validate() const {
    if (!(tilt_limit_deg > 0 && goal_d_mm > 0 && goal_theta_deg > 0 && out_of_patient_fraction > 0))
      throw InvalidArgument("reward thresholds must be positive");
    if (asr_enabled && lambda != 1 && lambda != -1) throw InvalidArgument("ASR lambda must be +1 or -1");
    if (asr_enabled) roi_by_index(roi_index);
  }
};

// Everything the reward needs about one transition.
struct StepOutcome {
  double prev_d_mm = 0, prev_theta_deg = 0;
  double d_mm = 0, theta_deg = 0;
  double d_step_mm = 5, theta_step_deg = 5;  // schedule at decision time
  bool tilt_violation = false;
  bool out_of_patient = false;
  bool goal_reached = false;
  double prev_roi_confidence = 0;
  double roi_confidence = 0;
};

inline double navigation_reward(const StepOutcome& o, bool clamp = true) {
  if (!(o.d_step_mm > 0) || !(o.theta_step_deg > 0)) throw InvalidArgument("navigation reward needs positive step sizes");
  double dd = (o.prev_d_mm - o.d_mm) / o.d_step_mm;
  double dt = (o.prev_theta_deg - o.theta_deg) / o.theta_step_deg;
  if (!clamp) return dd + dt;
  dd = std::clamp(dd, -1.0, 1.0);
  dt = std::clamp(dt, -1.0, 1.0);
  return std::clamp(dd + dt, -1.0, 1.0);
}

// Case precedence: out of patient, tilt, goal, shaped reward.
inline double total_reward(const StepOutcome& o, const RewardConfig& cfg) {
  if (o.out_of_patient) return cfg.out_of_patient_penalty;
  if (o.tilt_violation) return cfg.tilt_penalty;
  if (o.goal_reached) return cfg.goal_bonus;
  double r = navigation_reward(o, cfg.clamp_nav_reward);
  if (cfg.asr_enabled) r += cfg.lambda * (o.roi_confidence - o.prev_roi_confidence);
  return r;
}

inline void to_json(nlohmann::json& j, const RewardConfig& c) {
  j = nlohmann::json{{"goal_bonus", c.goal_bonus},
                     {"out_of_patient_penalty", c.out_of_patient_penalty},
                     {"tilt_penalty", c.tilt_penalty},
                     {"tilt_limit_deg", c.tilt_limit_deg},
                     {"goal_d_mm", c.goal_d_mm},
                     {"goal_theta_deg", c.goal_theta_deg},
                     {"out_of_patient_fraction", c.out_of_patient_fraction},
                     {"clamp_nav_reward", c.clamp_nav_reward}};
}

// ASR fields live under the separate "asr" section of a run config.
inline void from_json(const nlohmann::json& j, RewardConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "goal_bonus") c.goal_bonus = value.get<double>();
    else if (key == "out_of_patient_penalty") c.out_of_patient_penalty = value.get<double>();
    else if (key == "tilt_penalty") c.tilt_penalty = value.get<double>();
    else if (key == "tilt_limit_deg") c.tilt_limit_deg = value.get<double>();
    else if (key == "goal_d_mm") c.goal_d_mm = value.get<double>();
    else if (key == "goal_theta_deg") c.goal_theta_deg = value.get<double>();
    else if (key == "out_of_patient_fraction") c.out_of_patient_fraction = value.get<double>();
    else if (key == "clamp_nav_reward") c.clamp_nav_reward = value.get<bool>();
    else throw InvalidArgument("unknown reward key: " + key);
  }
}

}  // namespace sononav

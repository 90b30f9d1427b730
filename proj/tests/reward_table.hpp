#pragma once

// The ten reference reward cases. Expected values are written as the f64
// arithmetic of the reward equations, so comparisons are exact.

#include <algorithm>
#include <string>
#include <vector>

#include "sononav/reward.hpp"

namespace sononav::testing {

struct RewardCase {
  std::string name;
  StepOutcome outcome;
  RewardConfig config;
  double expected;
};

inline std::vector<RewardCase> reward_table() {
  std::vector<RewardCase> t;
  auto base = [] {
    StepOutcome o;
    o.prev_d_mm = 10;
    o.d_mm = 10;
    o.prev_theta_deg = 10;
    o.theta_deg = 10;
    return o;
  };
  RewardConfig plain;
  RewardConfig asr_pos = plain, asr_neg = plain;
  asr_pos.asr_enabled = asr_neg.asr_enabled = true;
  asr_pos.lambda = 1;
  asr_neg.lambda = -1;

  StepOutcome o = base();
  o.d_mm = 0.5;
  o.theta_deg = 0.5;
  o.goal_reached = true;
  t.push_back({"goal reached", o, plain, 10.0});

  o = base();
  o.out_of_patient = true;
  t.push_back({"out of patient", o, plain, -1.0});

  o = base();
  o.tilt_violation = true;
  t.push_back({"tilt violation", o, plain, -0.5});

  o = base();
  o.d_mm = 5;
  t.push_back({"translation by one full step", o, plain, std::clamp((10.0 - 5.0) / 5.0 + 0.0, -1.0, 1.0)});

  o = base();
  t.push_back({"no pose change", o, plain, 0.0});

  o = base();
  o.d_mm = 9;
  o.theta_deg = 15;
  t.push_back({"rotation away with surface nudge", o, plain, std::clamp((10.0 - 9.0) / 5.0 + (-1.0), -1.0, 1.0)});

  o = base();
  o.d_mm = 0;
  o.theta_deg = 5;
  t.push_back({"improvement clamped at +1", o, plain, 1.0});

  o = base();
  o.d_mm = 25;
  o.theta_deg = 20;
  t.push_back({"regression clamped at -1", o, plain, -1.0});

  o = base();
  o.d_mm = 8;
  o.prev_roi_confidence = 0.50;
  o.roi_confidence = 0.70;
  t.push_back({"ASR lambda +1", o, asr_pos, (10.0 - 8.0) / 5.0 + 1.0 * (0.70 - 0.50)});
  t.push_back({"ASR lambda -1", o, asr_neg, (10.0 - 8.0) / 5.0 + -1.0 * (0.70 - 0.50)});
  return t;
}

}  // namespace sononav::testing

#pragma once

// Collaborative navigation: the RL navigator moves the probe, the view classifier
// records candidate stops, and the search restarts from a random pose when a round
// ends without any candidate.

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sononav/classifier.hpp"
#include "sononav/env.hpp"
#include "sononav/rl.hpp"
#include "sononav/ssim.hpp"

namespace sononav {

struct NavigatorConfig {
  int round_limit = 120;
  int budget = 240;
  ViewLabel target = ViewLabel::PSL;
  double probability_threshold = 0.5;

  void validate() const {
    if (round_limit <= 0) throw InvalidArgument("round limit must be positive");
    if (budget < round_limit) throw InvalidArgument("step budget must be at least the per-round limit");
    if (target == ViewLabel::BG) throw InvalidArgument("navigation target must be a standard view");
  }
};

struct CandidateRecord {
  int step = 0;  // global step index, 1-based
  Pose pose;
  ViewLabel label = ViewLabel::BG;
  double probability = 0;
  Image image;
};

enum class StopKind { best_candidate, rl_stop };

inline std::string to_string(StopKind k) { return k == StopKind::best_candidate ? "best-candidate" : "rl-stop"; }

struct NavigationMetrics {
  double d_mm = 0, theta_deg = 0, ssim = 0;
};

struct NavigationResult {
  Pose final_pose;
  Image final_image;
  std::vector<CandidateRecord> candidates;
  int total_steps = 0;
  int rounds = 0;
  std::vector<int> round_starts;  // global step index at which each round began
  StopKind stop = StopKind::rl_stop;
  std::optional<NavigationMetrics> metrics;
  std::vector<TrajectoryRow> trajectory;
};

// Chooses the next action from the environment's observable state.
using NavigationPolicy = std::function<int(const NavigationEnv&)>;
// Classifies an acquired frame. The pose argument exists for scripted and oracle recognizers.
using ViewRecognizer = std::function<Classification(const Image&, const Pose&)>;

inline NavigationPolicy greedy_policy(const QNet& net) {
  return [&net](const NavigationEnv& env) { return greedy_action(q_values(net, env.observation()), env.config().allowed_actions); };
}

inline ViewRecognizer classifier_recognizer(const ClassifierNet& net) {
  return [&net](const Image& img, const Pose&) { return classify(net, img); };
}

inline ViewRecognizer silent_recognizer() {
  return [](const Image&, const Pose&) {
    Classification c;
    c.label = ViewLabel::BG;
    c.probabilities = {0, 0, 0, 1};
    return c;
  };
}

// Fires with probability 1 exactly when the pose lies within (d, theta) of the goal.
inline ViewRecognizer oracle_recognizer(const Pose& goal, ViewLabel view, double d_mm = 10, double theta_deg = 10) {
  return [goal, view, d_mm, theta_deg](const Image&, const Pose& pose) {
    PoseError e = pose_distance(pose, goal);
    Classification c;
    bool hit = e.d_mm <= d_mm && e.theta_deg <= theta_deg;
    c.label = hit ? view : ViewLabel::BG;
    c.probabilities.fill(0);
    c.probabilities[static_cast<std::size_t>(c.label)] = 1;
    return c;
  };
}

// Same distribution as a fresh episode, with a fresh step schedule.
inline Observation reposition(NavigationEnv& env, std::uint64_t seed) { return env.reposition(seed); }

inline std::uint64_t round_seed(std::uint64_t seed, int round) { return mix_seed(seed, 0xd0a1 + static_cast<std::uint64_t>(round)); }

// Speckle-free images of two poses compared with SSIM.
inline double pose_ssim(const NavigationEnv& env, const Pose& a, const Pose& b) {
  ImageSpec clean = env.config().image;
  clean.speckle_sigma = 0;
  return ssim(slice_image(env.volume(), a, clean), slice_image(env.volume(), b, clean));
}

inline NavigationResult navigate(NavigationEnv& env, const NavigationPolicy& policy, const ViewRecognizer& recognizer,
                                 const NavigatorConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (env.config().mode != EnvMode::infer) throw InvalidArgument("navigation runs the environment in infer mode");
  if (env.config().max_steps != cfg.round_limit) throw InvalidArgument("environment step limit must equal the round limit");
  NavigationResult r;
  env.reset(round_seed(seed, 0));
  r.rounds = 1;
  r.round_starts.push_back(0);
  const std::size_t target = static_cast<std::size_t>(cfg.target);
  const int roi = env.config().reward.roi_index;
  while (true) {
    while (!env.terminal() && r.total_steps < cfg.budget) {
      StepInfo info = env.step(policy(env));
      ++r.total_steps;
      r.trajectory.push_back(trajectory_row(info, r.total_steps, roi));
      Classification c = recognizer(env.last_image(), env.pose());
      if (c.label == cfg.target && c.probabilities[target] > cfg.probability_threshold)
        r.candidates.push_back({r.total_steps, env.pose(), c.label, c.probabilities[target], env.last_image()});
    }
    if (!r.candidates.empty()) {
      const CandidateRecord& last = r.candidates.back();
      r.final_pose = last.pose;
      r.final_image = last.image;
      env.place(last.pose);
      r.stop = StopKind::best_candidate;
      break;
    }
    if (r.total_steps >= cfg.budget) {
      r.final_pose = env.pose();
      r.final_image = env.last_image();
      r.stop = StopKind::rl_stop;
      break;
    }
    reposition(env, round_seed(seed, r.rounds));
    r.round_starts.push_back(r.total_steps);
    ++r.rounds;
  }
  if (env.goal()) {
    PoseError e = pose_distance(r.final_pose, *env.goal());
    r.metrics = NavigationMetrics{e.d_mm, e.theta_deg, pose_ssim(env, r.final_pose, *env.goal())};
  }
  return r;
}

inline nlohmann::json to_json(const NavigationResult& r) {
  nlohmann::json j;
  j["final_pose"] = r.final_pose;
  j["total_steps"] = r.total_steps;
  j["rounds"] = r.rounds;
  j["round_starts"] = r.round_starts;
  j["stop"] = to_string(r.stop);
  nlohmann::json cands = nlohmann::json::array();
  for (const auto& c : r.candidates)
    cands.push_back({{"step", c.step}, {"pose", c.pose}, {"label", to_string(c.label)}, {"probability", c.probability}});
  j["candidates"] = cands;
  if (r.metrics) j["metrics"] = {{"d_mm", r.metrics->d_mm}, {"theta_deg", r.metrics->theta_deg}, {"ssim", r.metrics->ssim}};
  return j;
}

}  // namespace sononav

#pragma once

// Q-network with a score-map + GAP head, replay memory, epsilon-greedy control,
// TD targets and the DQN training loop with a supervised warm start.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sononav/confidence.hpp"
#include "sononav/env.hpp"
#include "sononav/neural.hpp"

namespace sononav {

using QVector = std::array<double, ActionPrimitive::kCount>;

struct SonoQNetConfig {
  std::vector<int> widths{8, 16, 32, 32};
  int frames = Observation::kFrames;
  int image_size = kImageRows;

  void validate() const {
    if (widths.size() != 4) throw InvalidArgument("the Q-network has exactly 4 conv stages");
    for (int w : widths)
      if (w <= 0) throw InvalidArgument("stage widths must be positive");
  }
};

inline void to_json(nlohmann::json& j, const SonoQNetConfig& c) { j = nlohmann::json{{"widths", c.widths}}; }
inline void from_json(const nlohmann::json& j, SonoQNetConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "widths") c.widths = value.get<std::vector<int>>();
    else throw InvalidArgument("unknown net key: " + key);
  }
  c.validate();
}

// Four (conv3x3, BN, ReLU, maxpool) stages, then a 1x1 score conv with BN giving one
// 9x9 map per action, reduced by global average pooling.
inline std::vector<nn::LayerSpec> qnet_specs(const SonoQNetConfig& cfg) {
  cfg.validate();
  using nn::LayerKind;
  std::vector<nn::LayerSpec> s;
  int in = cfg.frames;
  for (int w : cfg.widths) {
    s.push_back({LayerKind::conv3x3, in, w});
    s.push_back({LayerKind::batchnorm, w, w});
    s.push_back({LayerKind::relu});
    s.push_back({LayerKind::maxpool2});
    in = w;
  }
  s.push_back({LayerKind::conv1x1, in, ActionPrimitive::kCount});
  s.push_back({LayerKind::batchnorm, ActionPrimitive::kCount, ActionPrimitive::kCount});
  s.push_back({LayerKind::gap});
  return s;
}

using QNet = nn::Network<float>;

inline QNet make_qnet(const SonoQNetConfig& cfg, std::uint64_t seed) { return QNet(qnet_specs(cfg), seed); }

inline void validate_qnet(const QNet& net) {
  auto out = net.output_shape({1, Observation::kFrames, kImageRows, kImageCols});
  if (out != std::vector<int>{1, ActionPrimitive::kCount}) throw InvalidArgument("network does not map observations to 10 Q-values");
}

// Pixels scaled to [0,1], frames as channels, oldest first.
inline void write_observation(const Observation& obs, float* dst) {
  for (const auto& f : obs.frames) {
    for (std::uint8_t p : f->pixels) *dst++ = static_cast<float>(p) * (1.0f / 255.0f);
  }
}

inline nn::Tensor<float> observation_batch(const std::vector<const Observation*>& obs) {
  if (obs.empty()) throw InvalidArgument("empty observation batch");
  const Image& ref = obs.front()->latest();
  nn::Tensor<float> t({static_cast<int>(obs.size()), Observation::kFrames, ref.rows, ref.cols});
  for (std::size_t i = 0; i < obs.size(); ++i) {
    for (const auto& f : obs[i]->frames)
      if (f->rows != ref.rows || f->cols != ref.cols) throw InvalidArgument("observation frame size mismatch");
    write_observation(*obs[i], t.data.data() + i * t.stride());
  }
  return t;
}

inline QVector q_values(const QNet& net, const Observation& obs) {
  nn::Tensor<float> q = net.infer(observation_batch({&obs}));
  if (q.rank() != 2 || q.c() != ActionPrimitive::kCount) throw InvalidArgument("network output is not 10 Q-values");
  QVector out{};
  for (int a = 0; a < ActionPrimitive::kCount; ++a) {
    out[static_cast<std::size_t>(a)] = q.at(0, a);
    if (!std::isfinite(out[static_cast<std::size_t>(a)])) throw Error("non-finite Q-value");
  }
  return out;
}

using ActionMask = std::array<bool, ActionPrimitive::kCount>;
inline constexpr ActionMask kAllActions{true, true, true, true, true, true, true, true, true, true};

// Lowest index wins ties.
inline int greedy_action(const QVector& q, const ActionMask& mask = kAllActions) {
  int best = -1;
  for (int a = 0; a < ActionPrimitive::kCount; ++a) {
    if (!mask[static_cast<std::size_t>(a)]) continue;
    if (best < 0 || q[static_cast<std::size_t>(a)] > q[static_cast<std::size_t>(best)]) best = a;
  }
  if (best < 0) throw InvalidArgument("every action is masked");
  return best;
}

inline int random_action(std::mt19937_64& rng, const ActionMask& mask = kAllActions) {
  std::vector<int> allowed;
  for (int a = 0; a < ActionPrimitive::kCount; ++a)
    if (mask[static_cast<std::size_t>(a)]) allowed.push_back(a);
  if (allowed.empty()) throw InvalidArgument("every action is masked");
  std::uniform_int_distribution<std::size_t> pick(0, allowed.size() - 1);
  return allowed[pick(rng)];
}

// One uniform draw decides exploration, so the rng advances identically for any Q.
inline int select_action(const QVector& q, double epsilon, std::mt19937_64& rng, const ActionMask& mask = kAllActions) {
  if (!(epsilon >= 0 && epsilon <= 1)) throw InvalidArgument("epsilon must lie in [0,1]");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < epsilon) return random_action(rng, mask);
  return greedy_action(q, mask);
}

inline int select_action(const QNet& net, const Observation& obs, double epsilon, std::mt19937_64& rng,
                         const ActionMask& mask = kAllActions) {
  return select_action(q_values(net, obs), epsilon, rng, mask);
}

// FIFO ring of transitions. Frames are shared, so consecutive transitions cost one image each.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw InvalidArgument("replay capacity must be positive");
    items_.reserve(std::min<std::size_t>(capacity, 1 << 16));
  }

  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t pushed() const { return pushed_; }

  void push(TransitionRecord t) {
    if (items_.size() < capacity_) items_.push_back(std::move(t));
    else items_[head_] = std::move(t);
    head_ = (head_ + 1) % capacity_;
    ++pushed_;
  }

  // Oldest first.
  const TransitionRecord& operator[](std::size_t i) const {
    if (i >= items_.size()) throw InvalidArgument("replay index out of range");
    return items_[items_.size() < capacity_ ? i : (head_ + i) % capacity_];
  }

  // Distinct indices, uniform without replacement (partial Fisher-Yates via a swap map).
  std::vector<std::size_t> sample_indices(std::size_t batch, std::mt19937_64& rng) const {
    if (batch == 0 || batch > items_.size()) throw InvalidArgument("cannot sample that many transitions");
    std::vector<std::size_t> out;
    out.reserve(batch);
    std::vector<std::pair<std::size_t, std::size_t>> swapped;
    auto lookup = [&](std::size_t k) {
      for (const auto& [from, to] : swapped)
        if (from == k) return to;
      return k;
    };
    const std::size_t n = items_.size();
    for (std::size_t i = 0; i < batch; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, n - 1);
      std::size_t j = pick(rng);
      std::size_t vj = lookup(j), vi = lookup(i);
      out.push_back(vj);
      std::erase_if(swapped, [&](const auto& p) { return p.first == j || p.first == i; });
      swapped.emplace_back(j, vi);
    }
    return out;
  }

  std::vector<const TransitionRecord*> sample(std::size_t batch, std::mt19937_64& rng) const {
    std::vector<const TransitionRecord*> out;
    for (std::size_t i : sample_indices(batch, rng)) out.push_back(&(*this)[i]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::vector<TransitionRecord> items_;
  std::size_t head_ = 0;
  std::size_t pushed_ = 0;
};

// y = r for terminal transitions, r + gamma * max_a' Q_target(s', a') otherwise.
inline std::vector<double> td_targets(const std::vector<const TransitionRecord*>& batch, const QNet& target, double gamma) {
  if (batch.empty()) throw InvalidArgument("empty batch");
  std::vector<double> y(batch.size());
  std::vector<const Observation*> next;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    y[i] = batch[i]->reward;
    if (!batch[i]->terminal) {
      next.push_back(&batch[i]->next_observation);
      where.push_back(i);
    }
  }
  if (!next.empty()) {
    nn::Tensor<float> q = target.infer(observation_batch(next));
    for (std::size_t k = 0; k < next.size(); ++k) {
      double best = q.at(static_cast<int>(k), 0);
      for (int a = 1; a < q.c(); ++a) best = std::max<double>(best, q.at(static_cast<int>(k), a));
      y[where[k]] += gamma * best;
    }
  }
  return y;
}

struct TrainSchedule {
  int train_every = 10;
  int batch_size = 32;
  int target_sync = 1000;  // training steps
  double gamma = 0.9;
  int warm_start_iterations = 1000;  // training steps on expert experience
  double warm_start_lr = 0.01;
  double warm_start_epsilon = 0.3;  // random-action share while collecting expert experience
  int iterations = 20000;           // main-phase training steps
  double epsilon_start = 0.5;
  double epsilon_end = 0.1;
  double epsilon_decay_fraction = 0.5;  // of the main-phase interaction steps
  std::vector<double> lr_values{0.01, 0.001, 5e-4, 1e-4};
  std::vector<double> lr_breakpoints{0.2, 0.4, 0.55};  // fractions of the main-phase training steps
  std::size_t replay_capacity = 20000;

  static TrainSchedule paper_scale() {
    TrainSchedule s;
    s.warm_start_iterations = 10000;
    s.iterations = 200000;
    s.replay_capacity = 100000;
    return s;
  }

  long main_interactions() const { return static_cast<long>(iterations) * train_every; }

  void validate() const {
    if (train_every <= 0 || batch_size <= 0 || target_sync <= 0 || warm_start_iterations < 0 || iterations < 0 ||
        replay_capacity == 0)
      throw InvalidArgument("schedule counters must be positive");
    if (!(gamma >= 0 && gamma < 1)) throw InvalidArgument("gamma must lie in [0,1)");
    if (!(epsilon_end >= 0 && epsilon_end <= epsilon_start && epsilon_start <= 1))
      throw InvalidArgument("epsilon must decay within [0,1]");
    if (!(warm_start_epsilon >= 0 && warm_start_epsilon <= 1)) throw InvalidArgument("warm-start epsilon must lie in [0,1]");
    if (!(epsilon_decay_fraction > 0 && epsilon_decay_fraction <= 1)) throw InvalidArgument("epsilon decay fraction must lie in (0,1]");
    if (lr_values.empty() || lr_breakpoints.size() + 1 != lr_values.size())
      throw InvalidArgument("learning-rate ladder needs one more value than breakpoints");
    if (!std::is_sorted(lr_breakpoints.begin(), lr_breakpoints.end())) throw InvalidArgument("lr breakpoints must increase");
  }

  // Piecewise linear, non-increasing in the main-phase interaction count.
  double epsilon(long interaction) const {
    double span = epsilon_decay_fraction * static_cast<double>(std::max(1L, main_interactions()));
    double t = std::clamp(static_cast<double>(interaction) / span, 0.0, 1.0);
    return std::lerp(epsilon_start, epsilon_end, t);
  }

  double learning_rate(long training_step) const {
    double frac = iterations > 0 ? static_cast<double>(training_step) / iterations : 0.0;
    std::size_t k = 0;
    while (k < lr_breakpoints.size() && frac >= lr_breakpoints[k]) ++k;
    return lr_values[k];
  }
};

inline void to_json(nlohmann::json& j, const TrainSchedule& s) {
  j = nlohmann::json{{"train_every", s.train_every},
                     {"batch_size", s.batch_size},
                     {"target_sync", s.target_sync},
                     {"gamma", s.gamma},
                     {"warm_start_iterations", s.warm_start_iterations},
                     {"warm_start_lr", s.warm_start_lr},
                     {"warm_start_epsilon", s.warm_start_epsilon},
                     {"iterations", s.iterations},
                     {"epsilon_start", s.epsilon_start},
                     {"epsilon_end", s.epsilon_end},
                     {"epsilon_decay_fraction", s.epsilon_decay_fraction},
                     {"lr_values", s.lr_values},
                     {"lr_breakpoints", s.lr_breakpoints},
                     {"replay_capacity", s.replay_capacity}};
}

inline void from_json(const nlohmann::json& j, TrainSchedule& s) {
  if (j.contains("scale")) {
    std::string scale = j.at("scale").get<std::string>();
    if (scale == "paper") s = TrainSchedule::paper_scale();
    else if (scale != "desk") throw InvalidArgument("schedule.scale must be desk or paper");
  }
  for (const auto& [key, value] : j.items()) {
    if (key == "scale") continue;
    else if (key == "train_every") s.train_every = value.get<int>();
    else if (key == "batch_size") s.batch_size = value.get<int>();
    else if (key == "target_sync") s.target_sync = value.get<int>();
    else if (key == "gamma") s.gamma = value.get<double>();
    else if (key == "warm_start_iterations") s.warm_start_iterations = value.get<int>();
    else if (key == "warm_start_lr") s.warm_start_lr = value.get<double>();
    else if (key == "warm_start_epsilon") s.warm_start_epsilon = value.get<double>();
    else if (key == "iterations") s.iterations = value.get<int>();
    else if (key == "epsilon_start") s.epsilon_start = value.get<double>();
    else if (key == "epsilon_end") s.epsilon_end = value.get<double>();
    else if (key == "epsilon_decay_fraction") s.epsilon_decay_fraction = value.get<double>();
    else if (key == "lr_values") s.lr_values = value.get<std::vector<double>>();
    else if (key == "lr_breakpoints") s.lr_breakpoints = value.get<std::vector<double>>();
    else if (key == "replay_capacity") s.replay_capacity = value.get<std::size_t>();
    else throw InvalidArgument("unknown schedule key: " + key);
  }
  s.validate();
}

enum class TrainPhase { warm_start, main };

struct TrainProgress {
  TrainPhase phase = TrainPhase::warm_start;
  long training_step = 0;  // within the phase
  long interactions = 0;   // total
  long episodes = 0;
  double loss = 0;
  double epsilon = 0;
  double lr = 0;
};

struct TrainResult {
  QNet net;
  std::vector<double> losses;  // one per training step, both phases
  std::vector<NavLogRow> navlog;
  long interactions = 0;
  long episodes = 0;
};

// Drives one or more environments (episodes rotate through them) and owns both networks
// and the replay memory. Single-threaded and fully determined by the seed.
class DqnTrainer {
 public:
  DqnTrainer(std::vector<NavigationEnv*> envs, SonoQNetConfig net_cfg, TrainSchedule schedule, std::uint64_t seed,
             bool record_navlog = false)
      : envs_(std::move(envs)),
        schedule_(std::move(schedule)),
        seed_(seed),
        rng_(mix_seed(seed, 0x71)),
        online_(make_qnet(net_cfg, mix_seed(seed, 0x4e))),
        target_(online_),
        replay_(schedule_.replay_capacity),
        optimizer_({nn::OptimizerKind::adam, schedule_.warm_start_lr}),
        record_navlog_(record_navlog) {
    if (envs_.empty()) throw InvalidArgument("training needs at least one environment");
    for (auto* e : envs_) {
      if (!e) throw InvalidArgument("null environment");
      if (e->config().mode != EnvMode::train || !e->goal()) throw InvalidArgument("training environments need train mode and a goal");
    }
    schedule_.validate();
    online_.set_check_finite(true);
  }

  const QNet& online() const { return online_; }
  const QNet& target() const { return target_; }
  const ReplayBuffer& replay() const { return replay_; }
  const TrainSchedule& schedule() const { return schedule_; }
  const std::vector<double>& losses() const { return losses_; }
  const std::vector<NavLogRow>& navlog() const { return navlog_; }
  long interactions() const { return interactions_; }
  long episodes() const { return episodes_; }
  long total_training_steps() const { return static_cast<long>(losses_.size()); }
  std::size_t target_syncs() const { return target_syncs_; }

  void set_progress(std::function<void(const TrainProgress&)> cb, long every = 100) {
    progress_ = std::move(cb);
    progress_every_ = std::max(1L, every);
  }

  // One environment step with the phase's behaviour policy; returns the transition.
  const TransitionRecord& interact(TrainPhase phase) {
    NavigationEnv& env = current_env();
    if (env.terminal()) begin_episode();
    NavigationEnv& e = current_env();
    const ActionMask& mask = e.config().allowed_actions;
    int action;
    if (phase == TrainPhase::warm_start) {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      action = u(rng_) < schedule_.warm_start_epsilon ? random_action(rng_, mask) : e.expert_action();
    } else {
      action = select_action(online_, e.observation(), schedule_.epsilon(main_interactions_), rng_, mask);
      ++main_interactions_;
    }
    StepInfo info = e.step(action);
    ++interactions_;
    episode_nav_reward_ += info.nav_reward;
    replay_.push(info.transition);
    if (info.transition.terminal) finish_episode(info);
    return replay_[replay_.size() - 1];
  }

  // One optimizer step on a replay batch; returns the loss.
  double train_step(double lr) {
    auto batch = replay_.sample(static_cast<std::size_t>(schedule_.batch_size), rng_);
    std::vector<double> y = td_targets(batch, target_, schedule_.gamma);
    std::vector<const Observation*> obs;
    std::vector<int> actions;
    for (const auto* t : batch) {
      obs.push_back(&t->observation);
      actions.push_back(t->action);
    }
    online_.zero_grad();
    nn::Tensor<float> q = online_.forward(observation_batch(obs), nn::Mode::train);
    auto loss = nn::selected_squared_error(q, actions, y);
    if (!std::isfinite(loss.loss))
      throw Error("non-finite TD loss at training step " + std::to_string(losses_.size()) + " (lr " + std::to_string(lr) +
                  ", max |target| " + std::to_string(max_abs(y)) + ")");
    online_.backward_params(loss.grad);
    optimizer_.set_lr(lr);
    optimizer_.step(online_.params());
    losses_.push_back(loss.loss);
    if (losses_.size() % static_cast<std::size_t>(schedule_.target_sync) == 0) sync_target();
    return loss.loss;
  }

  void sync_target() {
    target_ = online_;
    ++target_syncs_;
  }

  void run_phase(TrainPhase phase) {
    const long steps = phase == TrainPhase::warm_start ? schedule_.warm_start_iterations : schedule_.iterations;
    for (long k = 0; k < steps; ++k) {
      for (int i = 0; i < schedule_.train_every; ++i) interact(phase);
      while (replay_.size() < static_cast<std::size_t>(schedule_.batch_size)) interact(phase);
      double lr = phase == TrainPhase::warm_start ? schedule_.warm_start_lr : schedule_.learning_rate(k);
      double loss = train_step(lr);
      if (progress_ && ((k + 1) % progress_every_ == 0 || k + 1 == steps)) {
        TrainProgress p{phase, k + 1, interactions_, episodes_, loss,
                        phase == TrainPhase::main ? schedule_.epsilon(main_interactions_) : schedule_.warm_start_epsilon, lr};
        progress_(p);
      }
    }
  }

  TrainResult run() {
    run_phase(TrainPhase::warm_start);
    run_phase(TrainPhase::main);
    return {online_, losses_, navlog_, interactions_, episodes_};
  }

 private:
  static double max_abs(const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
  }

  NavigationEnv& current_env() { return *envs_[static_cast<std::size_t>(episodes_) % envs_.size()]; }

  void begin_episode() {
    NavigationEnv& env = current_env();
    env.reset(mix_seed(seed_, static_cast<std::uint64_t>(episodes_) + 0x1000));
    episode_nav_reward_ = 0;
    if (record_navlog_) start_conf_ = roi_means(confidence_map(env.last_image(), env.config().confidence));
  }

  void finish_episode(const StepInfo& last) {
    if (record_navlog_) {
      NavigationEnv& env = current_env();
      auto end_conf = roi_means(confidence_map(env.last_image(), env.config().confidence));
      NavLogRow row;
      row.episode = static_cast<int>(episodes_);
      // Per-step means; the confidence change telescopes to (end - start) / steps.
      const double steps = std::max(1, env.steps());
      row.r_nav = episode_nav_reward_ / steps;
      row.d_mm = last.error->d_mm;
      row.theta_deg = last.error->theta_deg;
      for (std::size_t k = 0; k < kRoiCount; ++k) row.dc[k] = (end_conf[k] - start_conf_[k]) / steps;
      navlog_.push_back(row);
    }
    ++episodes_;
  }

  std::vector<NavigationEnv*> envs_;
  TrainSchedule schedule_;
  std::uint64_t seed_;
  std::mt19937_64 rng_;
  QNet online_, target_;
  ReplayBuffer replay_;
  nn::Optimizer<float> optimizer_;
  bool record_navlog_;
  std::vector<double> losses_;
  std::vector<NavLogRow> navlog_;
  long interactions_ = 0, main_interactions_ = 0, episodes_ = 0;
  std::size_t target_syncs_ = 0;
  double episode_nav_reward_ = 0;
  std::array<double, kRoiCount> start_conf_{};
  std::function<void(const TrainProgress&)> progress_;
  long progress_every_ = 100;
};

inline TrainResult train_rl(std::vector<NavigationEnv*> envs, const SonoQNetConfig& net_cfg, const TrainSchedule& schedule,
                            std::uint64_t seed, bool record_navlog = false) {
  DqnTrainer trainer(std::move(envs), net_cfg, schedule, seed, record_navlog);
  return trainer.run();
}

// Greedy rollout used by evaluation and the toy-task harness.
struct RolloutResult {
  Pose final_pose;
  int steps = 0;
  TerminationCause cause = TerminationCause::none;
  std::vector<TrajectoryRow> trajectory;
};

inline RolloutResult greedy_rollout(NavigationEnv& env, const QNet& net, std::uint64_t seed) {
  env.reset(seed);
  RolloutResult r;
  while (!env.terminal()) {
    int a = greedy_action(q_values(net, env.observation()), env.config().allowed_actions);
    StepInfo info = env.step(a);
    r.trajectory.push_back(trajectory_row(info, env.steps(), env.config().reward.roi_index));
    r.cause = info.transition.cause;
  }
  r.final_pose = env.pose();
  r.steps = env.steps();
  return r;
}

}  // namespace sononav

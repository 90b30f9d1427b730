#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>

#include "sononav/rl.hpp"
#include "support.hpp"

using namespace sononav;
using sononav::testing::make_env;

namespace {

TrainSchedule tiny_schedule() {
  TrainSchedule s;
  s.train_every = 2;
  s.batch_size = 4;
  s.target_sync = 3;
  s.warm_start_iterations = 3;
  s.iterations = 4;
  s.replay_capacity = 64;
  return s;
}

SonoQNetConfig tiny_net() {
  SonoQNetConfig c;
  c.widths = {2, 2, 2, 2};
  return c;
}

std::vector<float> flat_params(const QNet& net) {
  QNet copy = net;
  std::vector<float> out;
  for (auto& p : copy.params()) out.insert(out.end(), p.value->begin(), p.value->end());
  return out;
}

TransitionRecord record_with_reward(double r) {
  TransitionRecord t;
  t.reward = r;
  return t;
}

}  // namespace

TEST(QNet, ShapeChain) {
  QNet net = make_qnet(SonoQNetConfig{}, 1);
  std::vector<int> shape{1, 4, 150, 150};
  std::vector<int> sizes;
  for (std::size_t i = 0; i < net.size(); ++i) {
    shape = net.layer(i).output_shape(shape);
    if (net.layer(i).spec().kind == nn::LayerKind::maxpool2) sizes.push_back(shape[2]);
  }
  EXPECT_EQ(sizes, (std::vector<int>{75, 37, 18, 9}));
  EXPECT_EQ(shape, (std::vector<int>{1, 10}));
  EXPECT_NO_THROW(validate_qnet(net));
  EXPECT_THROW(validate_qnet(QNet({{nn::LayerKind::gap}}, 1)), InvalidArgument);
  SonoQNetConfig bad;
  bad.widths = {8, 16, 32};
  EXPECT_THROW(make_qnet(bad, 1), InvalidArgument);
}

TEST(QNet, OutputIsSpatialMeanOfScoreMaps) {
  QNet net = make_qnet(tiny_net(), 2);
  std::mt19937_64 rng(3);
  Observation obs;
  for (auto& f : obs.frames) f = std::make_shared<const Image>(sononav::testing::random_image(150, 150, rng));
  nn::Tensor<float> h = observation_batch({&obs});
  for (std::size_t i = 0; i + 1 < net.size(); ++i) h = net.layer(i).infer(h);
  ASSERT_EQ(h.shape, (std::vector<int>{1, 10, 9, 9}));
  QVector q = q_values(net, obs);
  for (int a = 0; a < 10; ++a) {
    double mean = 0;
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 9; ++x) mean += h.at(0, a, y, x);
    EXPECT_NEAR(q[static_cast<std::size_t>(a)], mean / 81, 1e-5);
  }
}

TEST(Policy, GreedyTiesAndMask) {
  QVector q{};
  q[3] = 1;
  q[7] = 1;
  EXPECT_EQ(greedy_action(q), 3);
  ActionMask m = kAllActions;
  m[3] = false;
  EXPECT_EQ(greedy_action(q, m), 7);
  ActionMask none{};
  EXPECT_THROW(greedy_action(q, none), InvalidArgument);
}

TEST(Policy, EpsilonGreedyFrequency) {
  QVector q{};
  q[4] = 5;
  std::mt19937_64 rng(5);
  const int n = 40000;
  int off = 0;
  for (int i = 0; i < n; ++i) off += select_action(q, 0.3, rng) != 4;
  // Exploration picks the greedy action one time in ten.
  EXPECT_NEAR(static_cast<double>(off) / n, 0.27, 0.01);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(select_action(q, 0.0, rng), 4);
  std::array<int, 10> counts{};
  for (int i = 0; i < n; ++i) ++counts[static_cast<std::size_t>(select_action(q, 1.0, rng))];
  for (int c : counts) EXPECT_NEAR(c, n / 10.0, 0.05 * n / 10.0 * 3);
  EXPECT_THROW(select_action(q, 1.5, rng), InvalidArgument);
}

TEST(Replay, FifoEviction) {
  ReplayBuffer rb(3);
  for (int i = 0; i < 5; ++i) rb.push(record_with_reward(i));
  EXPECT_EQ(rb.size(), 3u);
  EXPECT_EQ(rb.pushed(), 5u);
  EXPECT_EQ(rb[0].reward, 2);
  EXPECT_EQ(rb[1].reward, 3);
  EXPECT_EQ(rb[2].reward, 4);
  EXPECT_THROW(rb[3], InvalidArgument);
  EXPECT_THROW(ReplayBuffer(0), InvalidArgument);
}

TEST(Replay, SamplesAreDistinctAndUniform) {
  ReplayBuffer rb(50);
  for (int i = 0; i < 20; ++i) rb.push(record_with_reward(i));
  std::mt19937_64 rng(6);
  std::array<int, 20> hits{};
  const int trials = 20000;
  for (int t = 0; t < trials; ++t) {
    auto idx = rb.sample_indices(5, rng);
    std::set<std::size_t> uniq(idx.begin(), idx.end());
    ASSERT_EQ(uniq.size(), 5u);
    for (auto i : idx) ++hits[i];
  }
  double expected = trials * 5 / 20.0;
  double chi2 = 0;
  for (int h : hits) chi2 += (h - expected) * (h - expected) / expected;
  EXPECT_LT(chi2, 36.19);  // upper 1% point, 19 degrees of freedom
  auto all = rb.sample_indices(20, rng);
  EXPECT_EQ(std::set<std::size_t>(all.begin(), all.end()).size(), 20u);
  EXPECT_THROW(rb.sample_indices(21, rng), InvalidArgument);
}

TEST(TdTargets, MatchesHandComputation) {
  QNet target = make_qnet(tiny_net(), 7);
  // Zero every weight so each Q-value equals the bias of the final batch norm.
  for (auto& p : target.params()) std::fill(p.value->begin(), p.value->end(), 0.0f);
  auto params = target.params();
  auto& beta = *params.back().value;
  ASSERT_EQ(beta.size(), 10u);
  beta[3] = 2.0f;
  beta[6] = -4.0f;
  std::mt19937_64 rng(8);
  Observation obs;
  for (auto& f : obs.frames) f = std::make_shared<const Image>(sononav::testing::random_image(150, 150, rng));
  TransitionRecord live, done;
  live.reward = 1.0;
  live.next_observation = obs;
  done.reward = -0.5;
  done.terminal = true;
  auto y = td_targets({&live, &done}, target, 0.9);
  EXPECT_NEAR(y[0], 2.8, 1e-6);
  EXPECT_EQ(y[1], -0.5);
  EXPECT_THROW(td_targets({}, target, 0.9), InvalidArgument);
}

TEST(Schedule, EpsilonAndLearningRate) {
  TrainSchedule s;
  EXPECT_DOUBLE_EQ(s.epsilon(0), 0.5);
  EXPECT_DOUBLE_EQ(s.epsilon(s.main_interactions()), 0.1);
  double prev = 1;
  for (long i = 0; i <= s.main_interactions(); i += 997) {
    double e = s.epsilon(i);
    EXPECT_LE(e, prev);
    EXPECT_GE(e, 0.1);
    prev = e;
  }
  EXPECT_DOUBLE_EQ(s.learning_rate(0), 0.01);
  EXPECT_DOUBLE_EQ(s.learning_rate(static_cast<long>(0.2 * s.iterations)), 0.001);
  EXPECT_DOUBLE_EQ(s.learning_rate(s.iterations - 1), 1e-4);
}

TEST(Schedule, JsonStrictness) {
  TrainSchedule s = nlohmann::json{{"scale", "paper"}, {"gamma", 0.8}}.get<TrainSchedule>();
  EXPECT_EQ(s.iterations, 200000);
  EXPECT_EQ(s.gamma, 0.8);
  EXPECT_THROW(nlohmann::json({{"gama", 0.8}}).get<TrainSchedule>(), InvalidArgument);
  EXPECT_THROW(nlohmann::json({{"gamma", 1.0}}).get<TrainSchedule>(), InvalidArgument);
  EXPECT_THROW(nlohmann::json({{"scale", "huge"}}).get<TrainSchedule>(), InvalidArgument);
  TrainSchedule round = nlohmann::json(s).get<TrainSchedule>();
  EXPECT_EQ(nlohmann::json(round), nlohmann::json(s));
}

TEST(Trainer, RejectsInferEnvironments) {
  EnvConfig cfg;
  cfg.mode = EnvMode::infer;
  auto env = make_env(ViewLabel::PSL, cfg);
  EXPECT_THROW(DqnTrainer({&env}, tiny_net(), tiny_schedule(), 1), InvalidArgument);
  EXPECT_THROW(DqnTrainer({}, tiny_net(), tiny_schedule(), 1), InvalidArgument);
}

TEST(Trainer, TargetStaysFrozenBetweenSyncs) {
  auto env = make_env(ViewLabel::PSAP);
  TrainSchedule s = tiny_schedule();
  DqnTrainer trainer({&env}, tiny_net(), s, 9);
  for (int i = 0; i < 8; ++i) trainer.interact(TrainPhase::warm_start);
  auto frozen = flat_params(trainer.target());
  trainer.train_step(0.01);
  trainer.train_step(0.01);
  EXPECT_EQ(flat_params(trainer.target()), frozen);
  EXPECT_NE(flat_params(trainer.online()), frozen);
  trainer.train_step(0.01);
  EXPECT_EQ(trainer.target_syncs(), 1u);
  EXPECT_EQ(flat_params(trainer.target()), flat_params(trainer.online()));
}

TEST(Trainer, DeterministicForASeed) {
  auto a_env = make_env(ViewLabel::PSAP);
  auto b_env = make_env(ViewLabel::PSAP);
  TrainResult a = train_rl({&a_env}, tiny_net(), tiny_schedule(), 11, true);
  TrainResult b = train_rl({&b_env}, tiny_net(), tiny_schedule(), 11, true);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(flat_params(a.net), flat_params(b.net));
  EXPECT_EQ(a.interactions, b.interactions);
  EXPECT_EQ(a.losses.size(), 7u);
  // Seven steps of two interactions, plus two more to fill the first batch of four.
  EXPECT_EQ(a.interactions, 16);
  ASSERT_EQ(a.navlog.size(), static_cast<std::size_t>(a.episodes));
  for (const auto& row : a.navlog) {
    EXPECT_LE(std::abs(row.r_nav), 1.0);
    EXPECT_GE(row.d_mm, 0.0);
  }
}

TEST(Trainer, WarmStartFollowsTheExpertMostly) {
  auto env = make_env(ViewLabel::PSAP);
  TrainSchedule s = tiny_schedule();
  s.replay_capacity = 1000;
  DqnTrainer trainer({&env}, tiny_net(), s, 12);
  int expert = 0, total = 400;
  for (int i = 0; i < total; ++i) {
    // The trainer's env state before the step determines the expert action.
    if (env.terminal()) {
      trainer.interact(TrainPhase::warm_start);
      continue;
    }
    int want = env.expert_action();
    expert += trainer.interact(TrainPhase::warm_start).action == want;
  }
  double frac = static_cast<double>(expert) / total;
  // 0.7 expert plus 0.3 times a one-in-ten random match.
  EXPECT_GT(frac, 0.65);
  EXPECT_LT(frac, 0.83);
}

TEST(Training, LossDecreasesOnFixedBatch) {
  QNet net = make_qnet(tiny_net(), 13);
  std::mt19937_64 rng(14);
  std::vector<Observation> obs(6);
  for (auto& o : obs)
    for (auto& f : o.frames) f = std::make_shared<const Image>(sononav::testing::random_image(150, 150, rng));
  std::vector<const Observation*> ptrs;
  for (auto& o : obs) ptrs.push_back(&o);
  auto x = observation_batch(ptrs);
  std::vector<int> actions{0, 1, 2, 3, 4, 5};
  std::vector<double> y{1, -1, 0.5, 2, -0.5, 0};
  nn::Optimizer<float> opt({nn::OptimizerKind::adam, 0.01});
  double first = 0, last = 0;
  for (int step = 0; step < 60; ++step) {
    net.zero_grad();
    auto r = nn::selected_squared_error(net.forward(x, nn::Mode::train), actions, y);
    if (step == 0) first = r.loss;
    last = r.loss;
    net.backward(r.grad);
    opt.step(net.params());
  }
  EXPECT_LT(last, 0.5 * first);
}

TEST(Rollout, TrajectoryMatchesSteps) {
  EnvConfig cfg;
  cfg.max_steps = 7;
  auto env = make_env(ViewLabel::PSL, cfg);
  QNet net = make_qnet(tiny_net(), 15);
  RolloutResult r = greedy_rollout(env, net, 16);
  EXPECT_EQ(static_cast<int>(r.trajectory.size()), r.steps);
  EXPECT_NE(r.cause, TerminationCause::none);
  EXPECT_LE(r.steps, 7);
}

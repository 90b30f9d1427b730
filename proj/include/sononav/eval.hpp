#pragma once

// Run configuration, evaluation harness and report formatting.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <mutex>
#include <exception>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "sononav/classifier.hpp"
#include "sononav/confidence.hpp"
#include "sononav/dualagent.hpp"
#include "sononav/env.hpp"
#include "sononav/phantom.hpp"
#include "sononav/reward.hpp"
#include "sononav/rl.hpp"
#include "sononav/ssim.hpp"

namespace sononav {

// ---- configuration ----

struct AsrSetting {
  int roi_index = 0;
  int lambda = 1;
};

struct AsrConfig {
  bool enabled = false;
  AsrSetting fallback;                   // used for views without their own entry
  std::map<ViewLabel, AsrSetting> views;  // usually filled from roi-select output

  AsrSetting for_view(ViewLabel v) const {
    auto it = views.find(v);
    return it == views.end() ? fallback : it->second;
  }
};

inline void from_json(const nlohmann::json& j, AsrSetting& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "roi_index") s.roi_index = value.get<int>();
    else if (key == "lambda") s.lambda = value.get<int>();
    else throw InvalidArgument("unknown asr key: " + key);
  }
  roi_by_index(s.roi_index);
  if (s.lambda != 1 && s.lambda != -1) throw InvalidArgument("asr lambda must be +1 or -1");
}

inline void to_json(nlohmann::json& j, const AsrConfig& c) {
  j = nlohmann::json{{"enabled", c.enabled}, {"roi_index", c.fallback.roi_index}, {"lambda", c.fallback.lambda}};
  if (!c.views.empty()) {
    nlohmann::json v;
    for (const auto& [view, s] : c.views) v[to_string(view)] = {{"roi_index", s.roi_index}, {"lambda", s.lambda}};
    j["views"] = v;
  }
}

inline void from_json(const nlohmann::json& j, AsrConfig& c) {
  nlohmann::json fallback = nlohmann::json::object();
  for (const auto& [key, value] : j.items()) {
    if (key == "enabled") c.enabled = value.get<bool>();
    else if (key == "roi_index" || key == "lambda") fallback[key] = value;
    else if (key == "views") {
      for (const auto& [view, s] : value.items()) {
        ViewLabel v = view_from_string(view);
        if (v == ViewLabel::BG) throw InvalidArgument("asr views must be standard views");
        c.views[v] = s.get<AsrSetting>();
      }
    } else throw InvalidArgument("unknown asr key: " + key);
  }
  AsrSetting s = c.fallback;
  for (const auto& [key, value] : fallback.items()) {
    if (key == "roi_index") s.roi_index = value.get<int>();
    else s.lambda = value.get<int>();
  }
  c.fallback = nlohmann::json{{"roi_index", s.roi_index}, {"lambda", s.lambda}}.get<AsrSetting>();
}

struct NavigationSettings {
  int round_limit = 120;
  int budget = 240;
  double probability_threshold = 0.5;
};

inline void to_json(nlohmann::json& j, const NavigationSettings& s) {
  j = nlohmann::json{{"round_limit", s.round_limit}, {"budget", s.budget}, {"probability_threshold", s.probability_threshold}};
}
inline void from_json(const nlohmann::json& j, NavigationSettings& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "round_limit") s.round_limit = value.get<int>();
    else if (key == "budget") s.budget = value.get<int>();
    else if (key == "probability_threshold") s.probability_threshold = value.get<double>();
    else throw InvalidArgument("unknown navigation key: " + key);
  }
  if (s.round_limit <= 0 || s.budget < s.round_limit) throw InvalidArgument("navigation budget must cover at least one round");
}

enum class EvalSplit { intra, inter };

inline const std::vector<std::string>& all_methods() {
  static const std::vector<std::string> m{"RL", "RL+ASR", "RL+DL", "RL+ASR+DL"};
  return m;
}

inline bool method_uses_asr(const std::string& m) { return m.find("ASR") != std::string::npos; }
inline bool method_uses_dl(const std::string& m) { return m.find("DL") != std::string::npos; }

struct EvalConfig {
  int episodes = 24;
  int tests_per_phantom = 3;
  std::vector<ViewLabel> views{ViewLabel::PSL, ViewLabel::PSAP, ViewLabel::TSP};
  std::vector<std::string> methods = all_methods();
  EvalSplit split = EvalSplit::intra;
  bool reference_rows = false;

  int phantom_count() const { return (episodes + tests_per_phantom - 1) / tests_per_phantom; }
};

inline void to_json(nlohmann::json& j, const EvalConfig& c) {
  std::vector<std::string> views;
  for (auto v : c.views) views.push_back(to_string(v));
  j = nlohmann::json{{"episodes", c.episodes}, {"tests_per_phantom", c.tests_per_phantom}, {"views", views},
                     {"methods", c.methods}, {"split", c.split == EvalSplit::intra ? "intra" : "inter"},
                     {"reference_rows", c.reference_rows}};
}

inline void from_json(const nlohmann::json& j, EvalConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "episodes") c.episodes = value.get<int>();
    else if (key == "tests_per_phantom") c.tests_per_phantom = value.get<int>();
    else if (key == "views") {
      c.views.clear();
      for (const auto& v : value) {
        ViewLabel l = view_from_string(v.get<std::string>());
        if (l == ViewLabel::BG) throw InvalidArgument("evaluation views must be standard views");
        c.views.push_back(l);
      }
    } else if (key == "methods") {
      c.methods = value.get<std::vector<std::string>>();
      for (const auto& m : c.methods)
        if (std::find(all_methods().begin(), all_methods().end(), m) == all_methods().end())
          throw InvalidArgument("unknown method: " + m);
    } else if (key == "split") {
      std::string s = value.get<std::string>();
      if (s != "intra" && s != "inter") throw InvalidArgument("eval.split must be intra or inter");
      c.split = s == "intra" ? EvalSplit::intra : EvalSplit::inter;
    } else if (key == "reference_rows") c.reference_rows = value.get<bool>();
    else throw InvalidArgument("unknown eval key: " + key);
  }
  if (c.episodes <= 0 || c.tests_per_phantom <= 0 || c.views.empty() || c.methods.empty())
    throw InvalidArgument("evaluation needs at least one episode, view and method");
}

struct RunConfig {
  PhantomSpec phantom;
  ImageSpec image;
  RewardConfig reward;
  AsrConfig asr;
  SonoQNetConfig net;
  TrainSchedule schedule;
  ConfidenceParams confidence;
  DatasetSpec dataset;
  ClassifierConfig classifier;
  NavigationSettings navigation;
  EvalConfig eval;

  // Environment settings for one target view.
  EnvConfig env_config(EnvMode mode, ViewLabel view, bool asr_on) const {
    EnvConfig e;
    e.mode = mode;
    e.max_steps = navigation.round_limit;
    e.reward = reward;
    e.image = image;
    e.confidence = confidence;
    AsrSetting s = asr.for_view(view);
    e.reward.asr_enabled = asr_on;
    e.reward.roi_index = s.roi_index;
    e.reward.lambda = s.lambda;
    return e;
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"phantom", c.phantom}, {"image", c.image},     {"reward", c.reward},
                     {"asr", c.asr},         {"net", c.net},         {"schedule", c.schedule},
                     {"confidence", c.confidence}, {"dataset", c.dataset}, {"classifier", c.classifier},
                     {"navigation", c.navigation}, {"eval", c.eval}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw InvalidArgument("run config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key == "phantom") c.phantom = value.get<PhantomSpec>();
    else if (key == "image") c.image = value.get<ImageSpec>();
    else if (key == "reward") c.reward = value.get<RewardConfig>();
    else if (key == "asr") c.asr = value.get<AsrConfig>();
    else if (key == "net") c.net = value.get<SonoQNetConfig>();
    else if (key == "schedule") c.schedule = value.get<TrainSchedule>();
    else if (key == "confidence") c.confidence = value.get<ConfidenceParams>();
    else if (key == "dataset") c.dataset = value.get<DatasetSpec>();
    else if (key == "classifier") c.classifier = value.get<ClassifierConfig>();
    else if (key == "navigation") c.navigation = value.get<NavigationSettings>();
    else if (key == "eval") c.eval = value.get<EvalConfig>();
    else throw InvalidArgument("unknown config section: " + key);
  }
  c.phantom.validate();
  c.image.validate();
  c.reward.validate();
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifact("cannot open config: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument(std::string("config is not valid JSON: ") + e.what());
  }
  try {
    return j.get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad config value: ") + e.what());
  }
}

// ---- scenes and models ----

struct Scene {
  std::shared_ptr<const VoxelVolume> volume;
  std::shared_ptr<const SkinSurface> surface;
  GoalPoseSet goals;
};

inline Scene make_scene(const PhantomSpec& spec) {
  Phantom p = generate_phantom(spec);
  return {std::make_shared<const VoxelVolume>(std::move(p.volume)), std::make_shared<const SkinSurface>(std::move(p.surface)),
          std::move(p.goals)};
}

inline Scene make_scene(VoxelVolume volume, GoalPoseSet goals) {
  auto vol = std::make_shared<const VoxelVolume>(std::move(volume));
  auto surf = std::make_shared<const SkinSurface>(extract_surface(*vol));
  return {vol, surf, std::move(goals)};
}

// Test phantom for evaluation episode group `index`: the training geometry with a new
// tissue-speckle seed (intra) or an unseen anatomical variant (inter).
inline PhantomSpec test_phantom_spec(const PhantomSpec& base, EvalSplit split, int index, std::uint64_t seed) {
  std::uint64_t s = mix_seed(seed, 0x7e57 + static_cast<std::uint64_t>(index));
  if (split == EvalSplit::inter) return base.perturbed(s);
  PhantomSpec p = base;
  p.seed = s;
  return p;
}

inline std::string qnet_filename(ViewLabel v, bool asr) {
  std::string name = to_string(v);
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return "qnet_" + name + (asr ? "_asr" : "") + ".snet";
}

inline constexpr const char* kClassifierFilename = "classifier.snet";

struct ModelSet {
  std::map<std::pair<ViewLabel, bool>, QNet> qnets;  // (view, asr)
  std::optional<ClassifierNet> classifier;

  const QNet& qnet(ViewLabel v, bool asr) const {
    auto it = qnets.find({v, asr});
    if (it == qnets.end()) throw MissingArtifact("no Q-network for " + to_string(v) + (asr ? " with ASR" : ""));
    return it->second;
  }
};

// Loads exactly the checkpoints the configured methods and views need.
inline ModelSet load_models(const std::string& dir, const EvalConfig& cfg) {
  namespace fs = std::filesystem;
  ModelSet m;
  for (const auto& method : cfg.methods) {
    for (ViewLabel v : cfg.views) {
      bool asr = method_uses_asr(method);
      if (m.qnets.count({v, asr})) continue;
      fs::path p = fs::path(dir) / qnet_filename(v, asr);
      if (!fs::exists(p)) throw MissingArtifact("missing checkpoint " + p.string());
      QNet net = QNet::load(p.string());
      validate_qnet(net);
      m.qnets.emplace(std::make_pair(v, asr), std::move(net));
    }
    if (method_uses_dl(method) && !m.classifier) {
      fs::path p = fs::path(dir) / kClassifierFilename;
      if (!fs::exists(p)) throw MissingArtifact("missing checkpoint " + p.string());
      m.classifier = ClassifierNet::load(p.string());
      classifier_input_mode(*m.classifier);
    }
  }
  return m;
}

// ---- evaluation ----

struct EpisodeRecord {
  std::string method;
  ViewLabel view = ViewLabel::PSL;
  int episode = 0;
  int phantom = 0;
  std::uint64_t seed = 0;
  double d_mm = 0, theta_deg = 0, ssim = 0;
  int steps = 0, rounds = 0;
  std::string stop;
};

struct Stat {
  double mean = 0, std = 0;
  int n = 0;
};

// Sample standard deviation (n-1); 0 for a single value.
inline Stat summarize(const std::vector<double>& xs) {
  Stat s;
  s.n = static_cast<int>(xs.size());
  if (xs.empty()) return s;
  double sum = 0;
  for (double x : xs) sum += x;
  s.mean = sum / s.n;
  if (s.n > 1) {
    double sq = 0;
    for (double x : xs) sq += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(sq / (s.n - 1));
  }
  return s;
}

struct EvalCell {
  std::string method;
  std::optional<ViewLabel> view;  // empty for the per-method average
  Stat d_mm, theta_deg, ssim;
  std::string source = "measured";
};

struct EvalReport {
  EvalSplit split = EvalSplit::intra;
  std::vector<EpisodeRecord> episodes;
  std::vector<EvalCell> cells;
  std::vector<EvalCell> reference;  // published values, never mixed with measured cells

  const EvalCell& cell(const std::string& method, std::optional<ViewLabel> view) const {
    for (const auto& c : cells)
      if (c.method == method && c.view == view) return c;
    throw InvalidArgument("no report cell for " + method);
  }
};

inline std::vector<EvalCell> aggregate(const std::vector<EpisodeRecord>& eps, const std::vector<std::string>& methods,
                                       const std::vector<ViewLabel>& views) {
  std::vector<EvalCell> cells;
  for (const auto& m : methods) {
    std::vector<double> ad, at, as;
    for (ViewLabel v : views) {
      std::vector<double> d, t, s;
      for (const auto& e : eps)
        if (e.method == m && e.view == v) {
          d.push_back(e.d_mm);
          t.push_back(e.theta_deg);
          s.push_back(e.ssim);
        }
      if (d.empty()) continue;
      ad.insert(ad.end(), d.begin(), d.end());
      at.insert(at.end(), t.begin(), t.end());
      as.insert(as.end(), s.begin(), s.end());
      cells.push_back({m, v, summarize(d), summarize(t), summarize(s)});
    }
    if (!ad.empty()) cells.push_back({m, std::nullopt, summarize(ad), summarize(at), summarize(as)});
  }
  return cells;
}

// Published intra-/inter-subject results on human volumes, for side-by-side display only.
inline std::vector<EvalCell> published_reference(EvalSplit split) {
  struct Row {
    const char* method;
    double v[4][6];  // per view (PSL, PSAP, TSP, average): d mean, d std, theta mean, theta std, ssim mean, ssim std
  };
  static const Row intra[] = {
      {"RL", {{9.55, 11.96, 7.27, 13.53, 0.49, 0.18}, {9.06, 15.76, 17.31, 43.38, 0.46, 0.16}, {8.78, 8.35, 6.73, 2.81, 0.51, 0.22}, {9.13, 12.40, 10.44, 26.29, 0.49, 0.33}}},
      {"RL+ASR", {{5.73, 4.89, 6.74, 10.92, 0.57, 0.20}, {7.94, 9.53, 9.57, 22.98, 0.44, 0.16}, {7.14, 10.18, 6.19, 3.77, 0.56, 0.20}, {6.94, 8.53, 7.50, 14.85, 0.52, 0.32}}},
      {"RL+DL", {{6.14, 6.41, 4.81, 3.56, 0.57, 0.15}, {6.64, 11.48, 10.02, 28.07, 0.48, 0.14}, {7.18, 6.30, 6.50, 2.99, 0.53, 0.22}, {6.65, 8.42, 7.11, 16.43, 0.53, 0.30}}},
      {"RL+ASR+DL", {{3.76, 3.42, 4.66, 4.22, 0.66, 0.14}, {4.78, 2.02, 4.51, 2.98, 0.48, 0.12}, {7.01, 9.30, 6.57, 4.34, 0.58, 0.18}, {5.18, 5.84, 5.25, 3.90, 0.57, 0.26}}},
  };
  static const Row inter[] = {
      {"RL", {{24.97, 20.69, 39.96, 55.43, 0.30, 0.09}, {14.05, 12.32, 29.21, 47.56, 0.33, 0.10}, {16.41, 24.63, 19.28, 30.24, 0.46, 0.15}, {18.48, 19.89, 29.48, 45.64, 0.36, 0.20}}},
      {"RL+ASR", {{18.51, 16.37, 15.32, 26.08, 0.33, 0.10}, {14.38, 16.26, 24.67, 46.34, 0.33, 0.08}, {11.71, 22.27, 10.93, 13.61, 0.45, 0.16}, {14.87, 18.51, 16.97, 31.69, 0.37, 0.20}}},
      {"RL+DL", {{26.21, 23.02, 27.65, 37.78, 0.39, 0.12}, {11.16, 9.94, 19.75, 45.93, 0.37, 0.10}, {11.07, 8.85, 7.20, 4.24, 0.49, 0.15}, {16.15, 15.35, 18.20, 34.42, 0.42, 0.22}}},
      {"RL+ASR+DL", {{18.07, 11.35, 18.39, 31.16, 0.43, 0.09}, {10.96, 11.99, 19.96, 43.29, 0.35, 0.07}, {9.57, 10.00, 14.13, 30.95, 0.49, 0.14}, {12.87, 11.14, 17.49, 35.60, 0.43, 0.18}}},
  };
  const Row* rows = split == EvalSplit::intra ? intra : inter;
  const std::optional<ViewLabel> views[4] = {ViewLabel::PSL, ViewLabel::PSAP, ViewLabel::TSP, std::nullopt};
  std::vector<EvalCell> out;
  for (int r = 0; r < 4; ++r)
    for (int k = 0; k < 4; ++k) {
      const double* v = rows[r].v[k];
      out.push_back({rows[r].method, views[k], {v[0], v[1], 0}, {v[2], v[3], 0}, {v[4], v[5], 0}, "published"});
    }
  return out;
}

// Runs one navigation for (method, view) in an infer-mode environment.
using EpisodeRunner = std::function<NavigationResult(NavigationEnv& env, const std::string& method, ViewLabel view, std::uint64_t seed)>;

inline EpisodeRunner model_runner(const ModelSet& models, const NavigationSettings& nav) {
  return [&models, nav](NavigationEnv& env, const std::string& method, ViewLabel view, std::uint64_t seed) {
    const QNet& q = models.qnet(view, method_uses_asr(method));
    NavigatorConfig nc;
    nc.round_limit = nav.round_limit;
    nc.target = view;
    nc.probability_threshold = nav.probability_threshold;
    if (method_uses_dl(method)) {
      if (!models.classifier) throw MissingArtifact("method " + method + " needs a classifier checkpoint");
      nc.budget = nav.budget;
      return navigate(env, greedy_policy(q), classifier_recognizer(*models.classifier), nc, seed);
    }
    // Without a collaborator the navigator stops where its single round ends.
    nc.budget = nav.round_limit;
    return navigate(env, greedy_policy(q), silent_recognizer(), nc, seed);
  };
}

inline int worker_count() {
  if (const char* s = std::getenv("SONONAV_THREADS")) {
    int n = std::atoi(s);
    if (n > 0) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs f(i) for i in [0, n) on up to `threads` workers; results land by index.
template <class F>
void parallel_for(int n, int threads, F&& f) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t)
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

struct EvalSetup {
  RunConfig config;
  std::vector<Scene> scenes;  // one per phantom group
};

inline EvalSetup make_eval_setup(const RunConfig& cfg, std::uint64_t seed) {
  EvalSetup s{cfg, {}};
  for (int i = 0; i < cfg.eval.phantom_count(); ++i) s.scenes.push_back(make_scene(test_phantom_spec(cfg.phantom, cfg.eval.split, i, seed)));
  return s;
}

// Episode e of every (method, view) cell shares its phantom and start seed, so cells are paired.
inline EvalReport evaluate(const EvalSetup& setup, const EpisodeRunner& runner, std::uint64_t seed, int threads = worker_count()) {
  const EvalConfig& ec = setup.config.eval;
  if (setup.scenes.empty()) throw InvalidArgument("evaluation needs test phantoms");
  struct Job {
    std::string method;
    ViewLabel view;
    int episode;
  };
  std::vector<Job> jobs;
  for (const auto& m : ec.methods)
    for (ViewLabel v : ec.views)
      for (int e = 0; e < ec.episodes; ++e) jobs.push_back({m, v, e});
  EvalReport report;
  report.split = ec.split;
  report.episodes.resize(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), threads, [&](int i) {
    const Job& job = jobs[static_cast<std::size_t>(i)];
    int ph = (job.episode / ec.tests_per_phantom) % static_cast<int>(setup.scenes.size());
    const Scene& scene = setup.scenes[static_cast<std::size_t>(ph)];
    std::uint64_t ep_seed = mix_seed(seed, 0xe000 + static_cast<std::uint64_t>(job.episode));
    NavigationEnv env(scene.volume, scene.surface, scene.goals.at(job.view),
                      setup.config.env_config(EnvMode::infer, job.view, false));
    NavigationResult r = runner(env, job.method, job.view, ep_seed);
    if (!r.metrics) throw Error("navigation returned no metrics although the goal is known");
    report.episodes[static_cast<std::size_t>(i)] = {job.method, job.view, job.episode, ph, ep_seed, r.metrics->d_mm,
                                                    r.metrics->theta_deg, r.metrics->ssim, r.total_steps, r.rounds, to_string(r.stop)};
  });
  report.cells = aggregate(report.episodes, ec.methods, ec.views);
  if (ec.reference_rows) report.reference = published_reference(ec.split);
  return report;
}

inline std::string split_name(EvalSplit s) { return s == EvalSplit::intra ? "intra-phantom" : "inter-phantom"; }

inline void write_episode_csv(std::ostream& os, const std::vector<EpisodeRecord>& eps) {
  os << "method,view,episode,phantom,seed,d_mm,theta_deg,ssim,steps,rounds,stop\n";
  os << std::setprecision(17);
  for (const auto& e : eps)
    os << e.method << "," << to_string(e.view) << "," << e.episode << "," << e.phantom << "," << e.seed << "," << e.d_mm << ","
       << e.theta_deg << "," << e.ssim << "," << e.steps << "," << e.rounds << "," << e.stop << "\n";
}

inline std::vector<EpisodeRecord> read_episode_csv(std::istream& is) {
  std::string line;
  std::getline(is, line);
  if (line != "method,view,episode,phantom,seed,d_mm,theta_deg,ssim,steps,rounds,stop")
    throw InvalidArgument("unexpected episode CSV header");
  std::vector<EpisodeRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string tok;
    while (std::getline(ss, tok, ',')) f.push_back(tok);
    if (f.size() != 11) throw InvalidArgument("malformed episode row: " + line);
    EpisodeRecord e;
    e.method = f[0];
    e.view = view_from_string(f[1]);
    e.episode = std::stoi(f[2]);
    e.phantom = std::stoi(f[3]);
    e.seed = std::stoull(f[4]);
    e.d_mm = std::stod(f[5]);
    e.theta_deg = std::stod(f[6]);
    e.ssim = std::stod(f[7]);
    e.steps = std::stoi(f[8]);
    e.rounds = std::stoi(f[9]);
    e.stop = f[10];
    out.push_back(e);
  }
  return out;
}

inline nlohmann::json to_json(const EvalReport& r) {
  auto cell_json = [](const EvalCell& c) {
    auto stat = [](const Stat& s) { return nlohmann::json{{"mean", s.mean}, {"std", s.std}, {"n", s.n}}; };
    return nlohmann::json{{"method", c.method},       {"view", c.view ? to_string(*c.view) : "average"},
                          {"d_mm", stat(c.d_mm)},     {"theta_deg", stat(c.theta_deg)},
                          {"ssim", stat(c.ssim)},     {"source", c.source}};
  };
  nlohmann::json j;
  j["split"] = split_name(r.split);
  j["episodes"] = r.episodes.size();
  j["cells"] = nlohmann::json::array();
  for (const auto& c : r.cells) j["cells"].push_back(cell_json(c));
  if (!r.reference.empty()) {
    j["reference"] = nlohmann::json::array();
    for (const auto& c : r.reference) j["reference"].push_back(cell_json(c));
  }
  return j;
}

// Methods as rows; per view and averaged: position error, orientation error, SSIM.
inline std::string format_table(const EvalReport& r, const std::vector<ViewLabel>& views) {
  std::ostringstream os;
  auto block = [&](const std::vector<EvalCell>& cells, const std::string& tag) {
    std::vector<std::string> methods;
    for (const auto& c : cells)
      if (std::find(methods.begin(), methods.end(), c.method) == methods.end()) methods.push_back(c.method);
    for (const auto& m : methods) {
      os << std::left << std::setw(24) << (split_name(r.split) + tag) << std::setw(12) << m;
      for (int metric = 0; metric < 3; ++metric) {
        std::vector<std::optional<ViewLabel>> cols(views.begin(), views.end());
        cols.push_back(std::nullopt);
        for (const auto& v : cols) {
          const EvalCell* found = nullptr;
          for (const auto& c : cells)
            if (c.method == m && c.view == v) found = &c;
          std::ostringstream cell;
          if (found) {
            const Stat& s = metric == 0 ? found->d_mm : metric == 1 ? found->theta_deg : found->ssim;
            cell << std::fixed << std::setprecision(2) << s.mean << "+-" << s.std;
          } else {
            cell << "-";
          }
          os << std::setw(15) << cell.str();
        }
      }
      os << "\n";
    }
  };
  os << std::left << std::setw(24) << "setting" << std::setw(12) << "method";
  for (const char* metric : {"pos_mm", "ori_deg", "ssim"}) {
    for (ViewLabel v : views) os << std::setw(15) << (std::string(metric) + ":" + to_string(v));
    os << std::setw(15) << (std::string(metric) + ":avg");
  }
  os << "\n";
  block(r.cells, "");
  if (!r.reference.empty()) block(r.reference, " [published]");
  return os.str();
}

}  // namespace sononav

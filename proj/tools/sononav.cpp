// Command-line front end: phantom generation, slicing, confidence maps, ROI
// selection, dataset synthesis, training, navigation and evaluation.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sononav/classifier.hpp"
#include "sononav/confidence.hpp"
#include "sononav/dualagent.hpp"
#include "sononav/eval.hpp"
#include "sononav/pgm.hpp"
#include "sononav/phantom.hpp"
#include "sononav/rl.hpp"

namespace fs = std::filesystem;
using namespace sononav;

namespace {

// Bad flags, inconsistent arguments or an unusable config file.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::uint64_t seed = 1;
};

RunConfig load_config(const Common& c) {
  if (c.config_path.empty()) return RunConfig{};
  if (!fs::exists(c.config_path)) throw UsageError("config file not found: " + c.config_path);
  try {
    return load_run_config(c.config_path);
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "Run configuration JSON (defaults apply when omitted)");
  app->add_option("--seed", c.seed, "Root seed for all randomness")->default_val(1);
}

ViewLabel parse_view(const std::string& s) {
  ViewLabel v = view_from_string(s);
  if (v == ViewLabel::BG) throw UsageError("view must be psl, psap or tsp");
  return v;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << j.dump(2) << "\n";
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifact("cannot open " + path);
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

GoalPoseSet read_goals(const std::string& path) {
  try {
    return read_json(path).get<GoalPoseSet>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

Scene load_scene(const std::string& volume_path, const std::string& goals_path) {
  VoxelVolume vol = read_volume(volume_path);
  GoalPoseSet goals = goals_path.empty() ? GoalPoseSet{} : read_goals(goals_path);
  return make_scene(std::move(vol), std::move(goals));
}

void log(const std::string& msg) { std::cerr << msg << std::endl; }

// ---- subcommands ----

struct PhantomArgs {
  Common c;
  std::string out_dir = "phantom";
};

int run_phantom(const PhantomArgs& a) {
  RunConfig cfg = load_config(a.c);
  PhantomSpec spec = cfg.phantom;
  spec.seed = a.c.seed;
  Phantom p = generate_phantom(spec);
  fs::create_directories(a.out_dir);
  write_volume((fs::path(a.out_dir) / "volume.svol").string(), p.volume);
  write_json((fs::path(a.out_dir) / "goals.json").string(), p.goals);
  write_json((fs::path(a.out_dir) / "phantom.json").string(), spec);
  log("wrote " + (fs::path(a.out_dir) / "volume.svol").string());
  return 0;
}

struct SliceArgs {
  Common c;
  std::string volume, pose, goals, view, out = "slice.pgm";
};

int run_slice(const SliceArgs& a) {
  RunConfig cfg = load_config(a.c);
  if (a.pose.empty() == a.view.empty()) throw UsageError("give exactly one of --pose or --view");
  if (!a.view.empty() && a.goals.empty()) throw UsageError("--view needs --goals");
  Pose pose;
  if (!a.pose.empty()) {
    try {
      nlohmann::json j = fs::exists(a.pose) ? read_json(a.pose) : nlohmann::json::parse(a.pose);
      pose = j.get<Pose>();
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(std::string("bad --pose: ") + e.what());
    }
  } else {
    pose = read_goals(a.goals).at(parse_view(a.view));
  }
  VoxelVolume vol = read_volume(a.volume);
  ImageSpec spec = cfg.image;
  spec.seed = a.c.seed;
  write_pgm(a.out, slice_image(vol, pose, spec));
  return 0;
}

struct ConfmapArgs {
  Common c;
  std::string image, out = "confidence.pgm", solver = "direct", means;
};

int run_confmap(const ConfmapArgs& a) {
  RunConfig cfg = load_config(a.c);
  Image img = read_pgm(a.image);
  SolveStats stats;
  ConfidenceMap map = confidence_map(img, cfg.confidence, a.solver == "pcg" ? ConfidenceSolver::pcg : ConfidenceSolver::direct,
                                     nullptr, &stats);
  write_pgm(a.out, confidence_to_image(map));
  nlohmann::json j{{"iterations", stats.iterations}, {"residual", stats.residual}};
  if (img.rows == kImageRows && img.cols == kImageCols) j["roi_means"] = roi_means(map);
  write_json(a.means, j);
  return 0;
}

struct RoiSelectArgs {
  Common c;
  std::string navlog, out;
};

int run_roi_select(const RoiSelectArgs& a) {
  load_config(a.c);
  std::ifstream is(a.navlog);
  if (!is) throw MissingArtifact("cannot open navlog " + a.navlog);
  RoiSelection sel = select_roi(read_navlog(is));
  write_json(a.out, sel);
  return 0;
}

struct DatasetArgs {
  Common c;
  std::string volume, goals, out = "dataset";
};

int run_dataset(const DatasetArgs& a) {
  RunConfig cfg = load_config(a.c);
  Scene scene = load_scene(a.volume, a.goals);
  LabeledDataset ds = generate_dataset(*scene.volume, *scene.surface, scene.goals, cfg.image, cfg.dataset, a.c.seed);
  save_dataset(ds, a.out);
  auto tr = ds.counts(Split::train), te = ds.counts(Split::test);
  nlohmann::json j;
  for (std::size_t k = 0; k < kViewCount; ++k)
    j[to_string(static_cast<ViewLabel>(k))] = {{"train", tr[k]}, {"test", te[k]}};
  write_json((fs::path(a.out) / "counts.json").string(), j);
  log("dataset: " + std::to_string(ds.samples.size()) + " samples in " + a.out);
  return 0;
}

struct TrainRlArgs {
  Common c;
  std::string volume, goals, view = "psl", out = "qnet.snet", navlog, losses;
  bool asr = false;
  int iterations = -1, warm_start = -1;
};

int run_train_rl(const TrainRlArgs& a) {
  RunConfig cfg = load_config(a.c);
  ViewLabel view = parse_view(a.view);
  if (a.iterations >= 0) cfg.schedule.iterations = a.iterations;
  if (a.warm_start >= 0) cfg.schedule.warm_start_iterations = a.warm_start;
  try {
    cfg.schedule.validate();
  } catch (const InvalidArgument& e) {
    throw UsageError(e.what());
  }
  Scene scene = load_scene(a.volume, a.goals);
  bool asr = a.asr || cfg.asr.enabled;
  NavigationEnv env(scene.volume, scene.surface, scene.goals.at(view), cfg.env_config(EnvMode::train, view, asr));
  DqnTrainer trainer({&env}, cfg.net, cfg.schedule, a.c.seed, !a.navlog.empty());
  auto t0 = std::chrono::steady_clock::now();
  trainer.set_progress([&](const TrainProgress& p) {
    double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char buf[200];
    std::snprintf(buf, sizeof(buf), "[%s] step %ld loss %.5f eps %.3f lr %.1e episodes %ld (%.0fs)",
                  p.phase == TrainPhase::warm_start ? "warm" : "main", p.training_step, p.loss, p.epsilon, p.lr, p.episodes, s);
    log(buf);
  });
  TrainResult r = trainer.run();
  r.net.save(a.out);
  if (!a.navlog.empty()) {
    std::ofstream os(a.navlog);
    if (!os) throw Error("cannot write " + a.navlog);
    write_navlog(os, r.navlog);
  }
  if (!a.losses.empty()) {
    std::ofstream os(a.losses);
    if (!os) throw Error("cannot write " + a.losses);
    os << "step,loss\n";
    os.precision(10);
    for (std::size_t i = 0; i < r.losses.size(); ++i) os << i << "," << r.losses[i] << "\n";
  }
  log("wrote " + a.out);
  return 0;
}

struct TrainClsArgs {
  Common c;
  std::string dataset, out = "classifier.snet", input, metrics;
  int epochs = -1;
};

int run_train_cls(const TrainClsArgs& a) {
  RunConfig cfg = load_config(a.c);
  if (!a.input.empty()) {
    if (a.input != "msf" && a.input != "single") throw UsageError("--input must be msf or single");
    cfg.classifier.input = a.input == "msf" ? InputMode::msf : InputMode::single;
  }
  if (a.epochs > 0) cfg.classifier.epochs = a.epochs;
  LabeledDataset ds = load_dataset(a.dataset);
  ClassifierTrainResult r = train_classifier(ds, cfg.classifier, a.c.seed);
  r.net.save(a.out);
  if (!a.metrics.empty()) {
    auto eval = evaluate_classifier(r.net, ds, Split::test);
    write_json(a.metrics, metrics_json(eval.metrics));
    std::ofstream os(fs::path(a.metrics).replace_extension(".confusion.csv"));
    write_confusion_csv(os, eval.metrics);
  }
  log("wrote " + a.out);
  return 0;
}

struct NavigateArgs {
  Common c;
  std::string view = "psl", volume, goals, qnet, cls, out, trajectory;
  int budget = -1;
};

int run_navigate(const NavigateArgs& a) {
  RunConfig cfg = load_config(a.c);
  ViewLabel view = parse_view(a.view);
  if (a.budget > 0) cfg.navigation.budget = a.budget;
  if (cfg.navigation.budget < cfg.navigation.round_limit) throw UsageError("--budget must be at least the round limit");
  Scene scene = load_scene(a.volume, a.goals);
  QNet q = QNet::load(a.qnet);
  validate_qnet(q);
  std::optional<ClassifierNet> cls;
  if (!a.cls.empty()) {
    cls = ClassifierNet::load(a.cls);
    classifier_input_mode(*cls);
  }
  std::optional<Pose> goal;
  if (!a.goals.empty()) goal = scene.goals.at(view);
  NavigationEnv env(scene.volume, scene.surface, goal, cfg.env_config(EnvMode::infer, view, false));
  NavigatorConfig nc;
  nc.round_limit = cfg.navigation.round_limit;
  nc.budget = cls ? cfg.navigation.budget : cfg.navigation.round_limit;
  nc.target = view;
  nc.probability_threshold = cfg.navigation.probability_threshold;
  NavigationResult r = navigate(env, greedy_policy(q), cls ? classifier_recognizer(*cls) : silent_recognizer(), nc, a.c.seed);
  write_json(a.out, to_json(r));
  if (!a.trajectory.empty()) {
    std::ofstream os(a.trajectory);
    if (!os) throw Error("cannot write " + a.trajectory);
    write_trajectory(os, r.trajectory);
  }
  return 0;
}

struct EvaluateArgs {
  Common c;
  std::string models, out_dir = "eval";
  bool reference = false;
};

int run_evaluate(const EvaluateArgs& a) {
  RunConfig cfg = load_config(a.c);
  if (a.reference) cfg.eval.reference_rows = true;
  ModelSet models = load_models(a.models, cfg.eval);
  EvalSetup setup = make_eval_setup(cfg, a.c.seed);
  EvalReport report = evaluate(setup, model_runner(models, cfg.navigation), a.c.seed);
  fs::create_directories(a.out_dir);
  write_json((fs::path(a.out_dir) / "report.json").string(), to_json(report));
  std::ofstream csv(fs::path(a.out_dir) / "episodes.csv");
  write_episode_csv(csv, report.episodes);
  std::string table = format_table(report, cfg.eval.views);
  std::ofstream(fs::path(a.out_dir) / "table.txt") << table;
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Ultrasound standard-view navigation toolkit"};
  app.require_subcommand(1);

  PhantomArgs phantom;
  auto* sp = app.add_subcommand("phantom", "Generate a phantom volume and its goal poses");
  add_common(sp, phantom.c);
  sp->add_option("--out", phantom.out_dir, "Output directory")->capture_default_str();

  SliceArgs slice;
  auto* ss = app.add_subcommand("slice", "Render the image at a probe pose");
  add_common(ss, slice.c);
  ss->add_option("--volume", slice.volume, "SVOL1 volume")->required();
  ss->add_option("--pose", slice.pose, "Pose JSON or a file containing it");
  ss->add_option("--goals", slice.goals, "Goal pose JSON (with --view)");
  ss->add_option("--view", slice.view, "Slice at this view's goal pose");
  ss->add_option("--out", slice.out, "Output PGM")->capture_default_str();

  ConfmapArgs conf;
  auto* sc = app.add_subcommand("confmap", "Confidence map of a PGM image");
  add_common(sc, conf.c);
  sc->add_option("--image", conf.image, "Input PGM")->required();
  sc->add_option("--out", conf.out, "Output PGM")->capture_default_str();
  sc->add_option("--solver", conf.solver, "direct or pcg")->check(CLI::IsMember({"direct", "pcg"}))->capture_default_str();
  sc->add_option("--means", conf.means, "Write solver stats and ROI means here (default stdout)");

  RoiSelectArgs roi;
  auto* sr = app.add_subcommand("roi-select", "Pick the ASR region of interest from a navigation log");
  add_common(sr, roi.c);
  sr->add_option("--navlog", roi.navlog, "Navigation log CSV")->required();
  sr->add_option("--out", roi.out, "Output JSON (default stdout)");

  DatasetArgs dataset;
  auto* sd = app.add_subcommand("dataset", "Synthesize the labeled view-classification dataset");
  add_common(sd, dataset.c);
  sd->add_option("--volume", dataset.volume, "SVOL1 volume")->required();
  sd->add_option("--goals", dataset.goals, "Goal pose JSON")->required();
  sd->add_option("--out", dataset.out, "Output directory")->capture_default_str();

  TrainRlArgs rl;
  auto* st = app.add_subcommand("train-rl", "Train a navigation Q-network for one view");
  add_common(st, rl.c);
  st->add_option("--volume", rl.volume, "SVOL1 volume")->required();
  st->add_option("--goals", rl.goals, "Goal pose JSON")->required();
  st->add_option("--view", rl.view, "Target view")->check(CLI::IsMember({"psl", "psap", "tsp"}, CLI::ignore_case))->capture_default_str();
  st->add_flag("--asr", rl.asr, "Add the acoustic-shadow reward");
  st->add_option("--out", rl.out, "Output checkpoint")->capture_default_str();
  st->add_option("--navlog", rl.navlog, "Write the per-episode navigation log");
  st->add_option("--losses", rl.losses, "Write the loss sequence CSV");
  st->add_option("--iterations", rl.iterations, "Override main-phase training steps");
  st->add_option("--warm-start", rl.warm_start, "Override warm-start training steps");

  TrainClsArgs cls;
  auto* sk = app.add_subcommand("train-cls", "Train the view classifier");
  add_common(sk, cls.c);
  sk->add_option("--dataset", cls.dataset, "Dataset directory")->required();
  sk->add_option("--out", cls.out, "Output checkpoint")->capture_default_str();
  sk->add_option("--input", cls.input, "msf or single");
  sk->add_option("--epochs", cls.epochs, "Override the epoch count");
  sk->add_option("--metrics", cls.metrics, "Write test-split metrics JSON");

  NavigateArgs nav;
  auto* sn = app.add_subcommand("navigate", "Run one navigation on a volume");
  add_common(sn, nav.c);
  sn->add_option("--view", nav.view, "Target view")->check(CLI::IsMember({"psl", "psap", "tsp"}, CLI::ignore_case))->capture_default_str();
  sn->add_option("--volume", nav.volume, "SVOL1 volume")->required();
  sn->add_option("--qnet", nav.qnet, "Q-network checkpoint")->required();
  sn->add_option("--cls", nav.cls, "Classifier checkpoint (omit for RL only)");
  sn->add_option("--budget", nav.budget, "Total step budget");
  sn->add_option("--goals", nav.goals, "Goal pose JSON for offline metrics");
  sn->add_option("--out", nav.out, "Result JSON (default stdout)");
  sn->add_option("--trajectory", nav.trajectory, "Trajectory CSV");

  EvaluateArgs ev;
  auto* se = app.add_subcommand("evaluate", "Evaluate navigation methods on held-out phantoms");
  add_common(se, ev.c);
  se->add_option("--models", ev.models, "Directory with qnet_<view>[_asr].snet and classifier.snet")->required();
  se->add_option("--out", ev.out_dir, "Report directory")->capture_default_str();
  se->add_flag("--reference", ev.reference, "Append published reference rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (sp->parsed()) return run_phantom(phantom);
    if (ss->parsed()) return run_slice(slice);
    if (sc->parsed()) return run_confmap(conf);
    if (sr->parsed()) return run_roi_select(roi);
    if (sd->parsed()) return run_dataset(dataset);
    if (st->parsed()) return run_train_rl(rl);
    if (sk->parsed()) return run_train_cls(cls);
    if (sn->parsed()) return run_navigate(nav);
    if (se->parsed()) return run_evaluate(ev);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

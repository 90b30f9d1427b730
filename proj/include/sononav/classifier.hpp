#pragma once

// Standard-view recognition: multi-scale fusion preprocessing, labeled dataset
// synthesis from a phantom, a small conv classifier, and macro-averaged metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sononav/geometry.hpp"
#include "sononav/neural.hpp"
#include "sononav/pgm.hpp"
#include "sononav/phantom.hpp"
#include "sononav/ssim.hpp"

namespace sononav {

inline constexpr int kViewCount = 4;
inline constexpr int kMsfSize = 64;

struct CropRect {
  int top, left, size;
};

// Centered square crop of floor(150 * fraction) pixels; the asymmetric pixel goes after the crop.
inline CropRect center_crop(int extent, double fraction) {
  int size = static_cast<int>(std::floor(extent * fraction));
  int off = (extent - size) / 2;
  return {off, off, size};
}

enum class InputMode { msf, single };

inline int input_channels(InputMode m) { return m == InputMode::msf ? 3 : 1; }

// Channels of kMsfSize x kMsfSize floats in [0,1]; MSF order is full, 75%, 50%.
struct MsfImage {
  int channels = 3;
  std::vector<float> data;

  float at(int ch, int r, int c) const {
    return data[(static_cast<std::size_t>(ch) * kMsfSize + r) * kMsfSize + c];
  }
};

// Bilinear resampling of a square region with pixel-centre alignment.
inline void resize_bilinear(const Image& img, const CropRect& crop, float* dst) {
  const double scale = static_cast<double>(crop.size) / kMsfSize;
  for (int r = 0; r < kMsfSize; ++r) {
    double sy = std::clamp((r + 0.5) * scale - 0.5, 0.0, crop.size - 1.0);
    int y0 = static_cast<int>(sy);
    int y1 = std::min(y0 + 1, crop.size - 1);
    double fy = sy - y0;
    for (int c = 0; c < kMsfSize; ++c) {
      double sx = std::clamp((c + 0.5) * scale - 0.5, 0.0, crop.size - 1.0);
      int x0 = static_cast<int>(sx);
      int x1 = std::min(x0 + 1, crop.size - 1);
      double fx = sx - x0;
      auto px = [&](int y, int x) { return static_cast<double>(img.at(crop.top + y, crop.left + x)); };
      double v = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x1)) + fy * ((1 - fx) * px(y1, x0) + fx * px(y1, x1));
      dst[static_cast<std::size_t>(r) * kMsfSize + c] = static_cast<float>(v / 255.0);
    }
  }
}

inline MsfImage preprocess(const Image& image, InputMode mode) {
  if (image.rows != kImageRows || image.cols != kImageCols) throw InvalidArgument("classifier input must be 150x150");
  MsfImage m;
  m.channels = input_channels(mode);
  m.data.resize(static_cast<std::size_t>(m.channels) * kMsfSize * kMsfSize);
  const double fractions[3] = {1.0, 0.75, 0.5};
  for (int ch = 0; ch < m.channels; ++ch)
    resize_bilinear(image, center_crop(kImageRows, fractions[ch]), m.data.data() + static_cast<std::size_t>(ch) * kMsfSize * kMsfSize);
  return m;
}

inline MsfImage msf_preprocess(const Image& image) { return preprocess(image, InputMode::msf); }

// ---- dataset ----

struct DatasetSpec {
  int grid_step_voxels = 10;
  double central_fraction = 0.4;
  double dense_yaw_range_deg = 10, dense_yaw_step_deg = 2;
  double sparse_yaw_start_deg = 30, sparse_yaw_step_deg = 30;
  double view_d_mm = 10, view_theta_deg = 10;
  double bg_d_mm = 20, bg_theta_deg = 20;
  double ssim_threshold = 0.5;
  double test_fraction = 0.25;
  SsimParams ssim;

  void validate() const {
    if (grid_step_voxels <= 0 || !(central_fraction > 0 && central_fraction <= 1))
      throw InvalidArgument("dataset grid parameters out of range");
    if (!(dense_yaw_step_deg > 0 && sparse_yaw_step_deg > 0)) throw InvalidArgument("yaw steps must be positive");
    if (!(view_d_mm < bg_d_mm && view_theta_deg < bg_theta_deg)) throw InvalidArgument("view radius must be inside the background radius");
    if (!(test_fraction >= 0 && test_fraction < 1)) throw InvalidArgument("test fraction must lie in [0,1)");
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = nlohmann::json{{"grid_step_voxels", s.grid_step_voxels}, {"central_fraction", s.central_fraction},
                     {"dense_yaw_range_deg", s.dense_yaw_range_deg}, {"dense_yaw_step_deg", s.dense_yaw_step_deg},
                     {"sparse_yaw_start_deg", s.sparse_yaw_start_deg}, {"sparse_yaw_step_deg", s.sparse_yaw_step_deg},
                     {"view_d_mm", s.view_d_mm}, {"view_theta_deg", s.view_theta_deg},
                     {"bg_d_mm", s.bg_d_mm}, {"bg_theta_deg", s.bg_theta_deg},
                     {"ssim_threshold", s.ssim_threshold}, {"test_fraction", s.test_fraction}};
}

inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  for (const auto& [key, value] : j.items()) {
    if (key == "grid_step_voxels") s.grid_step_voxels = value.get<int>();
    else if (key == "central_fraction") s.central_fraction = value.get<double>();
    else if (key == "dense_yaw_range_deg") s.dense_yaw_range_deg = value.get<double>();
    else if (key == "dense_yaw_step_deg") s.dense_yaw_step_deg = value.get<double>();
    else if (key == "sparse_yaw_start_deg") s.sparse_yaw_start_deg = value.get<double>();
    else if (key == "sparse_yaw_step_deg") s.sparse_yaw_step_deg = value.get<double>();
    else if (key == "view_d_mm") s.view_d_mm = value.get<double>();
    else if (key == "view_theta_deg") s.view_theta_deg = value.get<double>();
    else if (key == "bg_d_mm") s.bg_d_mm = value.get<double>();
    else if (key == "bg_theta_deg") s.bg_theta_deg = value.get<double>();
    else if (key == "ssim_threshold") s.ssim_threshold = value.get<double>();
    else if (key == "test_fraction") s.test_fraction = value.get<double>();
    else throw InvalidArgument("unknown dataset key: " + key);
  }
  s.validate();
}

enum class Split { train, test };

struct LabeledSample {
  Image image;
  ViewLabel label = ViewLabel::BG;
  Pose pose;
  Split split = Split::train;
  double ssim_to_goal = 0;  // only meaningful for view labels
};

struct LabeledDataset {
  std::vector<LabeledSample> samples;

  std::array<int, kViewCount> counts(Split split) const {
    std::array<int, kViewCount> c{};
    for (const auto& s : samples)
      if (s.split == split) ++c[static_cast<std::size_t>(s.label)];
    return c;
  }
  std::vector<const LabeledSample*> subset(Split split) const {
    std::vector<const LabeledSample*> out;
    for (const auto& s : samples)
      if (s.split == split) out.push_back(&s);
    return out;
  }
};

// Labeling rule for one pose: view V when within (view_d, view_theta) of goal V and
// the image resembles V's goal image; BG when outside (bg_d, bg_theta) of every goal.
struct LabelDecision {
  bool keep = false;
  ViewLabel label = ViewLabel::BG;
  double ssim = 0;
};

inline LabelDecision label_pose(const Pose& pose, const Image& image, const GoalPoseSet& goals,
                                const std::map<ViewLabel, Image>& goal_images, const DatasetSpec& spec) {
  bool far_from_all = true;
  LabelDecision best;
  for (ViewLabel v : kStandardViews) {
    auto it = goals.poses.find(v);
    if (it == goals.poses.end()) continue;
    PoseError e = pose_distance(pose, it->second);
    if (e.d_mm <= spec.bg_d_mm && e.theta_deg <= spec.bg_theta_deg) far_from_all = false;
    if (e.d_mm <= spec.view_d_mm && e.theta_deg <= spec.view_theta_deg) {
      double s = ssim(image, goal_images.at(v), spec.ssim);
      // Several views can qualify; the most similar goal image wins.
      if (s > spec.ssim_threshold && (!best.keep || s > best.ssim)) best = {true, v, s};
    }
  }
  if (best.keep) return best;
  if (far_from_all) return {true, ViewLabel::BG, 0};
  return {};
}

inline LabeledDataset generate_dataset(const VoxelVolume& volume, const SkinSurface& surface, const GoalPoseSet& goals,
                                       const ImageSpec& image_spec, const DatasetSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (goals.poses.empty()) throw InvalidArgument("dataset generation needs goal poses");
  std::map<ViewLabel, Image> goal_images;
  ImageSpec gspec = image_spec;
  for (const auto& [v, pose] : goals.poses) {
    gspec.seed = mix_seed(seed, 0x60a1 + static_cast<std::uint64_t>(v));
    goal_images[v] = slice_image(volume, pose, gspec);
  }

  std::vector<Eigen::Quaterniond> orientations;
  for (ViewLabel v : kStandardViews) {
    auto it = goals.poses.find(v);
    if (it == goals.poses.end()) continue;
    for (double d = -spec.dense_yaw_range_deg; d <= spec.dense_yaw_range_deg + 1e-9; d += spec.dense_yaw_step_deg)
      orientations.push_back((Eigen::Quaterniond(Eigen::AngleAxisd(deg2rad(d), Eigen::Vector3d::UnitZ())) * it->second.orientation).normalized());
  }
  for (double y = spec.sparse_yaw_start_deg; y <= 360 + 1e-9; y += spec.sparse_yaw_step_deg) orientations.push_back(downward_orientation(y));

  const double step = spec.grid_step_voxels * volume.spacing[0];
  const double w = volume.width_mm(), l = volume.length_mm();
  const double x0 = w * (1 - spec.central_fraction) / 2, x1 = w - x0;
  const double y0 = l * (1 - spec.central_fraction) / 2, y1 = l - y0;
  std::mt19937_64 split_rng(mix_seed(seed, 0x5b17));
  std::uniform_real_distribution<double> u(0.0, 1.0);

  LabeledDataset ds;
  std::uint64_t sample_index = 0;
  for (double x = std::ceil(x0 / step) * step; x <= x1 + 1e-9; x += step) {
    for (double y = std::ceil(y0 / step) * step; y <= y1 + 1e-9; y += step) {
      // Splits are drawn per grid point, so a pose never lands in both.
      Split split = u(split_rng) < spec.test_fraction ? Split::test : Split::train;
      for (const auto& q : orientations) {
        Pose pose(Eigen::Vector3d(x, y, surface.height(x, y)), q);
        ImageSpec s = image_spec;
        s.seed = mix_seed(seed, ++sample_index);
        Image img = slice_image(volume, pose, s);
        LabelDecision d = label_pose(pose, img, goals, goal_images, spec);
        if (!d.keep) continue;
        ds.samples.push_back({std::move(img), d.label, pose, split, d.ssim});
      }
    }
  }
  return ds;
}

// Directory layout: images/NNNNNN.pgm plus manifest.csv (path,label,split,pose JSON).
inline void save_dataset(const LabeledDataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw Error("cannot write dataset manifest in " + dir);
  manifest << "path,label,split,pose\n";
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const auto& s = ds.samples[i];
    char name[32];
    std::snprintf(name, sizeof(name), "images/%06zu.pgm", i);
    write_pgm((fs::path(dir) / name).string(), s.image);
    nlohmann::json pj = s.pose;
    manifest << name << "," << to_string(s.label) << "," << (s.split == Split::train ? "train" : "test") << ",\""
             << pj.dump() << "\"\n";
  }
}

inline LabeledDataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw MissingArtifact("no dataset manifest in " + dir);
  std::string line;
  std::getline(manifest, line);
  if (line != "path,label,split,pose") throw InvalidArgument("unexpected dataset manifest header");
  LabeledDataset ds;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::size_t a = line.find(','), b = line.find(',', a + 1), c = line.find(',', b + 1);
    if (c == std::string::npos || line.size() < c + 3 || line[c + 1] != '"' || line.back() != '"')
      throw InvalidArgument("malformed manifest row: " + line);
    LabeledSample s;
    s.image = read_pgm((fs::path(dir) / line.substr(0, a)).string());
    s.label = view_from_string(line.substr(a + 1, b - a - 1));
    std::string split = line.substr(b + 1, c - b - 1);
    if (split != "train" && split != "test") throw InvalidArgument("bad split tag: " + split);
    s.split = split == "train" ? Split::train : Split::test;
    s.pose = nlohmann::json::parse(line.substr(c + 2, line.size() - c - 3)).get<Pose>();
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---- network ----

struct ClassifierConfig {
  InputMode input = InputMode::msf;
  std::array<int, 3> widths{8, 16, 32};
  int epochs = 50;
  int batch_size = 16;
  double lr = 1e-3;
  double momentum = 0.9;

  void validate() const {
    if (epochs <= 0 || batch_size <= 0 || !(lr > 0)) throw InvalidArgument("classifier training settings must be positive");
    for (int w : widths)
      if (w <= 0) throw InvalidArgument("classifier widths must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ClassifierConfig& c) {
  j = nlohmann::json{{"input", c.input == InputMode::msf ? "msf" : "single"},
                     {"widths", c.widths},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"lr", c.lr},
                     {"momentum", c.momentum}};
}

inline void from_json(const nlohmann::json& j, ClassifierConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "input") {
      std::string m = value.get<std::string>();
      if (m != "msf" && m != "single") throw InvalidArgument("classifier input must be msf or single");
      c.input = m == "msf" ? InputMode::msf : InputMode::single;
    } else if (key == "widths") c.widths = value.get<std::array<int, 3>>();
    else if (key == "epochs") c.epochs = value.get<int>();
    else if (key == "batch_size") c.batch_size = value.get<int>();
    else if (key == "lr") c.lr = value.get<double>();
    else if (key == "momentum") c.momentum = value.get<double>();
    else throw InvalidArgument("unknown classifier key: " + key);
  }
  c.validate();
}

using ClassifierNet = nn::Network<float>;

inline std::vector<nn::LayerSpec> classifier_specs(const ClassifierConfig& cfg) {
  using nn::LayerKind;
  std::vector<nn::LayerSpec> s;
  int in = input_channels(cfg.input);
  int size = kMsfSize;
  for (int w : cfg.widths) {
    s.push_back({LayerKind::conv3x3, in, w});
    s.push_back({LayerKind::batchnorm, w, w});
    s.push_back({LayerKind::relu});
    s.push_back({LayerKind::maxpool2});
    in = w;
    size /= 2;
  }
  s.push_back({LayerKind::dense, in * size * size, kViewCount});
  return s;
}

inline InputMode classifier_input_mode(const ClassifierNet& net) {
  if (net.size() == 0) throw InvalidArgument("empty classifier network");
  auto spec = net.layer(0).spec();
  if (spec.kind != nn::LayerKind::conv3x3 || (spec.in != 1 && spec.in != 3)) throw InvalidArgument("not a view classifier");
  auto out = net.output_shape({1, spec.in, kMsfSize, kMsfSize});
  if (out != std::vector<int>{1, kViewCount}) throw InvalidArgument("classifier must produce 4 logits");
  return spec.in == 3 ? InputMode::msf : InputMode::single;
}

inline nn::Tensor<float> classifier_batch(const std::vector<const MsfImage*>& xs) {
  nn::Tensor<float> t({static_cast<int>(xs.size()), xs.front()->channels, kMsfSize, kMsfSize});
  for (std::size_t i = 0; i < xs.size(); ++i) std::copy(xs[i]->data.begin(), xs[i]->data.end(), t.data.begin() + static_cast<std::ptrdiff_t>(i * t.stride()));
  return t;
}

struct ClassifierTrainResult {
  ClassifierNet net;
  std::vector<double> epoch_losses;
};

inline ClassifierTrainResult train_classifier(const LabeledDataset& ds, const ClassifierConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  auto train = ds.subset(Split::train);
  auto counts = ds.counts(Split::train);
  if (std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) < 2)
    throw InvalidArgument("classifier training needs at least two classes");
  std::vector<MsfImage> inputs;
  std::vector<int> labels;
  inputs.reserve(train.size());
  for (const auto* s : train) {
    inputs.push_back(preprocess(s->image, cfg.input));
    labels.push_back(static_cast<int>(s->label));
  }
  ClassifierTrainResult r{ClassifierNet(classifier_specs(cfg), mix_seed(seed, 0xc1a5)), {}};
  r.net.set_check_finite(true);
  nn::Optimizer<float> opt({nn::OptimizerKind::sgd, cfg.lr, cfg.momentum});
  std::mt19937_64 rng(mix_seed(seed, 0x5ef1));
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      // A lone trailing sample would give degenerate batch statistics.
      if (end - start < 2) continue;
      std::vector<const MsfImage*> xs;
      std::vector<int> ys;
      for (std::size_t k = start; k < end; ++k) {
        xs.push_back(&inputs[order[k]]);
        ys.push_back(labels[order[k]]);
      }
      r.net.zero_grad();
      auto logits = r.net.forward(classifier_batch(xs), nn::Mode::train);
      auto loss = nn::softmax_cross_entropy(logits, ys);
      r.net.backward_params(loss.grad);
      opt.step(r.net.params());
      total += loss.loss * static_cast<double>(end - start);
    }
    r.epoch_losses.push_back(total / static_cast<double>(order.size()));
  }
  return r;
}

struct Classification {
  ViewLabel label = ViewLabel::BG;
  std::array<double, kViewCount> probabilities{};
};

inline Classification classify(const ClassifierNet& net, const Image& image) {
  MsfImage x = preprocess(image, classifier_input_mode(net));
  auto p = nn::softmax(net.infer(classifier_batch({&x})));
  Classification c;
  int best = 0;
  for (int k = 0; k < kViewCount; ++k) {
    c.probabilities[static_cast<std::size_t>(k)] = p.at(0, k);
    if (p.at(0, k) > p.at(0, best)) best = k;
  }
  c.label = static_cast<ViewLabel>(best);
  return c;
}

// ---- metrics ----

struct ClassificationMetrics {
  double precision = 0, recall = 0, f1 = 0, accuracy = 0;
  std::array<std::array<int, kViewCount>, kViewCount> confusion{};  // rows = true labels
};

// Macro averages over classes that occur in the labels or the predictions.
inline ClassificationMetrics classification_metrics(const std::vector<ViewLabel>& preds, const std::vector<ViewLabel>& labels) {
  if (preds.size() != labels.size()) throw InvalidArgument("predictions and labels differ in length");
  if (preds.empty()) throw InvalidArgument("no predictions to score");
  ClassificationMetrics m;
  int correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    ++m.confusion[static_cast<std::size_t>(labels[i])][static_cast<std::size_t>(preds[i])];
    correct += preds[i] == labels[i];
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(preds.size());
  int classes = 0;
  for (std::size_t k = 0; k < kViewCount; ++k) {
    int tp = m.confusion[k][k], row = 0, col = 0;
    for (std::size_t j = 0; j < kViewCount; ++j) {
      row += m.confusion[k][j];
      col += m.confusion[j][k];
    }
    if (row == 0 && col == 0) continue;
    ++classes;
    double p = col > 0 ? static_cast<double>(tp) / col : 0.0;
    double r = row > 0 ? static_cast<double>(tp) / row : 0.0;
    m.precision += p;
    m.recall += r;
    m.f1 += p + r > 0 ? 2 * p * r / (p + r) : 0.0;
  }
  m.precision /= classes;
  m.recall /= classes;
  m.f1 /= classes;
  return m;
}

inline nlohmann::json metrics_json(const ClassificationMetrics& m) {
  return {{"precision", m.precision}, {"recall", m.recall}, {"f1", m.f1}, {"accuracy", m.accuracy}, {"confusion", m.confusion}};
}

inline void write_confusion_csv(std::ostream& os, const ClassificationMetrics& m) {
  os << "true\\pred,PSL,PSAP,TSP,BG\n";
  for (std::size_t k = 0; k < kViewCount; ++k) {
    os << to_string(static_cast<ViewLabel>(k));
    for (std::size_t j = 0; j < kViewCount; ++j) os << "," << m.confusion[k][j];
    os << "\n";
  }
}

struct ClassifierEvaluation {
  ClassificationMetrics metrics;
  std::vector<ViewLabel> predictions, labels;
};

inline ClassifierEvaluation evaluate_classifier(const ClassifierNet& net, const LabeledDataset& ds, Split split = Split::test) {
  ClassifierEvaluation e;
  for (const auto* s : ds.subset(split)) {
    e.predictions.push_back(classify(net, s->image).label);
    e.labels.push_back(s->label);
  }
  e.metrics = classification_metrics(e.predictions, e.labels);
  return e;
}

}  // namespace sononav

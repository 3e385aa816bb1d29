#include "dfm/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <set>

#include "dfm/plot.hpp"
#include "dfm/random.hpp"

namespace dfm {

using nlohmann::json;

namespace {

constexpr std::array<std::pair<ExperimentMode, std::string_view>, 6> kModes{{
    {ExperimentMode::kNoiseSweep, "noise_sweep"},
    {ExperimentMode::kFewShotSweep, "fewshot_sweep"},
    {ExperimentMode::kAblation, "ablation"},
    {ExperimentMode::kCorruptionEval, "corruption_eval"},
    {ExperimentMode::kTrajectoryExport, "trajectory_export"},
    {ExperimentMode::kCostReport, "cost_report"},
}};

constexpr std::string_view kMetaName = "__meta__.config";
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

std::string_view z_mode_name(ZMode z) { return z == ZMode::kDamp ? "damp" : "amplify"; }
ZMode z_mode_from_name(const std::string& s) {
  if (s == "damp") return ZMode::kDamp;
  if (s == "amplify") return ZMode::kAmplify;
  throw ConfigError("config: z_mode must be damp or amplify, got '" + s + "'");
}

const std::set<std::string> kConfigKeys{"mode",   "dataset",   "sigma",       "D",          "seeds",
                                        "train",  "output_dir", "models",     "backbone",   "corruptions",
                                        "train_limit", "test_limit", "trajectory_instances", "seg_classes",
                                        "seg_size", "seg_train", "seg_test"};

void reject_unknown(const json& j, const std::set<std::string>& keys, const std::string& where) {
  for (const auto& [k, v] : j.items()) {
    if (!keys.contains(k)) throw ConfigError("config: unknown key '" + k + "' in " + where);
  }
}

}  // namespace

std::string_view mode_name(ExperimentMode mode) {
  for (const auto& [m, n] : kModes) {
    if (m == mode) return n;
  }
  throw ConfigError("unknown mode");
}

ExperimentMode mode_from_name(std::string_view name) {
  for (const auto& [m, n] : kModes) {
    if (n == name) return m;
  }
  throw ConfigError("config: unknown mode '" + std::string(name) + "'");
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  reject_unknown(j, kConfigKeys, "config");
  ExperimentConfig c;
  try {
    c.mode = mode_from_name(j.at("mode").get<std::string>());
    read_opt(j, "dataset", c.dataset);
    read_opt(j, "sigma", c.sigma);
    read_opt(j, "D", c.shots);
    read_opt(j, "seeds", c.seeds);
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
    read_opt(j, "models", c.models);
    read_opt(j, "train_limit", c.train_limit);
    read_opt(j, "test_limit", c.test_limit);
    read_opt(j, "trajectory_instances", c.trajectory_instances);
    read_opt(j, "seg_classes", c.seg_classes);
    read_opt(j, "seg_size", c.seg_size);
    read_opt(j, "seg_train", c.seg_train);
    read_opt(j, "seg_test", c.seg_test);
    if (j.contains("corruptions")) {
      for (const auto& s : j.at("corruptions")) c.corruptions.push_back(Corruption::parse(s.get<std::string>()));
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t, {"epochs", "batch_size", "lr_initial", "lr_max", "lr_final", "warmup_fraction", "momentum",
                         "label_smoothing", "T", "tau", "ablation", "mask_feedback"},
                     "train");
      read_opt(t, "epochs", c.train.epochs);
      read_opt(t, "batch_size", c.train.batch_size);
      read_opt(t, "lr_initial", c.train.lr_initial);
      read_opt(t, "lr_max", c.train.lr_max);
      read_opt(t, "lr_final", c.train.lr_final);
      read_opt(t, "warmup_fraction", c.train.warmup_fraction);
      read_opt(t, "momentum", c.train.momentum);
      read_opt(t, "label_smoothing", c.train.label_smoothing);
      read_opt(t, "T", c.train.steps);
      read_opt(t, "tau", c.train.tau);
      read_opt(t, "mask_feedback", c.train.mask_feedback);
      if (t.contains("ablation")) {
        const json& a = t.at("ablation");
        reject_unknown(a, {"exp_decay", "orthogonality", "conv_decay"}, "train.ablation");
        read_opt(a, "exp_decay", c.train.ablation.exp_decay);
        read_opt(a, "orthogonality", c.train.ablation.orthogonality);
        read_opt(a, "conv_decay", c.train.ablation.conv_decay);
      }
    }
    if (j.contains("backbone")) {
      const json& b = j.at("backbone");
      reject_unknown(b, {"stage_widths", "B", "N", "h_init_std", "conv_kernel", "z_mode"}, "backbone");
      read_opt(b, "stage_widths", c.backbone.stage_widths);
      read_opt(b, "B", c.backbone.feedback_channels);
      read_opt(b, "N", c.backbone.output_channels);
      read_opt(b, "h_init_std", c.backbone.h_init_std);
      read_opt(b, "conv_kernel", c.backbone.conv_kernel);
      if (b.contains("z_mode")) c.backbone.z_mode = z_mode_from_name(b.at("z_mode").get<std::string>());
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config: " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  json corr = json::array();
  for (const auto& c : corruptions) corr.push_back(c.to_string());
  return {
      {"mode", std::string(mode_name(mode))},
      {"dataset", dataset},
      {"sigma", sigma},
      {"D", shots},
      {"seeds", seeds},
      {"output_dir", output_dir.string()},
      {"models", models},
      {"corruptions", corr},
      {"train_limit", train_limit},
      {"test_limit", test_limit},
      {"trajectory_instances", trajectory_instances},
      {"seg_classes", seg_classes},
      {"seg_size", seg_size},
      {"seg_train", seg_train},
      {"seg_test", seg_test},
      {"train",
       {{"epochs", train.epochs},
        {"batch_size", train.batch_size},
        {"lr_initial", train.lr_initial},
        {"lr_max", train.lr_max},
        {"lr_final", train.lr_final},
        {"warmup_fraction", train.warmup_fraction},
        {"momentum", train.momentum},
        {"label_smoothing", train.label_smoothing},
        {"T", train.steps},
        {"tau", train.tau},
        {"mask_feedback", train.mask_feedback},
        {"ablation",
         {{"exp_decay", train.ablation.exp_decay},
          {"orthogonality", train.ablation.orthogonality},
          {"conv_decay", train.ablation.conv_decay}}}}},
      {"backbone",
       {{"stage_widths", backbone.stage_widths},
        {"B", backbone.feedback_channels},
        {"N", backbone.output_channels},
        {"h_init_std", backbone.h_init_std},
        {"conv_kernel", backbone.conv_kernel},
        {"z_mode", std::string(z_mode_name(backbone.z_mode))}}},
  };
}

void ExperimentConfig::validate(std::size_t train_size, std::size_t classes) const {
  train.validate();
  if (seeds.empty()) throw ConfigError("config: at least one seed is required");
  if (sigma.empty()) throw ConfigError("config: sigma list must not be empty (use [0])");
  for (double s : sigma) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw ConfigError("config: sigma values must be finite and >= 0");
  }
  for (std::size_t d : shots) {
    if (d == 0) throw ConfigError("config: D values must be >= 1");
  }
  if (models.empty() && mode != ExperimentMode::kAblation) throw ConfigError("config: no models requested");
  for (const auto& m : models) {
    if (std::find(known_models().begin(), known_models().end(), m) == known_models().end()) {
      throw ConfigError("config: unknown model '" + m + "'");
    }
  }
  if (backbone.output_channels == 0) throw ConfigError("config: N must be >= 1");
  if (backbone.conv_kernel % 2 == 0) throw ConfigError("config: conv_kernel must be odd");
  if (mode == ExperimentMode::kFewShotSweep && shots.empty()) throw ConfigError("config: fewshot_sweep needs a D list");
  if (mode == ExperimentMode::kCorruptionEval && corruptions.empty()) {
    throw ConfigError("config: corruption_eval needs a corruptions list");
  }
  // Noise is applied only with the full training set.
  if (classes > 0) {
    const bool noisy = std::any_of(sigma.begin(), sigma.end(), [](double s) { return s > 0.0; });
    const bool few = std::any_of(shots.begin(), shots.end(), [&](std::size_t d) { return d * classes < train_size; });
    if (noisy && few) {
      throw ConfigError("config: sigma > 0 and D < |train|/L are mutually exclusive settings");
    }
  }
}

DataSplits load_splits(const ExperimentConfig& cfg) {
  DataSplits s;
  if (cfg.dataset == "synthetic:seg") {
    s.train = make_synthetic_seg(cfg.seg_train, cfg.seg_size, cfg.seg_size, cfg.seg_classes, 101);
    s.test = make_synthetic_seg(cfg.seg_test, cfg.seg_size, cfg.seg_size, cfg.seg_classes, 202);
    s.test.split = Split::kTest;
  } else {
    if (cfg.dataset.empty()) throw ConfigError("config: dataset path is required");
    const IdxLayout layout = IdxLayout::in(cfg.dataset);
    s.train = load_idx(layout.train_images, layout.train_labels, Split::kTrain);
    s.test = load_idx(layout.test_images, layout.test_labels, Split::kTest);
    s.test.classes = s.train.classes = std::max(s.train.classes, s.test.classes);
  }
  auto limit = [](Dataset& d, std::size_t n) {
    if (n == 0 || n >= d.size()) return;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    d = d.subset(idx);
  };
  limit(s.train, cfg.train_limit);
  limit(s.test, cfg.test_limit);
  s.train.validate();
  s.test.validate();
  return s;
}

json ModelDescriptor::to_json() const {
  return {{"name", name},
          {"seed", seed},
          {"dataset", dataset},
          {"kind", arch.kind == TaskKind::kClassifier ? "classifier" : "segmenter"},
          {"image_channels", arch.image_channels},
          {"height", arch.height},
          {"width", arch.width},
          {"stage_widths", arch.stage_widths},
          {"B", arch.feedback_channels},
          {"N", arch.output_channels},
          {"L", arch.classes},
          {"T", arch.steps},
          {"tau", arch.tau},
          {"h_init_std", arch.h_init_std},
          {"mask_feedback", arch.mask_feedback},
          {"exp_decay", arch.exp_decay},
          {"conv_decay", arch.conv_decay},
          {"conv_kernel", arch.conv_kernel},
          {"z_mode", std::string(z_mode_name(arch.z_mode))}};
}

ModelDescriptor ModelDescriptor::from_json(const json& j) {
  ModelDescriptor d;
  try {
    d.name = j.at("name").get<std::string>();
    d.seed = j.at("seed").get<std::uint64_t>();
    d.dataset = j.value("dataset", std::string());
    d.arch.kind = j.at("kind").get<std::string>() == "segmenter" ? TaskKind::kSegmenter : TaskKind::kClassifier;
    d.arch.image_channels = j.at("image_channels").get<std::size_t>();
    d.arch.height = j.at("height").get<std::size_t>();
    d.arch.width = j.at("width").get<std::size_t>();
    d.arch.stage_widths = j.at("stage_widths").get<std::vector<std::size_t>>();
    d.arch.feedback_channels = j.at("B").get<std::size_t>();
    d.arch.output_channels = j.at("N").get<std::size_t>();
    d.arch.classes = j.at("L").get<std::size_t>();
    d.arch.steps = j.at("T").get<std::size_t>();
    d.arch.tau = j.at("tau").get<double>();
    d.arch.h_init_std = j.at("h_init_std").get<double>();
    d.arch.mask_feedback = j.at("mask_feedback").get<bool>();
    d.arch.exp_decay = j.at("exp_decay").get<bool>();
    d.arch.conv_decay = j.at("conv_decay").get<bool>();
    d.arch.conv_kernel = j.at("conv_kernel").get<std::size_t>();
    d.arch.z_mode = z_mode_from_name(j.at("z_mode").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model descriptor: ") + e.what());
  }
  return d;
}

const std::vector<std::string>& known_models() {
  static const std::vector<std::string> names{"dfm", "ff", "dfm-masked", "dfm-no-decay", "dfm-no-ortho", "dfm-conv"};
  return names;
}

ModelDescriptor describe_model(const std::string& name, const ArchConfig& arch, const TrainConfig& train,
                               const Dataset& data, std::uint64_t seed) {
  if (std::find(known_models().begin(), known_models().end(), name) == known_models().end()) {
    throw ConfigError("unknown model '" + name + "'");
  }
  ModelDescriptor d;
  d.name = name;
  d.seed = seed;
  FeedbackConfig& f = d.arch;
  const Shape shape = data.image_shape();
  f.kind = data.segmentation() ? TaskKind::kSegmenter : TaskKind::kClassifier;
  f.image_channels = shape.at(0);
  f.height = shape.at(1);
  f.width = shape.at(2);
  f.stage_widths = arch.stage_widths;
  f.classes = data.classes;
  f.feedback_channels = arch.feedback_channels == 0 ? data.classes : arch.feedback_channels;
  f.output_channels = arch.output_channels;
  f.steps = train.steps;
  f.tau = train.tau;
  f.h_init_std = arch.h_init_std;
  f.conv_kernel = arch.conv_kernel;
  f.z_mode = arch.z_mode;
  f.mask_feedback = name == "dfm-masked" || (name != "ff" && train.mask_feedback);
  f.exp_decay = name != "dfm-no-decay" && train.ablation.exp_decay;
  f.conv_decay = name == "dfm-conv" || (name != "ff" && train.ablation.conv_decay);
  return d;
}

std::unique_ptr<Model> build_model(const ModelDescriptor& d) {
  if (d.name == "ff") return std::make_unique<FeedforwardModel>(feedforward_backbone_spec(d.arch), d.arch.classes, d.seed);
  return std::make_unique<FeedbackModel>(d.arch, d.seed);
}

AblationFlags model_ablation(const std::string& name, const AblationFlags& base) {
  AblationFlags f = base;
  if (name == "dfm-no-ortho") f.orthogonality = false;
  if (name == "dfm-no-decay") f.exp_decay = false;
  if (name == "dfm-conv") f.conv_decay = true;
  return f;
}

void save_model(const std::filesystem::path& path, const Model& model, const ModelDescriptor& d) {
  ParameterList params = model.parameters();
  const std::string meta = d.to_json().dump();
  const std::size_t n = meta.size();
  params.push_back({std::string(kMetaName), Tensor({n}, std::vector<double>(meta.begin(), meta.end()))});
  save_checkpoint(path, params);
}

std::pair<std::unique_ptr<Model>, ModelDescriptor> load_model(const std::filesystem::path& path) {
  const ParameterList stored = load_checkpoint(path);
  auto it = std::find_if(stored.begin(), stored.end(), [](const NamedParameter& p) { return p.name == kMetaName; });
  if (it == stored.end()) throw ConfigError("checkpoint: " + path.string() + " has no model descriptor");
  std::string meta;
  for (double b : it->value.data()) meta.push_back(static_cast<char>(b));
  ModelDescriptor d;
  try {
    d = ModelDescriptor::from_json(json::parse(meta));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint: corrupt descriptor: ") + e.what());
  }
  auto model = build_model(d);
  restore_parameters(model->parameters(), stored);
  return {std::move(model), d};
}

std::string format_number(double v) {
  if (std::isnan(v)) return "NaN";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("results: cannot write " + path.string());
  out << kResultsHeader << '\n';
  for (const auto& r : rows) {
    std::string reason = r.reason;
    std::replace(reason.begin(), reason.end(), ',', ';');
    std::replace(reason.begin(), reason.end(), '\n', ' ');
    out << r.mode << ',' << r.model << ',' << format_number(r.sigma) << ','
        << (r.shots ? std::to_string(*r.shots) : std::string("full")) << ',' << r.seed << ',' << r.metric << ','
        << format_number(r.value) << ',' << reason << '\n';
  }
}

void write_train_log(const std::filesystem::path& path, const std::vector<StepLog>& log) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("train log: cannot write " + path.string());
  out << kTrainLogHeader << '\n';
  for (const auto& s : log) {
    out << s.epoch << ',' << s.step << ',' << format_number(s.lr) << ',' << format_number(s.loss) << ','
        << format_number(s.metric) << ',' << format_number(s.q_ortho_residual) << '\n';
  }
}

TrainedRun train_model(const std::string& name, const ExperimentConfig& cfg, const Dataset& train, double sigma,
                       std::uint64_t seed) {
  TrainedRun run;
  run.descriptor = describe_model(name, cfg.backbone, cfg.train, train, stream_seed(seed, "model-init", 0));
  run.descriptor.dataset = cfg.dataset;
  run.model = build_model(run.descriptor);
  TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.ablation = model_ablation(name, cfg.train.ablation);
  Trainer trainer(*run.model, tc, train.size());
  try {
    trainer.fit(train, sigma);
  } catch (const DivergenceError& e) {
    run.failure = std::string("diverged: ") + e.what();
  } catch (const linalg::OverflowError& e) {
    run.failure = std::string("diverged: ") + e.what();
  }
  run.log = trainer.log();
  return run;
}

Evaluation evaluate_noisy(const Model& model, const Dataset& data, double sigma, double label_smoothing,
                          std::uint64_t seed) {
  if (sigma == 0.0) return evaluate(model, data, label_smoothing);
  return evaluate(model, data, label_smoothing, [&](const Tensor& x, std::size_t i) {
    return add_gaussian_noise(x, sigma, stream_seed(seed, "test-noise", i));
  });
}

std::vector<TrajectoryRecord> export_trajectories(const FeedbackModel& model, const Dataset& data,
                                                  std::size_t instances, double label_smoothing,
                                                  std::uint64_t seed) {
  if (data.segmentation()) throw ConfigError("trajectories: classification datasets only");
  NoGradGuard guard;
  std::vector<TrajectoryRecord> out;
  const std::size_t n = std::min(instances, data.size());
  for (std::size_t i = 0; i < n; ++i) {
    const UnrollResult r = model.run(data.images[i], stream_seed(seed, "trajectory-state", i), true);
    for (std::size_t t = 0; t < r.predictions.size(); ++t) {
      TrajectoryRecord rec;
      rec.run_id = i;
      rec.seed = seed;
      rec.t = t;
      const Tensor& logits = r.predictions[t];
      rec.loss = smoothed_cross_entropy(logits, static_cast<std::size_t>(data.labels[i]), data.classes,
                                        label_smoothing).item();
      rec.norm_h = r.states[t].norm();
      rec.norm_step = t == 0 ? 0.0 : add(r.states[t], scale(r.states[t - 1], -1.0)).norm();
      rec.pred_class = argmax(logits.data());
      const Tensor p = softmax_channels(logits);
      rec.probabilities.assign(p.data().begin(), p.data().end());
      out.push_back(std::move(rec));
    }
  }
  return out;
}

void write_trajectories(const std::filesystem::path& csv, const std::filesystem::path& softmax_csv,
                        const std::vector<TrajectoryRecord>& records) {
  std::ofstream out(csv);
  if (!out) throw std::runtime_error("trajectories: cannot write " + csv.string());
  out << kTrajectoryHeader << '\n';
  for (const auto& r : records) {
    out << r.run_id << ',' << r.seed << ',' << r.t << ',' << format_number(r.loss) << ',' << format_number(r.norm_h)
        << ',' << format_number(r.norm_step) << ',' << r.pred_class << '\n';
  }
  if (softmax_csv.empty()) return;
  std::ofstream sm(softmax_csv);
  if (!sm) throw std::runtime_error("trajectories: cannot write " + softmax_csv.string());
  sm << kSoftmaxHeader << '\n';
  for (const auto& r : records) {
    for (std::size_t c = 0; c < r.probabilities.size(); ++c) {
      sm << r.run_id << ',' << r.seed << ',' << r.t << ',' << c << ',' << format_number(r.probabilities[c]) << '\n';
    }
  }
}

namespace {

struct Cell {
  std::string mode;
  double sigma = 0.0;
  std::optional<std::size_t> shots;
  std::uint64_t seed = 0;
};

std::string run_tag(const std::string& model, const Cell& c) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "_s%g_D%s_seed%llu", c.sigma, c.shots ? std::to_string(*c.shots).c_str() : "full",
                static_cast<unsigned long long>(c.seed));
  return model + buf;
}

void push_metrics(std::vector<ResultRow>& rows, const Cell& c, const std::string& model, const std::string& prefix,
                  const Evaluation* ev, bool segmentation, const std::string& reason) {
  auto row = [&](const std::string& metric, double value) {
    rows.push_back({c.mode, model, c.sigma, c.shots, c.seed, prefix + metric, value, reason});
  };
  if (segmentation) {
    row("loss", ev ? ev->mean_loss : kNaN);
    row("miou", ev ? ev->miou : kNaN);
  } else {
    row("loss", ev ? ev->mean_loss : kNaN);
    row("top1", ev ? ev->top1 : kNaN);
    row("top5", ev ? ev->top5 : kNaN);
    row("auc", ev ? ev->auc : kNaN);
  }
}

// Trains `model` on `train`, evaluates train and test splits, logs, and returns
// the trained run for follow-up analyses.
TrainedRun train_and_score(const ExperimentConfig& cfg, const Cell& cell, const std::string& model,
                           const Dataset& train, const Dataset& test, ExperimentOutput& out) {
  std::clog << "[dfm] " << cell.mode << ' ' << run_tag(model, cell) << '\n';
  TrainedRun run = train_model(model, cfg, train, cell.sigma, cell.seed);
  const auto log_path = cfg.output_dir / ("train_log_" + run_tag(model, cell) + ".csv");
  write_train_log(log_path, run.log);
  out.files.push_back(log_path);
  const bool seg = train.segmentation();
  if (run.failure) {
    push_metrics(out.rows, cell, model, "train_", nullptr, seg, *run.failure);
    push_metrics(out.rows, cell, model, "test_", nullptr, seg, *run.failure);
    return run;
  }
  try {
    const Evaluation tr = evaluate_noisy(*run.model, train, cell.sigma, cfg.train.label_smoothing,
                                         stream_seed(cell.seed, "eval-train", 0));
    const Evaluation te = evaluate_noisy(*run.model, test, cell.sigma, cfg.train.label_smoothing,
                                         stream_seed(cell.seed, "eval-test", 0));
    push_metrics(out.rows, cell, model, "train_", &tr, seg, "");
    push_metrics(out.rows, cell, model, "test_", &te, seg, "");
  } catch (const NonFiniteError& e) {
    run.failure = std::string("non-finite evaluation: ") + e.what();
    push_metrics(out.rows, cell, model, "train_", nullptr, seg, *run.failure);
    push_metrics(out.rows, cell, model, "test_", nullptr, seg, *run.failure);
  }
  return run;
}

double mean_of(const std::vector<ResultRow>& rows, const std::string& model, const std::string& metric,
               double sigma, std::optional<std::size_t> shots) {
  double total = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows) {
    if (r.model == model && r.metric == metric && r.sigma == sigma && r.shots == shots) {
      total += r.value;
      ++n;
    }
  }
  return n == 0 ? kNaN : total / static_cast<double>(n);
}

void noise_sweep(const ExperimentConfig& cfg, const DataSplits& data, ExperimentOutput& out) {
  for (double sigma : cfg.sigma) {
    for (auto seed : cfg.seeds) {
      for (const auto& m : cfg.models) train_and_score(cfg, {"noise_sweep", sigma, std::nullopt, seed}, m, data.train, data.test, out);
    }
  }
  const std::string metric = data.train.segmentation() ? "test_miou" : "test_top1";
  plot::Chart chart{"Test metric vs input noise", "sigma", metric, false, false, {}};
  for (const auto& m : cfg.models) {
    plot::Series s{m, {}, {}};
    for (double sigma : cfg.sigma) {
      s.x.push_back(sigma);
      s.y.push_back(mean_of(out.rows, m, metric, sigma, std::nullopt));
    }
    chart.series.push_back(std::move(s));
  }
  const auto path = cfg.output_dir / "noise_sweep.svg";
  plot::write_svg(path, chart);
  out.files.push_back(path);
}

void fewshot_sweep(const ExperimentConfig& cfg, const DataSplits& data, ExperimentOutput& out) {
  for (std::size_t d : cfg.shots) {
    for (auto seed : cfg.seeds) {
      const Dataset subset = few_shot_sample(data.train, d, stream_seed(seed, "few-shot", d));
      for (const auto& m : cfg.models) train_and_score(cfg, {"fewshot_sweep", 0.0, d, seed}, m, subset, data.test, out);
    }
  }
  plot::Chart chart{"Test top-1 vs examples per class", "D", "test_top1", true, true, {}};
  const auto fit_path = cfg.output_dir / "powerlaw.csv";
  std::ofstream fits(fit_path);
  fits << "model,slope,intercept,r2,p_value,points\n";
  for (const auto& m : cfg.models) {
    plot::Series s{m, {}, {}};
    for (std::size_t d : cfg.shots) {
      s.x.push_back(static_cast<double>(d));
      s.y.push_back(mean_of(out.rows, m, "test_top1", 0.0, d));
    }
    try {
      const PowerLawFit fit = powerlaw_fit(s.x, s.y);
      fits << m << ',' << format_number(fit.slope) << ',' << format_number(fit.intercept) << ','
           << format_number(fit.r_squared) << ',' << format_number(fit.p_value) << ',' << fit.points << '\n';
      plot::Series line{m + " fit", {}, {}, false, true};
      for (double x : s.x) {
        line.x.push_back(x);
        line.y.push_back(std::exp(fit.intercept) * std::pow(x, fit.slope));
      }
      chart.series.push_back(std::move(s));
      chart.series.push_back(std::move(line));
    } catch (const MetricError& e) {
      fits << m << ",NaN,NaN,NaN,NaN,0\n";
      chart.series.push_back(std::move(s));
    }
  }
  out.files.push_back(fit_path);
  const auto path = cfg.output_dir / "fewshot_sweep.svg";
  plot::write_svg(path, chart);
  out.files.push_back(path);
}

void ablation(const ExperimentConfig& cfg, const DataSplits& data, ExperimentOutput& out) {
  static const std::vector<std::string> configs{"dfm", "dfm-no-decay", "dfm-no-ortho", "dfm-conv"};
  const double sigma = cfg.sigma.front();
  for (auto seed : cfg.seeds) {
    for (const auto& m : configs) train_and_score(cfg, {"ablation", sigma, std::nullopt, seed}, m, data.train, data.test, out);
  }
}

void corruption_eval(const ExperimentConfig& cfg, const DataSplits& data, ExperimentOutput& out) {
  if (data.test.segmentation()) throw ConfigError("corruption_eval: classification datasets only");
  for (auto seed : cfg.seeds) {
    const Cell cell{"corruption_eval", 0.0, std::nullopt, seed};
    for (const auto& m : cfg.models) {
      TrainedRun run = train_and_score(cfg, cell, m, data.train, data.test, out);
      for (const auto& c : cfg.corruptions) {
        const std::string metric = "test_top1@" + c.to_string();
        if (run.failure) {
          out.rows.push_back({cell.mode, m, 0.0, std::nullopt, seed, metric, kNaN, *run.failure});
          continue;
        }
        const Evaluation ev = evaluate(*run.model, data.test, cfg.train.label_smoothing,
                                       [&](const Tensor& x, std::size_t i) {
                                         return corrupt(x, c, stream_seed(seed, "corrupt-" + c.to_string(), i));
                                       });
        out.rows.push_back({cell.mode, m, 0.0, std::nullopt, seed, metric, ev.top1, ""});
      }
    }
  }
}

void trajectory_export(const ExperimentConfig& cfg, const DataSplits& data, ExperimentOutput& out) {
  for (auto seed : cfg.seeds) {
    const Cell cell{"trajectory_export", cfg.sigma.front(), std::nullopt, seed};
    for (const auto& m : cfg.models) {
      if (m == "ff") continue;  // no trajectory to export
      TrainedRun run = train_and_score(cfg, cell, m, data.train, data.test, out);
      if (run.failure) continue;
      const auto& fm = dynamic_cast<const FeedbackModel&>(*run.model);
      const auto recs = export_trajectories(fm, data.test, cfg.trajectory_instances, cfg.train.label_smoothing, seed);
      const std::string tag = run_tag(m, cell);
      const auto csv = cfg.output_dir / ("trajectory_" + tag + ".csv");
      const auto sm = cfg.output_dir / ("trajectory_softmax_" + tag + ".csv");
      write_trajectories(csv, sm, recs);
      out.files.push_back(csv);
      out.files.push_back(sm);

      std::vector<Eigen::MatrixXd> paths;
      const std::size_t steps = fm.config().steps + 1;
      for (std::size_t i = 0; i + steps <= recs.size(); i += steps) {
        Eigen::MatrixXd p(static_cast<Eigen::Index>(steps), static_cast<Eigen::Index>(data.test.classes));
        for (std::size_t t = 0; t < steps; ++t) {
          for (std::size_t c = 0; c < data.test.classes; ++c) p(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) = recs[i + t].probabilities[c];
        }
        paths.push_back(std::move(p));
      }
      try {
        const PcaResult pca = pca_trajectories(paths);
        plot::Chart chart{"PCA of prediction trajectories (" + m + ")", "PC1", "PC2", false, false, {}};
        for (std::size_t i = 0; i < pca.paths.size(); ++i) {
          plot::Series s{"instance " + std::to_string(i), {}, {}};
          for (Eigen::Index t = 0; t < pca.paths[i].rows(); ++t) {
            s.x.push_back(pca.paths[i](t, 0));
            s.y.push_back(pca.paths[i](t, 1));
          }
          chart.series.push_back(std::move(s));
        }
        const auto svg = cfg.output_dir / ("pca_" + tag + ".svg");
        plot::write_svg(svg, chart);
        out.files.push_back(svg);
        out.rows.push_back({cell.mode, m, cell.sigma, std::nullopt, seed, "pca_explained_1", pca.explained_variance(0), ""});
        out.rows.push_back({cell.mode, m, cell.sigma, std::nullopt, seed, "pca_explained_2", pca.explained_variance(1), ""});
      } catch (const MetricError& e) {
        out.rows.push_back({cell.mode, m, cell.sigma, std::nullopt, seed, "pca_explained_1", kNaN, e.what()});
      }
    }
  }
}

void cost_report(const ExperimentConfig& cfg, const DataSplits& data, ExperimentOutput& out) {
  const auto path = cfg.output_dir / "cost.csv";
  std::ofstream csv(path);
  csv << kCostHeader << '\n';
  const Shape shape = data.train.image_shape();
  const std::uint64_t seed = cfg.seeds.front();
  const Cell cell{"cost_report", 0.0, std::nullopt, seed};
  for (const auto& m : cfg.models) {
    const ModelDescriptor d = describe_model(m, cfg.backbone, cfg.train, data.train, seed);
    const auto model = build_model(d);
    std::vector<std::size_t> steps{cfg.train.steps};
    if (model->recurrent() && cfg.train.steps != 1) steps.push_back(1);
    for (std::size_t T : steps) {
      CostOptions opts;
      opts.batch_size = cfg.train.batch_size;
      const CostReport r = count_cost(*model, shape, T, opts);
      csv << m << ',' << T << ',' << r.parameter_count << ',' << r.flops_per_forward << ','
          << format_number(r.mean_batch_seconds) << '\n';
      const std::string suffix = "_T" + std::to_string(T);
      out.rows.push_back({cell.mode, m, 0.0, std::nullopt, seed, "parameters" + suffix,
                          static_cast<double>(r.parameter_count), ""});
      out.rows.push_back({cell.mode, m, 0.0, std::nullopt, seed, "flops" + suffix,
                          static_cast<double>(r.flops_per_forward), ""});
    }
  }
  out.files.push_back(path);
}

}  // namespace

ExperimentOutput run_experiment(const ExperimentConfig& cfg) {
  const DataSplits data = load_splits(cfg);
  cfg.validate(data.train.size(), data.train.classes);
  std::filesystem::create_directories(cfg.output_dir);
  ExperimentOutput out;
  switch (cfg.mode) {
    case ExperimentMode::kNoiseSweep: noise_sweep(cfg, data, out); break;
    case ExperimentMode::kFewShotSweep: fewshot_sweep(cfg, data, out); break;
    case ExperimentMode::kAblation: ablation(cfg, data, out); break;
    case ExperimentMode::kCorruptionEval: corruption_eval(cfg, data, out); break;
    case ExperimentMode::kTrajectoryExport: trajectory_export(cfg, data, out); break;
    case ExperimentMode::kCostReport: cost_report(cfg, data, out); break;
  }
  const auto results = cfg.output_dir / "results.csv";
  write_results(results, out.rows);
  out.files.insert(out.files.begin(), results);
  return out;
}

}  // namespace dfm

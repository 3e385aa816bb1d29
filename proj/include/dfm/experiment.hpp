#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dfm/data.hpp"
#include "dfm/feedback.hpp"
#include "dfm/metrics.hpp"
#include "dfm/training.hpp"

namespace dfm {

enum class ExperimentMode { kNoiseSweep, kFewShotSweep, kAblation, kCorruptionEval, kTrajectoryExport, kCostReport };

std::string_view mode_name(ExperimentMode mode);
ExperimentMode mode_from_name(std::string_view name);

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Architecture shared by every model of a run. Image size and class count
/// are taken from the dataset when it is loaded.
struct ArchConfig {
  std::vector<std::size_t> stage_widths{8, 16};
  std::size_t feedback_channels = 0;  // B; 0 means B = L
  std::size_t output_channels = 16;   // N
  double h_init_std = 1e-3;
  std::size_t conv_kernel = 3;
  ZMode z_mode = ZMode::kDamp;
};

struct ExperimentConfig {
  ExperimentMode mode = ExperimentMode::kNoiseSweep;
  std::string dataset;  // IDX directory, or "synthetic:seg"
  std::vector<double> sigma{0.0};
  std::vector<std::size_t> shots;  // D; empty means the full training set
  std::vector<std::uint64_t> seeds{0};
  TrainConfig train;
  std::filesystem::path output_dir = "out";
  std::vector<std::string> models{"dfm", "ff"};
  ArchConfig backbone;
  std::vector<Corruption> corruptions;
  std::size_t train_limit = 0;  // 0 keeps every training image
  std::size_t test_limit = 0;
  std::size_t trajectory_instances = 20;
  // synthetic:seg only
  std::size_t seg_classes = 4;
  std::size_t seg_size = 32;
  std::size_t seg_train = 256;
  std::size_t seg_test = 64;

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  // Static checks, including the noise / few-shot exclusivity given the
  // training-set size and class count.
  void validate(std::size_t train_size, std::size_t classes) const;
};

struct DataSplits {
  Dataset train;
  Dataset test;
};
DataSplits load_splits(const ExperimentConfig& cfg);

/// Everything needed to rebuild a model: stored next to its parameters.
struct ModelDescriptor {
  std::string name;  // dfm | ff | dfm-masked | dfm-no-decay | dfm-no-ortho | dfm-conv
  FeedbackConfig arch;
  std::uint64_t seed = 0;
  std::string dataset;  // where the model was trained; informational

  nlohmann::json to_json() const;
  static ModelDescriptor from_json(const nlohmann::json& j);
};

const std::vector<std::string>& known_models();
ModelDescriptor describe_model(const std::string& name, const ArchConfig& arch, const TrainConfig& train,
                               const Dataset& data, std::uint64_t seed);
std::unique_ptr<Model> build_model(const ModelDescriptor& d);
// The ablation flags a named model trains with (orthogonality is off for dfm-no-ortho).
AblationFlags model_ablation(const std::string& name, const AblationFlags& base);

// Checkpoint = DFM1 parameter file plus the descriptor as a "__meta__.config" entry.
void save_model(const std::filesystem::path& path, const Model& model, const ModelDescriptor& d);
std::pair<std::unique_ptr<Model>, ModelDescriptor> load_model(const std::filesystem::path& path);

struct ResultRow {
  std::string mode, model;
  double sigma = 0.0;
  std::optional<std::size_t> shots;  // empty = full training set
  std::uint64_t seed = 0;
  std::string metric;
  double value = 0.0;
  std::string reason;
};

inline constexpr std::string_view kResultsHeader = "mode,model,sigma,D,seed,metric,value,reason";
inline constexpr std::string_view kTrainLogHeader = "epoch,step,lr,loss,metric,q_ortho_residual";
inline constexpr std::string_view kTrajectoryHeader = "run_id,seed,t,loss,norm_h,norm_step,pred_class";
inline constexpr std::string_view kSoftmaxHeader = "run_id,seed,t,class,prob";
inline constexpr std::string_view kCostHeader = "model,T,parameters,flops,mean_batch_seconds";

std::string format_number(double v);
void write_results(const std::filesystem::path& path, const std::vector<ResultRow>& rows);
void write_train_log(const std::filesystem::path& path, const std::vector<StepLog>& log);

struct TrainedRun {
  std::unique_ptr<Model> model;
  ModelDescriptor descriptor;
  std::vector<StepLog> log;
  std::optional<std::string> failure;  // set when training diverged
};

// Trains one named model; divergence is captured in `failure`, not thrown.
TrainedRun train_model(const std::string& name, const ExperimentConfig& cfg, const Dataset& train, double sigma,
                       std::uint64_t seed);

// Test-set inputs get their own noise stream at the training sigma.
Evaluation evaluate_noisy(const Model& model, const Dataset& data, double sigma, double label_smoothing,
                          std::uint64_t seed);

struct TrajectoryRecord {
  std::size_t run_id = 0;
  std::uint64_t seed = 0;
  std::size_t t = 0;
  double loss = 0.0;
  double norm_h = 0.0;
  double norm_step = 0.0;
  std::size_t pred_class = 0;
  std::vector<double> probabilities;
};

std::vector<TrajectoryRecord> export_trajectories(const FeedbackModel& model, const Dataset& data,
                                                  std::size_t instances, double label_smoothing,
                                                  std::uint64_t seed);
void write_trajectories(const std::filesystem::path& csv, const std::filesystem::path& softmax_csv,
                        const std::vector<TrajectoryRecord>& records);

struct ExperimentOutput {
  std::vector<ResultRow> rows;
  std::vector<std::filesystem::path> files;
};

// Runs every cell of the sweep and writes results.csv plus mode-specific
// artifacts into cfg.output_dir.
ExperimentOutput run_experiment(const ExperimentConfig& cfg);

}  // namespace dfm

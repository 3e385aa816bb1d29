#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "dfm/backbone.hpp"
#include "dfm/linalg.hpp"
#include "dfm/tensor.hpp"

namespace dfm {

struct Dataset;

struct AblationFlags {
  bool exp_decay = true;
  bool orthogonality = true;
  bool conv_decay = false;
};

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double lr_initial = 0.05;
  double lr_max = 1.0;
  double lr_final = 5e-5;
  double warmup_fraction = 0.3;
  double momentum = 0.9;
  double label_smoothing = 0.1;
  std::size_t steps = 5;  // T
  double tau = 1.0;
  std::uint64_t seed = 0;
  AblationFlags ablation;
  bool mask_feedback = false;

  void validate() const;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// -sum_c q_c log softmax(logits)_c with q = (1 - s) onehot + s / L.
Tensor smoothed_cross_entropy(const Tensor& logits, std::size_t target, std::size_t classes, double smoothing);
// Segmentation: logits (L, H, W), mask of H*W class indices; mean over pixels.
Tensor smoothed_cross_entropy(const Tensor& logits, const std::vector<int>& mask, std::size_t classes,
                              double smoothing);

// Cosine ramp lr_initial -> lr_max over the warm-up fraction, cosine anneal to lr_final after.
double onecycle_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

struct OptimizerState {
  std::size_t step = 0;
  double lr = 0.0;
  double momentum = 0.9;
  std::unordered_map<std::string, std::vector<double>> velocity;
};

// v <- momentum * v + g; theta <- theta - lr * v. Checks every gradient before
// touching any parameter. Missing gradients count as zero.
void sgd_step(const ParameterList& params, const std::vector<Tensor>& grads, OptimizerState& opt);

// Q factor of the Gram-Schmidt QR of an updated Q.
linalg::SmallMatrix orthogonal_correction(const linalg::SmallMatrix& q_updated);

struct EpochMetrics {
  double mean_loss = 0.0;
  double metric = 0.0;  // accuracy or mIoU
  double q_ortho_residual = 0.0;
};

struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double metric = 0.0;
  double q_ortho_residual = 0.0;
};

class Trainer {
 public:
  Trainer(Model& model, TrainConfig cfg, std::size_t train_size);

  EpochMetrics train_epoch(const Dataset& data, double sigma, std::size_t epoch);
  std::vector<EpochMetrics> fit(const Dataset& data, double sigma);

  const OptimizerState& optimizer() const { return opt_; }
  std::size_t total_steps() const { return total_steps_; }
  const std::vector<StepLog>& log() const { return log_; }
  std::function<void(const StepLog&)> on_step;

 private:
  Model& model_;
  TrainConfig cfg_;
  OptimizerState opt_;
  std::size_t batches_per_epoch_;
  std::size_t total_steps_;
  std::vector<StepLog> log_;
};

EpochMetrics train_epoch(Trainer& trainer, const Dataset& data, double sigma, std::size_t epoch);

struct Evaluation {
  std::vector<std::vector<double>> logits;  // classification
  std::vector<std::vector<int>> predicted_masks;  // segmentation
  double mean_loss = 0.0;
  double top1 = 0.0;
  double top5 = 0.0;
  double miou = 0.0;
  double auc = 0.0;
};

// Inputs are perturbed by `perturb` (identity when empty) before the forward pass.
Evaluation evaluate(const Model& model, const Dataset& data, double label_smoothing,
                    const std::function<Tensor(const Tensor&, std::size_t)>& perturb = {});

}  // namespace dfm

#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dfm/tensor.hpp"

namespace dfm {

class MetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Index of the largest value; ties go to the lower index.
std::size_t argmax(std::span<const double> values);

// Per-pixel argmax over the channel axis of (L, H, W) logits.
std::vector<int> argmax_mask(const Tensor& logits);

// Fraction of rows whose target ranks among the k largest logits. A class
// ranks above the target if its logit is larger, or equal with a lower index.
double topk_accuracy(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets, std::size_t k);

// Mean IoU over the classes present in the ground truth.
double miou(const std::vector<std::vector<int>>& predicted, const std::vector<std::vector<int>>& truth,
            std::size_t classes);

// P(score of a random positive > score of a random negative); ties count 0.5.
double auc(std::span<const double> scores, std::span<const int> labels);
// Macro one-vs-rest over classes that have both positives and negatives.
double auc_ovr_macro(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets,
                     std::size_t classes);

struct PowerLawFit {
  double slope = 0.0;
  double intercept = 0.0;  // log-space
  double r_squared = 0.0;
  double p_value = 1.0;    // two-sided t-test on the slope
  double slope_stderr = 0.0;
  std::size_t points = 0;  // after dropping non-positive values
  std::size_t dropped = 0;
};

// OLS of log y on log x. Non-positive pairs are dropped with a warning on
// std::clog; at least three must remain.
PowerLawFit powerlaw_fit(std::span<const double> x, std::span<const double> y);

struct PcaResult {
  Eigen::MatrixXd components;          // (dim, 2), columns are unit directions
  Eigen::Vector2d explained_variance;  // descending
  Eigen::VectorXd mean;
  // paths[i] is (steps, 2), the projection of trajectory i.
  std::vector<Eigen::MatrixX2d> paths;
};

// trajectories[i] is (steps, dim). All (instance, t) rows are pooled and
// centered; each component is signed so its largest-magnitude entry is positive.
PcaResult pca_trajectories(const std::vector<Eigen::MatrixXd>& trajectories);

}  // namespace dfm

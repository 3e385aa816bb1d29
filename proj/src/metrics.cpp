#include "dfm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include <boost/math/distributions/students_t.hpp>

namespace dfm {

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw MetricError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

std::vector<int> argmax_mask(const Tensor& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax_mask: expected (L,H,W), got " + shape_str(logits.shape()));
  const std::size_t classes = logits.dim(0), pixels = logits.dim(1) * logits.dim(2);
  const auto d = logits.data();
  std::vector<int> out(pixels, 0);
  for (std::size_t p = 0; p < pixels; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (d[c * pixels + p] > d[best * pixels + p]) best = c;
    }
    out[p] = static_cast<int>(best);
  }
  return out;
}

double topk_accuracy(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets, std::size_t k) {
  if (logits.size() != targets.size()) throw MetricError("topk_accuracy: logits/targets count mismatch");
  if (logits.empty()) throw MetricError("topk_accuracy: no instances");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& row = logits[i];
    if (k == 0 || k > row.size()) throw MetricError("topk_accuracy: k must be in [1, L]");
    const auto target = static_cast<std::size_t>(targets[i]);
    if (targets[i] < 0 || target >= row.size()) throw MetricError("topk_accuracy: target out of range");
    std::size_t above = 0;
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (row[c] > row[target] || (row[c] == row[target] && c < target)) ++above;
    }
    if (above < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(logits.size());
}

double miou(const std::vector<std::vector<int>>& predicted, const std::vector<std::vector<int>>& truth,
            std::size_t classes) {
  if (predicted.size() != truth.size()) throw MetricError("miou: mask count mismatch");
  std::vector<std::size_t> inter(classes, 0), uni(classes, 0), present(classes, 0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i].size() != truth[i].size()) throw MetricError("miou: mask size mismatch at " + std::to_string(i));
    for (std::size_t p = 0; p < truth[i].size(); ++p) {
      const int a = predicted[i][p], b = truth[i][p];
      if (a < 0 || b < 0 || static_cast<std::size_t>(a) >= classes || static_cast<std::size_t>(b) >= classes) {
        throw MetricError("miou: class index out of range");
      }
      ++present[b];
      if (a == b) {
        ++inter[a];
        ++uni[a];
      } else {
        ++uni[a];
        ++uni[b];
      }
    }
  }
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    if (present[c] == 0) continue;
    total += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    ++counted;
  }
  if (counted == 0) throw MetricError("miou: empty ground truth");
  return total / static_cast<double>(counted);
}

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricError("auc: scores/labels size mismatch");
  // Rank-sum with midranks for ties.
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double positive_rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j + 1);  // 1-based average of i+1..j
    for (std::size_t m = i; m < j; ++m) {
      if (labels[order[m]] != 0) {
        positive_rank_sum += midrank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = scores.size() - positives;
  if (positives == 0 || negatives == 0) throw MetricError("auc: both classes must be present");
  const double np = static_cast<double>(positives), nn = static_cast<double>(negatives);
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

double auc_ovr_macro(const std::vector<std::vector<double>>& logits, const std::vector<int>& targets,
                     std::size_t classes) {
  if (logits.size() != targets.size()) throw MetricError("auc: logits/targets count mismatch");
  double total = 0.0;
  std::size_t counted = 0;
  std::vector<double> scores(logits.size());
  std::vector<int> labels(logits.size());
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t pos = 0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      scores[i] = logits[i].at(c);
      labels[i] = targets[i] == static_cast<int>(c) ? 1 : 0;
      pos += static_cast<std::size_t>(labels[i]);
    }
    if (pos == 0 || pos == logits.size()) continue;
    total += auc(scores, labels);
    ++counted;
  }
  if (counted == 0) throw MetricError("auc: no class has both positives and negatives");
  return total / static_cast<double>(counted);
}

PowerLawFit powerlaw_fit(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw MetricError("powerlaw_fit: x/y size mismatch");
  std::vector<double> lx, ly;
  PowerLawFit fit;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) {
      ++fit.dropped;
      continue;
    }
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  if (fit.dropped > 0) {
    std::clog << "powerlaw_fit: dropped " << fit.dropped << " non-positive point(s)\n";
  }
  const std::size_t n = lx.size();
  if (n < 3) throw MetricError("powerlaw_fit: need at least 3 positive points, have " + std::to_string(n));
  fit.points = n;

  const Eigen::Map<const Eigen::VectorXd> X(lx.data(), static_cast<Eigen::Index>(n));
  const Eigen::Map<const Eigen::VectorXd> Y(ly.data(), static_cast<Eigen::Index>(n));
  const double mx = X.mean(), my = Y.mean();
  const double sxx = (X.array() - mx).square().sum();
  const double sxy = ((X.array() - mx) * (Y.array() - my)).sum();
  const double syy = (Y.array() - my).square().sum();
  if (sxx == 0.0) throw MetricError("powerlaw_fit: all x values are equal");

  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  const double sse = ((Y.array() - fit.intercept - fit.slope * X.array()).square()).sum();
  fit.r_squared = syy == 0.0 ? 1.0 : 1.0 - sse / syy;
  const double dof = static_cast<double>(n - 2);
  fit.slope_stderr = std::sqrt(sse / dof / sxx);
  if (fit.slope_stderr == 0.0) {
    fit.p_value = fit.slope == 0.0 ? 1.0 : 0.0;
  } else {
    const boost::math::students_t dist(dof);
    const double tstat = std::abs(fit.slope / fit.slope_stderr);
    fit.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, tstat));
  }
  return fit;
}

PcaResult pca_trajectories(const std::vector<Eigen::MatrixXd>& trajectories) {
  if (trajectories.size() < 2) throw MetricError("pca: need at least 2 trajectories");
  const Eigen::Index dim = trajectories.front().cols();
  Eigen::Index rows = 0;
  for (const auto& t : trajectories) {
    if (t.rows() < 2) throw MetricError("pca: each trajectory needs at least 2 steps");
    if (t.cols() != dim) throw MetricError("pca: trajectories differ in dimension");
    rows += t.rows();
  }
  if (dim < 2) throw MetricError("pca: need at least 2 dimensions");

  Eigen::MatrixXd pool(rows, dim);
  Eigen::Index r = 0;
  for (const auto& t : trajectories) {
    pool.middleRows(r, t.rows()) = t;
    r += t.rows();
  }
  PcaResult out;
  out.mean = pool.colwise().mean().transpose();
  const Eigen::MatrixXd centered = pool.rowwise() - out.mean.transpose();
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(rows - 1);
  if (cov.trace() <= 0.0) throw MetricError("pca: zero-variance pool");

  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  if (es.info() != Eigen::Success) throw MetricError("pca: eigensolver failed");
  out.components.resize(dim, 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd c = es.eigenvectors().col(dim - 1 - k);  // ascending order
    Eigen::Index at = 0;
    c.cwiseAbs().maxCoeff(&at);
    if (c(at) < 0.0) c = -c;
    out.components.col(k) = c;
    out.explained_variance(k) = std::max(0.0, es.eigenvalues()(dim - 1 - k));
  }
  for (const auto& t : trajectories) {
    out.paths.emplace_back((t.rowwise() - out.mean.transpose()) * out.components);
  }
  return out;
}

}  // namespace dfm

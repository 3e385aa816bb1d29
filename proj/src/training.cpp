#include "dfm/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "dfm/data.hpp"
#include "dfm/metrics.hpp"
#include "dfm/random.hpp"

namespace dfm {

void TrainConfig::validate() const {
  if (epochs == 0 || batch_size == 0) throw std::invalid_argument("train: epochs and batch_size must be >= 1");
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) throw std::invalid_argument("train: label_smoothing must be in [0, 1)");
  if (!(lr_initial > 0.0 && lr_max > 0.0 && lr_final > 0.0)) throw std::invalid_argument("train: learning rates must be positive");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) throw std::invalid_argument("train: warmup_fraction must be in (0, 1)");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("train: momentum must be in [0, 1)");
  if (steps < 1) throw std::invalid_argument("train: T must be >= 1 for training");
  if (!(tau > 0.0)) throw std::invalid_argument("train: tau must be positive");
}

Tensor smoothed_cross_entropy(const Tensor& logits, std::size_t target, std::size_t classes, double smoothing) {
  if (logits.rank() != 1 || logits.dim(0) != classes) {
    throw ShapeError("cross entropy: logits must have shape (" + std::to_string(classes) + "), got " +
                     shape_str(logits.shape()));
  }
  if (target >= classes) throw std::out_of_range("cross entropy: target " + std::to_string(target) + " out of range");
  std::vector<double> q(classes, smoothing / static_cast<double>(classes));
  q[target] += 1.0 - smoothing;
  return scale(sum(mul(log_softmax_channels(logits), Tensor({classes}, std::move(q)))), -1.0);
}

Tensor smoothed_cross_entropy(const Tensor& logits, const std::vector<int>& mask, std::size_t classes,
                              double smoothing) {
  if (logits.rank() != 3 || logits.dim(0) != classes) {
    throw ShapeError("cross entropy: logits must have shape (L,H,W) with L=" + std::to_string(classes));
  }
  const std::size_t pixels = logits.dim(1) * logits.dim(2);
  if (mask.size() != pixels) throw ShapeError("cross entropy: mask size does not match logits");
  std::vector<double> q(classes * pixels, smoothing / static_cast<double>(classes));
  for (std::size_t p = 0; p < pixels; ++p) {
    if (mask[p] < 0 || static_cast<std::size_t>(mask[p]) >= classes) {
      throw std::out_of_range("cross entropy: mask value out of range at pixel " + std::to_string(p));
    }
    q[static_cast<std::size_t>(mask[p]) * pixels + p] += 1.0 - smoothing;
  }
  return scale(sum(mul(log_softmax_channels(logits), Tensor(logits.shape(), std::move(q)))),
               -1.0 / static_cast<double>(pixels));
}

double onecycle_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0) throw std::invalid_argument("onecycle_lr: total_steps must be positive");
  if (step > total_steps) {
    throw std::out_of_range("onecycle_lr: step " + std::to_string(step) + " beyond total " + std::to_string(total_steps));
  }
  const double s = static_cast<double>(step);
  const double warm = cfg.warmup_fraction * static_cast<double>(total_steps);
  auto cosine = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (s <= warm) return cosine(cfg.lr_initial, cfg.lr_max, s / warm);
  return cosine(cfg.lr_max, cfg.lr_final, (s - warm) / (static_cast<double>(total_steps) - warm));
}

void sgd_step(const ParameterList& params, const std::vector<Tensor>& grads, OptimizerState& opt) {
  if (grads.size() != params.size()) throw std::invalid_argument("sgd_step: one gradient per parameter required");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].defined() && !grads[i].all_finite()) {
      throw NonFiniteError("sgd_step: non-finite gradient for parameter " + params[i].name);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].value;
    auto& vel = opt.velocity[params[i].name];
    if (vel.size() != p.numel()) vel.assign(p.numel(), 0.0);
    auto data = p.mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grads[i].defined() ? grads[i][j] : 0.0;
      vel[j] = opt.momentum * vel[j] + g;
      data[j] -= opt.lr * vel[j];
    }
  }
  ++opt.step;
}

linalg::SmallMatrix orthogonal_correction(const linalg::SmallMatrix& q_updated) {
  return linalg::gram_schmidt_qr(q_updated).first;
}

Trainer::Trainer(Model& model, TrainConfig cfg, std::size_t train_size) : model_(model), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (train_size == 0) throw std::invalid_argument("trainer: dataset is empty");
  batches_per_epoch_ = (train_size + cfg_.batch_size - 1) / cfg_.batch_size;
  total_steps_ = batches_per_epoch_ * cfg_.epochs;
  opt_.momentum = cfg_.momentum;
  opt_.lr = onecycle_lr(0, total_steps_, cfg_);
}

EpochMetrics Trainer::train_epoch(const Dataset& data, double sigma, std::size_t epoch) {
  if (data.size() == 0) throw std::invalid_argument("train_epoch: dataset is empty");
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle = make_rng(cfg_.seed, "shuffle", epoch);
  std::shuffle(order.begin(), order.end(), shuffle);

  const ParameterList params = model_.parameters();
  EpochMetrics metrics;
  double loss_sum = 0.0, metric_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
    for (const auto& p : params) Tensor(p.value).zero_grad();
    double batch_loss = 0.0, batch_metric = 0.0;
    for (std::size_t b = start; b < end; ++b) {
      const std::size_t idx = order[b];
      const std::uint64_t instance = epoch * data.size() + b;
      Tensor x = data.images[idx];
      if (sigma > 0.0) x = add_gaussian_noise(x, sigma, stream_seed(cfg_.seed, "train-noise", instance));
      Tensor loss;
      Tensor logits;
      try {
        logits = model_.predict(x, stream_seed(cfg_.seed, "train-state", instance));
        loss = data.segmentation()
                   ? smoothed_cross_entropy(logits, data.masks[idx], data.classes, cfg_.label_smoothing)
                   : smoothed_cross_entropy(logits, static_cast<std::size_t>(data.labels[idx]), data.classes,
                                            cfg_.label_smoothing);
      } catch (const NonFiniteError& e) {
        Tape::current().clear();
        throw DivergenceError("instance " + std::to_string(idx) + ": " + e.what());
      }
      if (!std::isfinite(loss.item())) {
        Tape::current().clear();
        throw DivergenceError("instance " + std::to_string(idx) + ": non-finite loss");
      }
      // Mean over the batch: scale each instance's contribution.
      backward(scale(loss, 1.0 / static_cast<double>(end - start)));
      batch_loss += loss.item();
      if (data.segmentation()) {
        batch_metric += miou({argmax_mask(logits)}, {data.masks[idx]}, data.classes);
      } else {
        batch_metric += argmax(logits.data()) == static_cast<std::size_t>(data.labels[idx]) ? 1.0 : 0.0;
      }
    }
    std::vector<Tensor> grads;
    for (const auto& p : params) grads.push_back(p.value.has_grad() ? p.value.grad_tensor() : Tensor());
    opt_.lr = onecycle_lr(opt_.step, total_steps_, cfg_);
    try {
      sgd_step(params, grads, opt_);
    } catch (const NonFiniteError& e) {
      throw DivergenceError(std::string("batch at instance ") + std::to_string(start) + ": " + e.what());
    }
    model_.post_update(cfg_.ablation.orthogonality);

    const double n = static_cast<double>(end - start);
    StepLog entry{epoch, opt_.step - 1, opt_.lr, batch_loss / n, batch_metric / n, model_.orthogonality_residual()};
    log_.push_back(entry);
    if (on_step) on_step(entry);
    if (!std::isfinite(entry.q_ortho_residual)) throw DivergenceError("non-finite Q after update");
    loss_sum += batch_loss;
    metric_sum += batch_metric;
  }
  for (const auto& p : params) Tensor(p.value).zero_grad();
  metrics.mean_loss = loss_sum / static_cast<double>(data.size());
  metrics.metric = metric_sum / static_cast<double>(data.size());
  metrics.q_ortho_residual = model_.orthogonality_residual();
  return metrics;
}

std::vector<EpochMetrics> Trainer::fit(const Dataset& data, double sigma) {
  std::vector<EpochMetrics> out;
  for (std::size_t e = 0; e < cfg_.epochs; ++e) out.push_back(train_epoch(data, sigma, e));
  return out;
}

EpochMetrics train_epoch(Trainer& trainer, const Dataset& data, double sigma, std::size_t epoch) {
  return trainer.train_epoch(data, sigma, epoch);
}

Evaluation evaluate(const Model& model, const Dataset& data, double label_smoothing,
                    const std::function<Tensor(const Tensor&, std::size_t)>& perturb) {
  NoGradGuard guard;
  Evaluation ev;
  std::vector<int> targets;
  double loss = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor x = perturb ? perturb(data.images[i], i) : data.images[i];
    const Tensor logits = model.predict(x, stream_seed(0, "eval-state", i));
    if (data.segmentation()) {
      loss += smoothed_cross_entropy(logits, data.masks[i], data.classes, label_smoothing).item();
      ev.predicted_masks.push_back(argmax_mask(logits));
    } else {
      loss += smoothed_cross_entropy(logits, static_cast<std::size_t>(data.labels[i]), data.classes, label_smoothing).item();
      ev.logits.emplace_back(logits.data().begin(), logits.data().end());
    }
  }
  ev.mean_loss = loss / static_cast<double>(data.size());
  if (data.segmentation()) {
    ev.miou = miou(ev.predicted_masks, data.masks, data.classes);
  } else {
    ev.top1 = topk_accuracy(ev.logits, data.labels, 1);
    ev.top5 = topk_accuracy(ev.logits, data.labels, std::min<std::size_t>(5, data.classes));
    ev.auc = auc_ovr_macro(ev.logits, data.labels, data.classes);
  }
  return ev;
}

}  // namespace dfm

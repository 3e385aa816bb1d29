#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "dfm/data.hpp"
#include "dfm/feedback.hpp"
#include "dfm/training.hpp"
#include "support.hpp"

using namespace dfm;
using dfm::testing::random_tensor;
using Eigen::MatrixXd;

namespace {

// Two linearly separable classes on 4x4 images: mass on the left or right half.
Dataset halves(std::size_t n, std::uint64_t seed) {
  Dataset d;
  d.classes = 2;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 0.3);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    std::vector<double> px(16);
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t c = 0; c < 4; ++c) px[r * 4 + c] = u(rng) + (((c < 2) == (label == 0)) ? 0.7 : 0.0);
    }
    d.images.emplace_back(Shape{1, 4, 4}, px);
    d.labels.push_back(label);
  }
  return d;
}

FeedbackConfig toy_model() {
  FeedbackConfig c;
  c.height = c.width = 4;
  c.stage_widths = {4};
  c.feedback_channels = 2;
  c.output_channels = 4;
  c.classes = 2;
  c.steps = 2;
  return c;
}

// One tenth of the default schedule; the full one diverges these tiny
// batch-norm-free networks.
TrainConfig toy_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.lr_initial = 0.005;
  t.lr_max = 0.1;
  t.lr_final = 5e-6;
  t.steps = 2;
  return t;
}

MatrixXd gaussian(Eigen::Index n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

}  // namespace

TEST_CASE("cross entropy vanishes for an overwhelming margin") {
  const Tensor logits({3}, {0.0, 800.0, 0.0});
  CHECK(smoothed_cross_entropy(logits, 1, 3, 0.0).item() < 1e-300);
}

TEST_CASE("cross entropy of uniform logits is log L") {
  for (std::size_t target = 0; target < 7; ++target) {
    CHECK(smoothed_cross_entropy(Tensor::zeros({7}), target, 7, 0.0).item() == doctest::Approx(std::log(7.0)).epsilon(1e-15));
  }
}

TEST_CASE("smoothed cross entropy matches the formula evaluated directly") {
  const Tensor logits = random_tensor({10}, 3, 2.0);
  const std::size_t target = 4;
  const double s = 0.1;
  // Oracle: log-sum-exp with the max subtracted, then the weighted sum.
  double m = logits[0];
  for (std::size_t i = 1; i < 10; ++i) m = std::max(m, logits[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < 10; ++i) z += std::exp(logits[i] - m);
  const double lse = m + std::log(z);
  double expected = 0.0;
  for (std::size_t i = 0; i < 10; ++i) expected -= ((i == target ? 1.0 - s : 0.0) + s / 10.0) * (logits[i] - lse);
  CHECK(std::abs(smoothed_cross_entropy(logits, target, 10, s).item() - expected) < 1e-12);
  CHECK_THROWS_AS(smoothed_cross_entropy(logits, 10, 10, s), std::out_of_range);
}

TEST_CASE("segmentation cross entropy averages over pixels") {
  const Tensor logits = random_tensor({3, 2, 2}, 5);
  const std::vector<int> mask{0, 1, 2, 1};
  double expected = 0.0;
  for (std::size_t p = 0; p < 4; ++p) {
    const Tensor px({3}, {logits[p], logits[4 + p], logits[8 + p]});
    expected += smoothed_cross_entropy(px, static_cast<std::size_t>(mask[p]), 3, 0.1).item();
  }
  CHECK(smoothed_cross_entropy(logits, mask, 3, 0.1).item() == doctest::Approx(expected / 4.0).epsilon(1e-14));
  CHECK_THROWS_AS(smoothed_cross_entropy(logits, std::vector<int>{0, 1, 3, 1}, 3, 0.1), std::out_of_range);
}

TEST_CASE("cross entropy of a linear layer passes the gradient check") {
  const Tensor x = random_tensor({5, 1}, 7);
  auto f = [&](const Tensor& w) { return smoothed_cross_entropy(reshape(matmul(w, x), {4}), 2, 4, 0.1); };
  CHECK(grad_check(f, random_tensor({4, 5}, 8), 1e-5) < 1e-4);
}

TEST_CASE("one-cycle schedule hits its default learning rates") {
  const TrainConfig cfg;
  CHECK(onecycle_lr(0, 1000, cfg) == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(onecycle_lr(300, 1000, cfg) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(onecycle_lr(1000, 1000, cfg) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK_THROWS_AS(onecycle_lr(1001, 1000, cfg), std::out_of_range);
  double prev = 0.0;
  for (std::size_t s = 0; s <= 300; ++s) {
    const double lr = onecycle_lr(s, 1000, cfg);
    CHECK(lr >= prev);
    prev = lr;
  }
  for (std::size_t s = 301; s <= 1000; ++s) {
    const double lr = onecycle_lr(s, 1000, cfg);
    CHECK(lr <= prev);
    prev = lr;
  }
}

TEST_CASE("train config defaults and validation") {
  const TrainConfig cfg;
  CHECK(cfg.batch_size == 32);
  CHECK(cfg.label_smoothing == 0.1);
  CHECK(cfg.steps == 5);
  CHECK(cfg.tau == 1.0);
  CHECK(cfg.momentum == 0.9);
  CHECK_NOTHROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.label_smoothing = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.steps = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.lr_final = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("sgd step basics") {
  Tensor theta({1}, {2.0});
  const ParameterList params{{"theta", theta}};
  OptimizerState opt;
  opt.lr = 0.1;
  sgd_step(params, {Tensor({1}, {0.0})}, opt);
  CHECK(theta[0] == 2.0);
  sgd_step(params, {Tensor()}, opt);
  CHECK(theta[0] == 2.0);
  CHECK(opt.step == 2);

  Tensor fresh({1}, {2.0});
  OptimizerState clean;
  clean.lr = 0.1;
  sgd_step({{"fresh", fresh}}, {Tensor({1}, {1.0})}, clean);
  CHECK(fresh[0] == doctest::Approx(1.9).epsilon(1e-15));
  // Momentum carries the previous velocity: v = 0.9 * 1 + 1.
  sgd_step({{"fresh", fresh}}, {Tensor({1}, {1.0})}, clean);
  CHECK(fresh[0] == doctest::Approx(1.9 - 0.19).epsilon(1e-15));
}

TEST_CASE("sgd rejects non-finite gradients before touching anything") {
  Tensor a({1}, {1.0}), b({1}, {1.0});
  OptimizerState opt;
  opt.lr = 0.1;
  try {
    sgd_step({{"a", a}, {"b", b}}, {Tensor({1}, {1.0}), Tensor({1}, {std::nan("")})}, opt);
    FAIL("expected an error");
  } catch (const NonFiniteError& e) {
    CHECK(std::string(e.what()).find("b") != std::string::npos);
  }
  CHECK(a[0] == 1.0);
  CHECK(opt.step == 0);
}

TEST_CASE("sgd on a quadratic bowl") {
  Tensor theta({1}, {3.0});
  OptimizerState plain;
  plain.lr = 0.01;
  plain.momentum = 0.0;
  double prev = std::abs(theta[0]);
  for (int i = 0; i < 100; ++i) {
    sgd_step({{"theta", theta}}, {Tensor({1}, {2.0 * theta[0]})}, plain);
    CHECK(std::abs(theta[0]) < prev);
    prev = std::abs(theta[0]);
  }
  // With momentum the iterate spirals in, so only the endpoint is compared.
  Tensor heavy({1}, {3.0});
  OptimizerState opt;
  opt.lr = 0.01;
  for (int i = 0; i < 100; ++i) sgd_step({{"heavy", heavy}}, {Tensor({1}, {2.0 * heavy[0]})}, opt);
  CHECK(std::abs(heavy[0]) < 3.0);
}

TEST_CASE("orthogonal correction projects back onto orthogonal matrices") {
  const MatrixXd q = orthogonal_correction(gaussian(6, 1));
  CHECK((orthogonal_correction(q) - q).cwiseAbs().maxCoeff() < 1e-12);

  const MatrixXd perturbed = q + 0.1 * gaussian(6, 2);
  const MatrixXd once = orthogonal_correction(perturbed);
  CHECK((once.transpose() * once - MatrixXd::Identity(6, 6)).cwiseAbs().rowwise().sum().maxCoeff() < 1e-10);
  CHECK((orthogonal_correction(once) - once).cwiseAbs().maxCoeff() < 1e-12);

  MatrixXd singular = q;
  singular.col(3).setZero();
  CHECK_THROWS_AS(orthogonal_correction(singular), linalg::RankDeficientError);
}

TEST_CASE("toy two-class problem is learned within 20 epochs") {
  const Dataset data = halves(64, 1);
  FeedbackModel model(toy_model(), 2);
  Trainer trainer(model, toy_train(20), data.size());
  const auto history = trainer.fit(data, 0.0);
  REQUIRE(history.size() == 20);
  CHECK(history.back().metric > 0.9);
  CHECK(history.back().mean_loss < history.front().mean_loss);
  CHECK(history.back().q_ortho_residual < 1e-10);
  for (const auto& entry : trainer.log()) {
    CHECK(std::isfinite(entry.loss));
    CHECK(entry.q_ortho_residual < 1e-10);
  }
}

TEST_CASE("logged learning rates follow the schedule") {
  const Dataset data = halves(64, 2);
  FeedbackModel model(toy_model(), 3);
  TrainConfig cfg = toy_train(10);
  Trainer trainer(model, cfg, data.size());
  trainer.fit(data, 0.0);
  const auto& log = trainer.log();
  REQUIRE(log.size() == trainer.total_steps());
  REQUIRE(log.size() == 20);
  for (const auto& e : log) CHECK(e.lr == onecycle_lr(e.step, trainer.total_steps(), cfg));
  CHECK(log.front().lr == doctest::Approx(cfg.lr_initial).epsilon(1e-15));
  CHECK(log[6].lr == doctest::Approx(cfg.lr_max).epsilon(1e-15));  // step 6 = 0.3 * 20
  CHECK(log.back().lr == onecycle_lr(19, 20, cfg));
}

TEST_CASE("training is deterministic to the last bit") {
  const Dataset data = halves(40, 3);
  auto run = [&] {
    FeedbackModel model(toy_model(), 4);
    Trainer trainer(model, toy_train(3), data.size());
    return trainer.fit(data, 0.2).back().mean_loss;
  };
  const double a = run(), b = run();
  CHECK(std::memcmp(&a, &b, sizeof a) == 0);
}

TEST_CASE("the decay ablation trains with an identity decay") {
  FeedbackConfig c = toy_model();
  c.exp_decay = false;
  FeedbackModel model(c, 5);
  const Eigen::VectorXd f = model.decay().decay_factors(4);
  for (Eigen::Index i = 0; i < f.size(); ++i) CHECK(f(i) == 1.0);
  const Dataset data = halves(32, 4);
  Trainer trainer(model, toy_train(2), data.size());
  CHECK_NOTHROW(trainer.fit(data, 0.0));
}

TEST_CASE("disabled correction lets Q drift off the orthogonal group") {
  const Dataset data = halves(64, 5);
  FeedbackModel model(toy_model(), 6);
  TrainConfig cfg = toy_train(5);
  cfg.ablation.orthogonality = false;
  Trainer trainer(model, cfg, data.size());
  trainer.fit(data, 0.0);
  CHECK(trainer.log().back().q_ortho_residual > 0.0);
}

TEST_CASE("divergence surfaces as a DivergenceError") {
  const Dataset data = halves(64, 6);
  FeedbackModel model(toy_model(), 7);
  TrainConfig cfg = toy_train(20);
  cfg.lr_initial = 1e6;
  cfg.lr_max = 1e12;
  cfg.ablation.orthogonality = false;
  Trainer trainer(model, cfg, data.size());
  CHECK_THROWS_AS(trainer.fit(data, 0.0), DivergenceError);
  CHECK(Tape::current().size() == 0);
}

TEST_CASE("evaluate reports accuracy, top-5 and AUC") {
  const Dataset data = halves(16, 7);
  const FeedbackModel model(toy_model(), 8);
  const Evaluation ev = evaluate(model, data, 0.1);
  CHECK(ev.logits.size() == 16);
  CHECK(ev.top1 >= 0.0);
  CHECK(ev.top1 <= 1.0);
  CHECK(ev.top5 == 1.0);  // k is capped at L = 2
  CHECK(std::isfinite(ev.mean_loss));
  CHECK(ev.auc >= 0.0);
}

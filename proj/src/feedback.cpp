#include "dfm/feedback.hpp"

#include <cmath>
#include <iostream>
#include <sstream>

#include "dfm/random.hpp"
#include "dfm/training.hpp"

namespace dfm {

namespace {

using linalg::ComplexMatrix;
using linalg::SmallMatrix;
using Complex = std::complex<double>;

Tensor matrix_to_tensor(const SmallMatrix& m, bool requires_grad) {
  Tensor t = Tensor::zeros({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, requires_grad);
  auto d = t.mutable_data();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) d[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
  }
  return t;
}

// Divided differences of exp over the spectrum: (e^a - e^b) / (a - b).
Complex exp_divided_difference(Complex a, Complex b) {
  const Complex d = a - b;
  if (std::abs(d) < 1e-4) return std::exp(b) * (1.0 + d / 2.0 + d * d / 6.0 + d * d * d / 24.0);
  return (std::exp(a) - std::exp(b)) / d;
}

}  // namespace

FeedbackState init_state(std::size_t feedback_channels, std::size_t output_channels, std::size_t latent_h,
                         std::size_t latent_w, double stddev, std::uint64_t seed) {
  if (!(stddev > 0.0) || !std::isfinite(stddev)) {
    throw std::invalid_argument("init_state: standard deviation must be positive (degenerate state)");
  }
  FeedbackState s;
  s.h_init_std = stddev;
  s.v = Tensor::zeros({feedback_channels, latent_h, latent_w});
  s.u = Tensor::zeros({output_channels, latent_h, latent_w});
  Rng rv = make_rng(seed, "state-v");
  Rng ru = make_rng(seed, "state-u");
  fill_normal(s.v.mutable_data(), 0.0, stddev, rv);
  fill_normal(s.u.mutable_data(), 0.0, stddev, ru);
  return s;
}

FeedbackState split_state(const Tensor& h, std::size_t feedback_channels, std::size_t t, double h_init_std) {
  FeedbackState s;
  s.v = slice(h, 0, feedback_channels);
  s.u = slice(h, feedback_channels, h.dim(0));
  s.t = t;
  s.h_init_std = h_init_std;
  return s;
}

Tensor feedback_input(const Tensor& x, const Tensor& v) {
  if (x.rank() != 3 || v.rank() != 3) {
    throw ShapeError("feedback_input: expected (C,H,W) and (B,h,w), got " + shape_str(x.shape()) + " and " +
                     shape_str(v.shape()));
  }
  Tensor fb = softmax_channels(upsample_nearest(v, x.dim(1), x.dim(2)));
  return concat({x, fb});
}

DecayOperator DecayOperator::random_orthogonal(std::size_t order, double tau, std::uint64_t seed) {
  Rng rng = make_rng(seed, "decay-q");
  SmallMatrix g(static_cast<Eigen::Index>(order), static_cast<Eigen::Index>(order));
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = n(rng);
  DecayOperator op = identity(order, tau);
  op.set_q(linalg::gram_schmidt_qr(g).first);
  return op;
}

DecayOperator DecayOperator::identity(std::size_t order, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("decay: tau must be positive");
  DecayOperator op;
  op.q = matrix_to_tensor(SmallMatrix::Identity(static_cast<Eigen::Index>(order), static_cast<Eigen::Index>(order)), true);
  op.sigma = -Eigen::VectorXd::Ones(static_cast<Eigen::Index>(order));
  op.tau = tau;
  return op;
}

SmallMatrix DecayOperator::q_matrix() const {
  const auto n = static_cast<Eigen::Index>(order());
  SmallMatrix m(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = q[static_cast<std::size_t>(i * n + j)];
  }
  return m;
}

void DecayOperator::set_q(const SmallMatrix& m) {
  const auto n = static_cast<Eigen::Index>(order());
  if (m.rows() != n || m.cols() != n) throw ShapeError("decay: Q must stay " + std::to_string(n) + "x" + std::to_string(n));
  auto d = q.mutable_data();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) d[static_cast<std::size_t>(i * n + j)] = m(i, j);
  }
}

Eigen::VectorXd DecayOperator::decay_factors(std::size_t t) const {
  if (!exp_decay) return Eigen::VectorXd::Ones(sigma.size());
  return (sigma * (static_cast<double>(t) / tau)).array().exp().matrix();
}

Tensor exp_decay_apply(const Tensor& delta, const DecayOperator& op, std::size_t t) {
  const std::size_t k = op.order();
  if (delta.rank() != 3 || delta.dim(0) != k) {
    throw ShapeError("exp_decay_apply: delta dim 0 must be " + std::to_string(k) + ", got " + shape_str(delta.shape()));
  }
  if (!delta.all_finite()) throw NonFiniteError("exp_decay_apply: non-finite delta");
  const Eigen::VectorXd f = op.decay_factors(t);
  Tensor diag = Tensor::zeros({k, k});
  for (std::size_t i = 0; i < k; ++i) diag.mutable_data()[i * k + i] = f(static_cast<Eigen::Index>(i));
  const Tensor m = matmul(matmul(op.q, diag), transpose(op.q));
  const std::size_t pixels = delta.dim(1) * delta.dim(2);
  // Each location's channel vector is a row of the (pixels, K) matrix.
  const Tensor rows = transpose(reshape(delta, {k, pixels}));
  return reshape(transpose(matmul(rows, m)), delta.shape());
}

Tensor exp_decay_apply_cancelled(const Tensor& delta, const DecayOperator& op, std::size_t t) {
  if (delta.rank() != 3 || delta.dim(0) != op.order()) {
    throw ShapeError("exp_decay_apply: delta dim 0 must be " + std::to_string(op.order()));
  }
  if (!op.exp_decay) return delta;
  return scale(delta, std::exp(-static_cast<double>(t) / op.tau));
}

ConvDecayKernel::ConvDecayKernel(std::size_t channels, std::size_t kernel_size, double tau, ZMode z_mode,
                                 std::uint64_t seed)
    : tau_(tau), z_mode_(z_mode) {
  if (kernel_size % 2 == 0 || kernel_size == 0) throw ShapeError("conv decay: kernel size must be odd");
  if (!(tau > 0.0)) throw std::invalid_argument("conv decay: tau must be positive");
  w_ = Tensor::zeros({channels, channels, kernel_size, kernel_size}, true);
  Rng rng = make_rng(seed, "conv-decay");
  std::normal_distribution<double> n(0.0, 0.01);
  auto d = w_.mutable_data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::size_t r = (i / kernel_size) % kernel_size, c = i % kernel_size;
    d[i] = (r == c ? -1.0 : 0.0) + n(rng);
  }
}

ConvDecayKernel::ConvDecayKernel(Tensor w, double tau, ZMode z_mode) : w_(std::move(w)), tau_(tau), z_mode_(z_mode) {
  if (w_.rank() != 4) throw ShapeError("conv decay: kernel must be (Co, Ci, k, k)");
  if (w_.dim(2) != w_.dim(3)) {
    throw ShapeError("conv decay: kernel windows must be square, got " + std::to_string(w_.dim(2)) + "x" +
                     std::to_string(w_.dim(3)));
  }
  if (w_.dim(2) % 2 == 0) throw ShapeError("conv decay: kernel size must be odd");
  if (!(tau > 0.0)) throw std::invalid_argument("conv decay: tau must be positive");
}

double ConvDecayKernel::normalizer() const {
  const double k = static_cast<double>(kernel_size());
  return z_mode_ == ZMode::kDamp ? 1.0 / k : k;
}

void ConvDecayKernel::refresh_cache() const {
  const auto data = w_.data();
  if (cached_w_.size() == data.size() && std::equal(data.begin(), data.end(), cached_w_.begin())) return;
  cached_w_.assign(data.begin(), data.end());
  const auto k = static_cast<Eigen::Index>(kernel_size());
  const std::size_t pairs = data.size() / static_cast<std::size_t>(k * k);
  cache_.assign(pairs, {});
  for (std::size_t p = 0; p < pairs; ++p) {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wj(
        data.data() + p * static_cast<std::size_t>(k * k), k, k);
    const SmallMatrix a = wj;
    PairEig& e = cache_[p];
    try {
      auto eig = linalg::eig_small(a);
      const double anorm = std::max(linalg::inf_norm(a), 1e-300);
      if (linalg::reconstruction_residual(eig, a) < 1e-8 * anorm) {
        e.ok = true;
        e.values = eig.values;
        e.vectors = eig.vectors;
        e.inverse = eig.vectors.fullPivLu().inverse();
      }
    } catch (const linalg::ConvergenceError&) {
    }
  }
  ++refreshes_;
}

Tensor ConvDecayKernel::exponential(double scale) const {
  refresh_cache();
  const auto k = static_cast<Eigen::Index>(kernel_size());
  const std::size_t kk = static_cast<std::size_t>(k * k);
  const auto data = w_.data();
  const std::size_t pairs = data.size() / kk;
  std::vector<double> out(data.size());
  // Pairs whose eigen path was unusable at this scale.
  auto series_pairs = std::make_shared<std::vector<bool>>(pairs, false);
  for (std::size_t p = 0; p < pairs; ++p) {
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> dst(out.data() + p * kk, k, k);
    const PairEig& e = cache_[p];
    bool done = false;
    if (scale == 0.0) {
      dst.setIdentity();
      done = true;
    } else if (e.ok) {
      linalg::ComplexVector<double> ev = (e.values * scale).array().exp().matrix();
      const ComplexMatrix<double> full = e.vectors * ev.asDiagonal() * e.inverse;
      const double rn = std::max(linalg::inf_norm(full.real()), 1e-300);
      if (full.imag().cwiseAbs().maxCoeff() / rn < 1e-9) {
        dst = full.real();
        done = true;
      }
    }
    if (!done) {
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wj(data.data() + p * kk, k, k);
      dst = linalg::matrix_exp_series(SmallMatrix(wj * scale));
      (*series_pairs)[p] = true;
    }
  }
  Tensor result(w_.shape(), std::move(out));
  auto wi = w_.impl();
  // The backward pass needs the eigen data of this forward, not of later updates.
  auto cache = std::make_shared<std::vector<PairEig>>(cache_);
  return Tape::current().record("kernel_exp", {w_}, result, [=](std::span<const double> g) {
    auto dw = wi->grad_buffer();
    for (std::size_t p = 0; p < pairs; ++p) {
      Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> gp(g.data() + p * kk, k, k);
      SmallMatrix grad;
      const PairEig& e = (*cache)[p];
      if (scale == 0.0) continue;
      if (e.ok && !(*series_pairs)[p]) {
        // Adjoint of the Frechet derivative: L(s W^T, G), with W^T = V^-T Lambda V^T.
        const auto n = e.values.size();
        ComplexMatrix<double> phi(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
          for (Eigen::Index j = 0; j < n; ++j) phi(i, j) = exp_divided_difference(scale * e.values(i), scale * e.values(j));
        }
        const ComplexMatrix<double> vt = e.vectors.transpose();
        const ComplexMatrix<double> vinv_t = e.inverse.transpose();
        const ComplexMatrix<double> inner = (vt * gp.cast<Complex>() * vinv_t).cwiseProduct(phi);
        grad = (vinv_t * inner * vt).real();
      } else {
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wj(wi->data.data() + p * kk, k, k);
        grad = linalg::expm_frechet(SmallMatrix(scale * wj.transpose()), SmallMatrix(gp));
      }
      grad *= scale;
      for (Eigen::Index r = 0; r < k; ++r) {
        for (Eigen::Index c = 0; c < k; ++c) dw[p * kk + static_cast<std::size_t>(r * k + c)] += grad(r, c);
      }
    }
  });
}

Tensor ConvDecayKernel::exponential_series(double scale) const {
  const auto k = static_cast<Eigen::Index>(kernel_size());
  const std::size_t kk = static_cast<std::size_t>(k * k);
  const auto data = w_.data();
  std::vector<double> out(data.size());
  for (std::size_t p = 0; p < data.size() / kk; ++p) {
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> wj(data.data() + p * kk, k, k);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> dst(out.data() + p * kk, k, k);
    dst = linalg::matrix_exp_series(SmallMatrix(wj * scale));
  }
  return Tensor(w_.shape(), std::move(out));
}

double ConvDecayKernel::max_imag_residual(double scale) const {
  refresh_cache();
  double worst = 0.0;
  for (const auto& e : cache_) {
    if (!e.ok) continue;
    linalg::ComplexVector<double> ev = (e.values * scale).array().exp().matrix();
    const ComplexMatrix<double> full = e.vectors * ev.asDiagonal() * e.inverse;
    worst = std::max(worst, full.imag().cwiseAbs().maxCoeff() / std::max(linalg::inf_norm(full.real()), 1e-300));
  }
  return worst;
}

Tensor conv_exp_decay_apply(const Tensor& delta, const ConvDecayKernel& kern, std::size_t t) {
  if (delta.rank() != 3 || delta.dim(0) != kern.w().dim(1)) {
    throw ShapeError("conv_exp_decay_apply: delta dim 0 must equal kernel in-channels " +
                     std::to_string(kern.w().dim(1)) + ", got " + shape_str(delta.shape()));
  }
  if (!delta.all_finite()) throw NonFiniteError("conv_exp_decay_apply: non-finite delta");
  const Tensor e = kern.exponential(static_cast<double>(t) / kern.tau());
  return scale(conv2d(delta, e, {1, kern.kernel_size() / 2}), kern.normalizer());
}

UnrollResult unroll(const Tensor& x, const DeltaFn& f_prime, const HeadFn& head, const DecayRef& decay,
                    FeedbackState state, const UnrollOptions& options) {
  const std::size_t b = state.feedback_channels();
  const std::size_t k = b + state.output_channels();
  UnrollResult out;
  Tensor h = state.h();
  const Tensor masked_v = Tensor::zeros(state.v.shape());
  if (options.record_trajectory) out.states.push_back(h);

  for (std::size_t t = 0; t < options.steps; ++t) {
    const Tensor v = (options.mask_feedback && t > 0) ? masked_v : slice(h, 0, b);
    if (options.record_trajectory) out.predictions.push_back(head(slice(h, b, k)));
    const Tensor delta = f_prime(feedback_input(x, v));
    if (delta.shape() != h.shape()) {
      throw ShapeError("unroll: F' produced " + shape_str(delta.shape()) + ", state is " + shape_str(h.shape()));
    }
    Tensor step;
    if (const auto* op = std::get_if<const DecayOperator*>(&decay)) {
      step = options.cancelled_decay ? exp_decay_apply_cancelled(delta, **op, t) : exp_decay_apply(delta, **op, t);
    } else {
      step = conv_exp_decay_apply(delta, *std::get<const ConvDecayKernel*>(decay), t);
    }
    h = add(h, step);
    if (!h.all_finite()) {
      std::ostringstream msg;
      msg << "unroll: non-finite state at t=" << t + 1 << " (||h||=" << h.norm() << ")";
      throw NonFiniteError(msg.str());
    }
    out.raw_delta_norms.push_back(delta.norm());
    out.delta_norms.push_back(step.norm());
    if (options.record_trajectory) out.states.push_back(h);
  }
  out.prediction = head(slice(h, b, k));
  if (options.record_trajectory) out.predictions.push_back(out.prediction);
  return out;
}

SpectralEstimate jacobian_spectral_estimate(const DeltaFn& f_prime, const DecayOperator& op,
                                            const FeedbackState& state, const Tensor& x, std::size_t t,
                                            std::size_t iters, std::uint64_t seed) {
  if (iters < 5) throw std::invalid_argument("jacobian_spectral_estimate: iters must be >= 5");
  const std::size_t b = state.feedback_channels();
  const Tensor h0 = state.h().detach();
  const Shape shape = h0.shape();
  auto step_map = [&](const Tensor& h) {
    return add(h, exp_decay_apply(f_prime(feedback_input(x, slice(h, 0, b))), op, t));
  };
  auto jvp = [&](const std::vector<double>& dir) {
    NoGradGuard guard;
    const double eps = 1e-6 * std::max(1.0, h0.norm());
    std::vector<double> plus(h0.data().begin(), h0.data().end()), minus = plus;
    for (std::size_t i = 0; i < plus.size(); ++i) {
      plus[i] += eps * dir[i];
      minus[i] -= eps * dir[i];
    }
    const Tensor yp = step_map(Tensor(shape, plus)), ym = step_map(Tensor(shape, minus));
    std::vector<double> out(plus.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (yp[i] - ym[i]) / (2.0 * eps);
    return out;
  };
  auto vjp = [&](const std::vector<double>& w) {
    Tensor h(shape, std::vector<double>(h0.data().begin(), h0.data().end()), true);
    const Tensor y = step_map(h);
    backward(sum(mul(y, Tensor(shape, w))));
    return std::vector<double>(h.grad().begin(), h.grad().end());
  };
  auto normalize = [](std::vector<double>& v) {
    double n = 0.0;
    for (double a : v) n += a * a;
    n = std::sqrt(n);
    if (n > 0.0) {
      for (double& a : v) a /= n;
    }
    return n;
  };

  Rng rng = make_rng(seed, "power-iteration");
  std::vector<double> dir(h0.numel());
  fill_normal(dir, 0.0, 1.0, rng);
  normalize(dir);
  SpectralEstimate est;
  double previous = -1.0;
  for (std::size_t i = 0; i < iters; ++i) {
    std::vector<double> w = vjp(jvp(dir));
    double rayleigh = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) rayleigh += w[j] * dir[j];
    est.sigma_max = std::sqrt(std::max(rayleigh, 0.0));
    est.iterations = i + 1;
    if (normalize(w) == 0.0) {
      est.converged = true;
      break;
    }
    dir = std::move(w);
    if (previous >= 0.0 && std::abs(est.sigma_max - previous) <= 1e-10 * std::max(1.0, est.sigma_max)) {
      est.converged = true;
      break;
    }
    previous = est.sigma_max;
  }
  return est;
}

BackboneSpec feedback_backbone_spec(const FeedbackConfig& c) {
  return {c.kind, c.image_channels + c.feedback_channels, c.height, c.width, c.stage_widths,
          c.output_channels + c.feedback_channels};
}

BackboneSpec feedforward_backbone_spec(const FeedbackConfig& c) {
  return {c.kind, c.image_channels, c.height, c.width, c.stage_widths, c.output_channels};
}

FeedbackModel::FeedbackModel(FeedbackConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      backbone_(feedback_backbone_spec(config_), seed),
      head_(config_.kind, config_.output_channels, config_.classes, config_.height, config_.width,
            stream_seed(seed, "dfm-head", 0)),
      decay_(DecayOperator::random_orthogonal(config_.output_channels + config_.feedback_channels, config_.tau,
                                              stream_seed(seed, "dfm-q", 0))) {
  if (config_.feedback_channels == 0) throw std::invalid_argument("feedback model: B must be >= 1");
  decay_.exp_decay = config_.exp_decay;
  if (config_.conv_decay) {
    conv_.emplace(config_.output_channels + config_.feedback_channels, config_.conv_kernel, config_.tau,
                  config_.z_mode, stream_seed(seed, "dfm-conv", 0));
  }
  last_good_q_ = decay_.q_matrix();
}

FeedbackState FeedbackModel::initial_state(std::uint64_t instance_seed) const {
  const auto& s = backbone_.spec();
  return init_state(config_.feedback_channels, config_.output_channels, s.latent_height(), s.latent_width(),
                    config_.h_init_std, instance_seed);
}

UnrollResult FeedbackModel::run(const Tensor& x, std::uint64_t instance_seed, bool record_trajectory) const {
  UnrollOptions opts;
  opts.steps = config_.steps;
  opts.mask_feedback = config_.mask_feedback;
  opts.record_trajectory = record_trajectory;
  const DecayRef decay = conv_ ? DecayRef(&*conv_) : DecayRef(&decay_);
  return unroll(x, std::cref(backbone_), std::cref(head_), decay, initial_state(instance_seed), opts);
}

Tensor FeedbackModel::predict(const Tensor& x, std::uint64_t instance_seed) const {
  return run(x, instance_seed, false).prediction;
}

Tensor FeedbackModel::single_pass(const Tensor& x, std::uint64_t instance_seed) const {
  UnrollOptions opts;
  opts.steps = 1;
  opts.record_trajectory = false;
  const DecayRef decay = conv_ ? DecayRef(&*conv_) : DecayRef(&decay_);
  // One loop body: feedback input, F', decay, Euler update and the G readout.
  return unroll(x, std::cref(backbone_), std::cref(head_), decay, initial_state(instance_seed), opts).prediction;
}

ParameterList FeedbackModel::parameters() const {
  ParameterList out = backbone_.parameters();
  for (auto& p : head_.parameters()) out.push_back(p);
  if (conv_) {
    out.push_back({"conv_decay.w", conv_->w()});
  } else {
    out.push_back({"decay.q", decay_.q});
  }
  return out;
}

void FeedbackModel::post_update(bool orthogonality) {
  if (conv_ || !orthogonality) return;
  try {
    last_good_q_ = orthogonal_correction(decay_.q_matrix());
  } catch (const linalg::RankDeficientError& e) {
    ++correction_failures_;
    std::clog << "[dfm] orthogonal correction skipped, keeping previous Q: " << e.what() << '\n';
  }
  decay_.set_q(last_good_q_);
}

double FeedbackModel::orthogonality_residual() const {
  if (conv_) return 0.0;
  return linalg::orthogonality_residual(decay_.q_matrix());
}

}  // namespace dfm

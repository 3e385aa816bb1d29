#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <variant>
#include <vector>

#include "dfm/backbone.hpp"
#include "dfm/linalg.hpp"
#include "dfm/tensor.hpp"

namespace dfm {

/// h(t) = [v(t), u(t)] at latent resolution.
struct FeedbackState {
  Tensor v;  // (B, h_l, w_l), softmaxed and fed back to the input
  Tensor u;  // (N, h_l, w_l), decoded by the head
  std::size_t t = 0;
  double h_init_std = 1e-3;

  Tensor h() const { return concat({v, u}); }
  std::size_t feedback_channels() const { return v.dim(0); }
  std::size_t output_channels() const { return u.dim(0); }
};

FeedbackState init_state(std::size_t feedback_channels, std::size_t output_channels, std::size_t latent_h,
                         std::size_t latent_w, double stddev, std::uint64_t seed);

// Splits a state tensor (B + N, h, w) back into its components.
FeedbackState split_state(const Tensor& h, std::size_t feedback_channels, std::size_t t, double h_init_std);

/// [x, softmax_B(upsample(v))] : (C + B, H, W).
Tensor feedback_input(const Tensor& x, const Tensor& v);

/// Channel-space decay c^T Q e^{(t/tau) Sigma} Q^T, applied per spatial location.
struct DecayOperator {
  Tensor q;               // (K, K), trainable, kept orthogonal by the trainer
  Eigen::VectorXd sigma;  // fixed eigenvalues, all -1
  double tau = 1.0;
  bool exp_decay = true;  // false replaces e^{(t/tau) Sigma} by I

  static DecayOperator random_orthogonal(std::size_t order, double tau, std::uint64_t seed);
  static DecayOperator identity(std::size_t order, double tau);

  std::size_t order() const { return q.dim(0); }
  linalg::SmallMatrix q_matrix() const;
  void set_q(const linalg::SmallMatrix& m);
  // Diagonal of e^{(t/tau) Sigma} (ones when exp_decay is off).
  Eigen::VectorXd decay_factors(std::size_t t) const;
};

// Literal pipeline through Q, diag, Q^T; gradients reach both delta and Q.
Tensor exp_decay_apply(const Tensor& delta, const DecayOperator& op, std::size_t t);
// Q cancels when Q is orthogonal and Sigma = -I: e^{-t/tau} * delta.
Tensor exp_decay_apply_cancelled(const Tensor& delta, const DecayOperator& op, std::size_t t);

enum class ZMode { kDamp, kAmplify };

/// Per (out, in) channel pair, a square k x k kernel w whose matrix
/// exponential e^{(t/tau) w} is the convolution kernel at step t.
class ConvDecayKernel {
 public:
  ConvDecayKernel(std::size_t channels, std::size_t kernel_size, double tau, ZMode z_mode, std::uint64_t seed);
  ConvDecayKernel(Tensor w, double tau, ZMode z_mode);

  const Tensor& w() const { return w_; }
  std::size_t kernel_size() const { return w_.dim(2); }
  std::size_t channels() const { return w_.dim(0); }
  double tau() const { return tau_; }
  ZMode z_mode() const { return z_mode_; }
  double normalizer() const;  // multiplier applied to the update

  // Differentiable e^{scale * w_j} for every pair; (Co, Ci, k, k).
  Tensor exponential(double scale) const;
  // Same values via the series path only (no eigendecomposition).
  Tensor exponential_series(double scale) const;
  double max_imag_residual(double scale) const;
  std::size_t cache_refreshes() const { return refreshes_; }

 private:
  struct PairEig {
    bool ok = false;
    linalg::ComplexVector<double> values;
    linalg::ComplexMatrix<double> vectors;
    linalg::ComplexMatrix<double> inverse;
  };
  void refresh_cache() const;

  Tensor w_;
  double tau_;
  ZMode z_mode_;
  mutable std::vector<double> cached_w_;
  mutable std::vector<PairEig> cache_;
  mutable std::size_t refreshes_ = 0;
};

Tensor conv_exp_decay_apply(const Tensor& delta, const ConvDecayKernel& kern, std::size_t t);

using DecayRef = std::variant<const DecayOperator*, const ConvDecayKernel*>;
using DeltaFn = std::function<Tensor(const Tensor&)>;
using HeadFn = std::function<Tensor(const Tensor&)>;

struct UnrollOptions {
  std::size_t steps = 5;
  bool mask_feedback = false;
  bool record_trajectory = true;
  // Use exp_decay_apply_cancelled for the spectral operator.
  bool cancelled_decay = false;
};

struct UnrollResult {
  Tensor prediction;                 // G(u(T))
  std::vector<Tensor> states;        // h(0..T)
  std::vector<Tensor> predictions;   // G(u(t)), t = 0..T (trajectory only)
  std::vector<double> delta_norms;   // ||decayed delta(t)||, t = 0..T-1
  std::vector<double> raw_delta_norms;  // ||delta(t)|| before decay
};

// Forward-Euler unrolling h(t+1) = h(t) + decay_t(F'(feedback_input(x, v(t)))).
UnrollResult unroll(const Tensor& x, const DeltaFn& f_prime, const HeadFn& head, const DecayRef& decay,
                    FeedbackState state, const UnrollOptions& options);

struct SpectralEstimate {
  double sigma_max = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
};

// Power iteration for the largest singular value of J = d h(t+1) / d h(t).
// J^T w comes from the tape; J w from central differences.
SpectralEstimate jacobian_spectral_estimate(const DeltaFn& f_prime, const DecayOperator& op,
                                            const FeedbackState& state, const Tensor& x, std::size_t t,
                                            std::size_t iters, std::uint64_t seed = 0);

struct FeedbackConfig {
  TaskKind kind = TaskKind::kClassifier;
  std::size_t image_channels = 1;     // C
  std::size_t height = 32, width = 32;
  std::vector<std::size_t> stage_widths{8, 16};
  std::size_t feedback_channels = 10;  // B
  std::size_t output_channels = 16;    // N
  std::size_t classes = 10;            // L
  std::size_t steps = 5;               // T
  double tau = 1.0;
  double h_init_std = 1e-3;
  bool mask_feedback = false;
  bool exp_decay = true;
  bool conv_decay = false;
  std::size_t conv_kernel = 3;
  ZMode z_mode = ZMode::kDamp;
};

class FeedbackModel : public Model {
 public:
  FeedbackModel(FeedbackConfig config, std::uint64_t seed);

  std::string kind() const override { return config_.mask_feedback ? "dfm-masked" : "dfm"; }
  Tensor predict(const Tensor& x, std::uint64_t instance_seed) const override;
  Tensor single_pass(const Tensor& x, std::uint64_t instance_seed) const override;
  bool recurrent() const override { return true; }
  ParameterList parameters() const override;
  void post_update(bool orthogonality) override;
  double orthogonality_residual() const override;
  std::size_t classes() const override { return config_.classes; }
  std::size_t input_channels() const override { return config_.image_channels; }

  UnrollResult run(const Tensor& x, std::uint64_t instance_seed, bool record_trajectory) const;
  FeedbackState initial_state(std::uint64_t instance_seed) const;

  const FeedbackConfig& config() const { return config_; }
  const Backbone& backbone() const { return backbone_; }
  const Head& head() const { return head_; }
  DecayOperator& decay() { return decay_; }
  const DecayOperator& decay() const { return decay_; }
  const ConvDecayKernel* conv_decay() const { return conv_ ? &*conv_ : nullptr; }
  std::size_t correction_failures() const { return correction_failures_; }

 private:
  FeedbackConfig config_;
  Backbone backbone_;
  Head head_;
  DecayOperator decay_;
  std::optional<ConvDecayKernel> conv_;
  linalg::SmallMatrix last_good_q_;
  std::size_t correction_failures_ = 0;
};

BackboneSpec feedback_backbone_spec(const FeedbackConfig& c);
BackboneSpec feedforward_backbone_spec(const FeedbackConfig& c);

}  // namespace dfm

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dfm/ops.hpp"
#include "dfm/tensor.hpp"

namespace dfm {

enum class TaskKind { kClassifier, kSegmenter };

struct BackboneSpec {
  TaskKind kind = TaskKind::kClassifier;
  std::size_t input_channels = 1;  // C, or C + B for the feedback network
  std::size_t height = 32;
  std::size_t width = 32;
  std::vector<std::size_t> stage_widths{8, 16};
  std::size_t output_channels = 10;  // N, or N + B

  std::size_t total_stride() const { return std::size_t{1} << stage_widths.size(); }
  std::size_t latent_height() const { return height / total_stride(); }
  std::size_t latent_width() const { return width / total_stride(); }
  void validate() const;
};

struct NamedParameter {
  std::string name;
  Tensor value;
};
using ParameterList = std::vector<NamedParameter>;

std::size_t parameter_count(const ParameterList& params);

/// Residual CNN: each stage is a stride-2 3x3 convolution followed by one
/// pre-activation block (GN, ReLU, conv, GN, ReLU, conv, identity shortcut);
/// a final GN/ReLU/1x1 projection yields `output_channels` at latent size.
class Backbone {
 public:
  Backbone(BackboneSpec spec, std::uint64_t seed);

  Tensor operator()(const Tensor& x) const;
  const BackboneSpec& spec() const { return spec_; }
  ParameterList parameters() const;

 private:
  struct Conv {
    Tensor weight;
    Tensor bias;  // undefined when followed by a normalization
    Conv2dParams params;
  };
  struct Norm {
    Tensor gamma;
    Tensor beta;
    std::size_t groups = 1;
  };
  struct Stage {
    Conv down;
    Norm norm_a;
    Conv conv_a;
    Norm norm_b;
    Conv conv_b;
  };

  static Tensor apply(const Conv& c, const Tensor& x);
  static Tensor apply(const Norm& n, const Tensor& x);

  BackboneSpec spec_;
  std::vector<Stage> stages_;
  Norm final_norm_;
  Conv project_;
};

Backbone build_backbone(const BackboneSpec& spec, std::uint64_t seed);

// Largest divisor of `channels` that is at most 8.
std::size_t norm_groups(std::size_t channels);

/// Decoder G: global-average-pool + affine map (classifier), or 1x1
/// convolution + nearest upsample to the image size (segmenter).
class Head {
 public:
  Head(TaskKind kind, std::size_t in_channels, std::size_t classes, std::size_t out_h, std::size_t out_w,
       std::uint64_t seed);

  TaskKind kind() const { return kind_; }
  std::size_t in_channels() const { return in_channels_; }
  std::size_t classes() const { return classes_; }
  ParameterList parameters() const;
  Tensor& weight() { return weight_; }
  Tensor& bias() { return bias_; }

  Tensor operator()(const Tensor& u) const;

 private:
  TaskKind kind_;
  std::size_t in_channels_, classes_, out_h_, out_w_;
  Tensor weight_;  // (L, N) or (L, N, 1, 1)
  Tensor bias_;    // (L)
};

Tensor forward_head(const Head& head, const Tensor& u);

/// Common surface of the feedforward baseline and the feedback model.
class Model {
 public:
  virtual ~Model() = default;
  virtual std::string kind() const = 0;
  // Final logits; instance_seed drives any per-instance randomness.
  virtual Tensor predict(const Tensor& x, std::uint64_t instance_seed) const = 0;
  // One unit of recurrence (the full forward for feedforward models).
  virtual Tensor single_pass(const Tensor& x, std::uint64_t instance_seed) const = 0;
  virtual bool recurrent() const { return false; }
  virtual ParameterList parameters() const = 0;
  // Hook after each optimizer update (orthogonality correction).
  virtual void post_update(bool /*orthogonality*/) {}
  virtual double orthogonality_residual() const { return 0.0; }
  virtual std::size_t classes() const = 0;
  virtual std::size_t input_channels() const = 0;
};

class FeedforwardModel : public Model {
 public:
  FeedforwardModel(BackboneSpec spec, std::size_t classes, std::uint64_t seed);

  std::string kind() const override { return "ff"; }
  Tensor predict(const Tensor& x, std::uint64_t instance_seed) const override;
  Tensor single_pass(const Tensor& x, std::uint64_t instance_seed) const override;
  ParameterList parameters() const override;
  std::size_t classes() const override { return head_.classes(); }
  std::size_t input_channels() const override { return backbone_.spec().input_channels; }
  const Backbone& backbone() const { return backbone_; }
  const Head& head() const { return head_; }

 private:
  Backbone backbone_;
  Head head_;
};

struct CostReport {
  std::uint64_t parameter_count = 0;
  std::uint64_t flops_per_forward = 0;
  double mean_batch_seconds = 0.0;
};

struct CostOptions {
  std::size_t batch_size = 32;
  std::size_t warmup_batches = 2;
  std::size_t timed_batches = 10;
  bool measure_time = true;
};

CostReport count_cost(const Model& model, const Shape& input_shape, std::size_t steps, CostOptions options = {});

// Checkpoint file: "DFM1", then per parameter: u32 name length, name bytes,
// u32 rank, u32 dims, little-endian float64 data.
void save_checkpoint(const std::filesystem::path& path, const ParameterList& params);
ParameterList load_checkpoint(const std::filesystem::path& path);
// Copies values into `params` by name; every name must be present with the same shape.
void restore_parameters(const ParameterList& params, const ParameterList& stored);

}  // namespace dfm

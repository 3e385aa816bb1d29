#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace dfm {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AutodiffError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  std::optional<std::size_t> node;
  std::uint64_t id = 0;

  void accumulate_grad(std::size_t i, double g);
  std::span<double> grad_buffer();
};

/// Dense row-major tensor of doubles with an optional gradient slot.
///
/// Copies share storage. A tensor created by a primitive holds the index of
/// the tape node that produced it; leaves created by the user have no node.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  // In-place access for optimizers and initializers; never used on tape outputs.
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  Tensor grad_tensor() const;
  void zero_grad() { impl_->grad.clear(); }

  std::uint64_t id() const { return impl_->id; }
  std::optional<std::size_t> node() const { return impl_->node; }
  bool is_leaf() const { return !impl_->node.has_value(); }

  Tensor detach() const;
  double norm() const;
  bool all_finite() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  static Tensor from_impl(std::shared_ptr<TensorImpl> impl);

 private:
  std::shared_ptr<TensorImpl> impl_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct TapeNode {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::shared_ptr<TensorImpl> output;
  BackwardFn backward;
};

/// Append-only record of differentiable operations for the current thread.
class Tape {
 public:
  static Tape& current();

  bool enabled() const { return enabled_; }
  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(std::size_t i) const { return nodes_.at(i); }
  void clear() { nodes_.clear(); }

  // Records `output` as produced by `op` when any input requires grad.
  // Returns output, with its node index and requires_grad set accordingly.
  Tensor record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardFn backward);

 private:
  friend class NoGradGuard;
  std::vector<TapeNode> nodes_;
  bool enabled_ = true;
};

/// Disables recording on the current thread's tape for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

using GradMap = std::unordered_map<std::uint64_t, Tensor>;

// Reverse sweep from a scalar loss. Leaf gradients accumulate into the leaves
// (so repeated calls sum) and are also returned keyed by leaf id. The tape is
// consumed.
GradMap backward(const Tensor& loss);

// max_i |autodiff_i - fd_i| / (|fd_i| + 1e-12) with central differences.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double step);

}  // namespace dfm

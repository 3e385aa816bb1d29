#include "dfm/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dfm {

namespace {

std::uint64_t next_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ')';
  return os.str();
}

void TensorImpl::accumulate_grad(std::size_t i, double g) {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  grad[i] += g;
}

std::span<double> TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<TensorImpl>()) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " elements");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
  impl_->id = next_id();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

Tensor Tensor::from_impl(std::shared_ptr<TensorImpl> impl) {
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw AutodiffError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = value;
}

Tensor Tensor::grad_tensor() const {
  if (!has_grad()) return Tensor::zeros(shape());
  return Tensor(shape(), impl_->grad);
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

double Tensor::norm() const {
  double s = 0.0;
  for (double v : impl_->data) s += v * v;
  return std::sqrt(s);
}

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(), [](double v) { return std::isfinite(v); });
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

Tensor Tape::record(std::string op, std::vector<Tensor> inputs, Tensor output, BackwardFn backward) {
  if (!enabled_) return output;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (!any) return output;
  TapeNode node;
  node.op = std::move(op);
  for (auto& in : inputs) {
    if (in.defined()) node.inputs.push_back(in.impl());
  }
  node.output = output.impl();
  node.backward = std::move(backward);
  output.impl()->requires_grad = true;
  output.impl()->node = nodes_.size();
  nodes_.push_back(std::move(node));
  return output;
}

NoGradGuard::NoGradGuard() : previous_(Tape::current().enabled_) { Tape::current().enabled_ = false; }

NoGradGuard::~NoGradGuard() { Tape::current().enabled_ = previous_; }

GradMap backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw AutodiffError("backward requires a scalar loss");
  }
  if (!loss.node()) throw AutodiffError("loss is detached from the tape");
  Tape& tape = Tape::current();
  const std::size_t start = *loss.node();
  if (start >= tape.size() || tape.node(start).output != loss.impl()) {
    throw AutodiffError("loss node is not on the current tape");
  }

  loss.impl()->grad_buffer()[0] += 1.0;
  GradMap leaves;
  for (std::size_t i = start + 1; i-- > 0;) {
    const TapeNode& node = tape.node(i);
    if (node.output->grad.empty()) continue;
    node.backward(node.output->grad);
    for (const auto& in : node.inputs) {
      if (in->requires_grad && !in->node && !in->grad.empty()) {
        leaves[in->id] = Tensor::from_impl(in);
      }
    }
  }
  GradMap out;
  for (auto& [id, leaf] : leaves) out.emplace(id, leaf.grad_tensor());
  // Intermediate outputs drop their node index so a stale id cannot be reused.
  for (std::size_t i = 0; i < tape.size(); ++i) tape.node(i).output->node.reset();
  tape.clear();
  return out;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check step must be positive");
  Tensor x(point.shape(), std::vector<double>(point.data().begin(), point.data().end()), true);
  Tensor y = f(x);
  if (!y.all_finite()) throw NonFiniteError("grad_check: non-finite function value");
  std::vector<double> analytic(x.numel(), 0.0);
  if (y.node()) {
    backward(y);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  } else {
    Tape::current().clear();
  }

  NoGradGuard guard;
  double worst = 0.0;
  std::vector<double> base(point.data().begin(), point.data().end());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto eval = [&](double delta) {
      std::vector<double> shifted = base;
      shifted[i] += delta;
      Tensor v = f(Tensor(point.shape(), std::move(shifted)));
      const double r = v.item();
      if (!std::isfinite(r)) throw NonFiniteError("grad_check: non-finite value at coordinate " + std::to_string(i));
      return r;
    };
    const double fd = (eval(step) - eval(-step)) / (2.0 * step);
    const double err = std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace dfm

#pragma once

#include <random>
#include <vector>

#include "dfm/tensor.hpp"

namespace dfm::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0, bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = n(rng);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

inline Tensor uniform_tensor(Shape shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> d(shape_numel(shape));
  for (double& v : d) v = u(rng);
  return Tensor(std::move(shape), std::move(d));
}

// Central-difference gradient of a scalar function of the values of `point`,
// computed with recording disabled. Independent of the tape.
template <typename F>
std::vector<double> numeric_gradient(F&& f, const Tensor& point, double step) {
  NoGradGuard guard;
  std::vector<double> base(point.data().begin(), point.data().end()), out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto plus = base, minus = base;
    plus[i] += step;
    minus[i] -= step;
    out[i] = (f(Tensor(point.shape(), plus)).item() - f(Tensor(point.shape(), minus)).item()) / (2.0 * step);
  }
  return out;
}

inline double max_rel_error(std::span<const double> a, const std::vector<double>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]) / (std::abs(b[i]) + 1e-12));
  return worst;
}

}  // namespace dfm::testing

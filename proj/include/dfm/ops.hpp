#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "dfm/tensor.hpp"

namespace dfm {

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Differentiable primitives. Image tensors are (C, H, W); there is no batch axis.

// x (Cin,H,W), w (Cout,Cin,kh,kw), optional bias (Cout).
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dParams p);
Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dParams p);
// (m,k) x (k,n)
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis = 0);
// Rows [begin, end) along axis 0.
Tensor slice(const Tensor& a, std::size_t begin, std::size_t end);
Tensor softmax_channels(const Tensor& a);
Tensor log_softmax_channels(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor global_avg_pool(const Tensor& x);
Tensor upsample_nearest(const Tensor& x, std::size_t out_h, std::size_t out_w);
// gamma/beta have shape (C).
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups,
                  double eps = 1e-5);
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm);
Tensor transpose(const Tensor& a);  // rank-2 swap
Tensor sum(const Tensor& a);

/// Attributes for the name-based dispatcher.
struct Attrs {
  std::map<std::string, std::vector<std::int64_t>> ints;
  std::map<std::string, double> floats;

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  double get_float(const std::string& key, double fallback) const;
};

class UnknownPrimitiveError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dispatch by primitive name ("conv2d", "matmul", "add", "mul", "scale", "concat",
// "slice", "softmax", "log_softmax", "relu", "global_avg_pool", "upsample_nearest",
// "group_norm", "reshape", "transpose", "sum").
Tensor primitive_forward(std::string_view op, const std::vector<Tensor>& inputs, const Attrs& attrs = {});

// Convention: 2 FLOPs per multiply-add, counted for conv2d and matmul only.
namespace flops {
std::uint64_t counted();
void reset();
void add(std::uint64_t n);
}  // namespace flops

}  // namespace dfm

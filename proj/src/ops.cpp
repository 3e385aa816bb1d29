#include "dfm/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace dfm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local std::uint64_t flop_counter = 0;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  require(t.defined(), std::string(op) + ": undefined input");
  require(t.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                shape_str(t.shape()));
}

Tensor make(Shape shape, std::vector<double> data) { return Tensor(std::move(shape), std::move(data)); }

bool wants_grad(const std::shared_ptr<TensorImpl>& impl) { return impl && impl->requires_grad; }

std::vector<double> im2col(std::span<const double> x, std::size_t ci, std::size_t h, std::size_t w,
                           std::size_t kh, std::size_t kw, std::size_t ho, std::size_t wo, Conv2dParams p) {
  std::vector<double> cols(ci * kh * kw * ho * wo, 0.0);
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  for (std::size_t c = 0; c < ci; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        double* row = &cols[((c * kh + ky) * kw + kx) * ho * wo];
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            row[oy * wo + ox] = x[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
  return cols;
}

void col2im_add(std::span<const double> cols, std::span<double> dx, std::size_t ci, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, std::size_t ho, std::size_t wo, Conv2dParams p) {
  const auto pad = static_cast<std::ptrdiff_t>(p.padding);
  for (std::size_t c = 0; c < ci; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const double* row = &cols[((c * kh + ky) * kw + kx) * ho * wo];
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) - pad;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            dx[(c * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

namespace flops {
std::uint64_t counted() { return flop_counter; }
void reset() { flop_counter = 0; }
void add(std::uint64_t n) { flop_counter += n; }
}  // namespace flops

Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dParams p) { return conv2d(x, w, Tensor(), p); }

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv2dParams p) {
  require_rank(x, 3, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  require(p.stride >= 1, "conv2d: stride must be >= 1");
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(w.dim(1) == ci, "conv2d: weight dim 1 (in channels) is " + std::to_string(w.dim(1)) +
                              " but input has " + std::to_string(ci) + " channels");
  require(h + 2 * p.padding >= kh && wd + 2 * p.padding >= kw, "conv2d: kernel larger than padded input");
  if (bias.defined()) {
    require(bias.rank() == 1 && bias.dim(0) == co, "conv2d: bias dim 0 must equal out channels " + std::to_string(co));
  }
  const std::size_t ho = (h + 2 * p.padding - kh) / p.stride + 1;
  const std::size_t wo = (wd + 2 * p.padding - kw) / p.stride + 1;
  const std::size_t kdim = ci * kh * kw, npix = ho * wo;

  auto cols = std::make_shared<std::vector<double>>(im2col(x.data(), ci, h, wd, kh, kw, ho, wo, p));
  std::vector<double> out(co * npix);
  MutMap o(out.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(npix));
  ConstMap wm(w.data().data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(kdim));
  ConstMap cm(cols->data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(npix));
  o.noalias() = wm * cm;
  if (bias.defined()) {
    for (std::size_t c = 0; c < co; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bias[c];
  }
  flops::add(2ull * co * kdim * npix);

  Tensor result = make({co, ho, wo}, std::move(out));
  auto xi = x.impl(), wi = w.impl(), bi = bias.defined() ? bias.impl() : nullptr;
  return Tape::current().record(
      "conv2d", {x, w, bias}, result, [=](std::span<const double> g) {
        ConstMap gm(g.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(npix));
        ConstMap cm2(cols->data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(npix));
        if (wants_grad(wi)) {
          MutMap dw(wi->grad_buffer().data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(kdim));
          dw.noalias() += gm * cm2.transpose();
        }
        if (wants_grad(bi)) {
          auto db = bi->grad_buffer();
          for (std::size_t c = 0; c < co; ++c) db[c] += gm.row(static_cast<Eigen::Index>(c)).sum();
        }
        if (wants_grad(xi)) {
          ConstMap wm2(wi->data.data(), static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(kdim));
          std::vector<double> dcols(kdim * npix);
          MutMap dc(dcols.data(), static_cast<Eigen::Index>(kdim), static_cast<Eigen::Index>(npix));
          dc.noalias() = wm2.transpose() * gm;
          col2im_add(dcols, xi->grad_buffer(), ci, h, wd, kh, kw, ho, wo, p);
        }
      });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul: lhs dim 1 (" + std::to_string(k) + ") != rhs dim 0 (" +
                             std::to_string(b.dim(0)) + ")");
  std::vector<double> out(m * n);
  MutMap o(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  ConstMap am(a.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
  ConstMap bm(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  o.noalias() = am * bm;
  flops::add(2ull * m * k * n);
  auto ai = a.impl(), bi = b.impl();
  return Tape::current().record("matmul", {a, b}, make({m, n}, std::move(out)), [=](std::span<const double> g) {
    ConstMap gm(g.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    ConstMap am2(ai->data.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    ConstMap bm2(bi->data.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    if (wants_grad(ai)) {
      MutMap da(ai->grad_buffer().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
      da.noalias() += gm * bm2.transpose();
    }
    if (wants_grad(bi)) {
      MutMap db(bi->grad_buffer().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
      db.noalias() += am2.transpose() * gm;
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), "add: undefined input");
  require(a.shape() == b.shape(), "add: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto ai = a.impl(), bi = b.impl();
  return Tape::current().record("add", {a, b}, make(a.shape(), std::move(out)), [=](std::span<const double> g) {
    for (const auto& in : {ai, bi}) {
      if (!wants_grad(in)) continue;
      auto d = in->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.defined() && b.defined(), "mul: undefined input");
  require(a.shape() == b.shape(), "mul: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto ai = a.impl(), bi = b.impl();
  return Tape::current().record("mul", {a, b}, make(a.shape(), std::move(out)), [=](std::span<const double> g) {
    if (wants_grad(ai)) {
      auto d = ai->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bi->data[i];
    }
    if (wants_grad(bi)) {
      auto d = bi->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * ai->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  require(a.defined(), "scale: undefined input");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  auto ai = a.impl();
  return Tape::current().record("scale", {a}, make(a.shape(), std::move(out)), [=](std::span<const double> g) {
    auto d = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
  });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat: no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat: axis " + std::to_string(axis) + " out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    require(p.rank() == first.size(), "concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d == axis) continue;
      require(p.dim(d) == first[d], "concat: dim " + std::to_string(d) + " is " + std::to_string(p.dim(d)) +
                                        ", expected " + std::to_string(first[d]));
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_chunk = out_shape[axis] * inner;

  std::vector<double> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_chunk + off));
    }
    off += chunk;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  for (const auto& p : parts) impls.push_back(p.impl());
  return Tape::current().record("concat", parts, make(out_shape, std::move(out)), [=](std::span<const double> g) {
    for (std::size_t k = 0; k < impls.size(); ++k) {
      if (!wants_grad(impls[k])) continue;
      auto d = impls[k]->grad_buffer();
      const std::size_t chunk = d.size() / outer;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < chunk; ++i) d[o * chunk + i] += g[o * out_chunk + offsets[k] + i];
      }
    }
  });
}

Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  require(a.defined() && a.rank() >= 1, "slice: needs rank >= 1");
  require(begin < end && end <= a.dim(0), "slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                                              ") invalid for dim 0 of size " + std::to_string(a.dim(0)));
  const std::size_t inner = a.numel() / a.dim(0);
  Shape s = a.shape();
  s[0] = end - begin;
  std::vector<double> out(a.data().begin() + static_cast<std::ptrdiff_t>(begin * inner),
                          a.data().begin() + static_cast<std::ptrdiff_t>(end * inner));
  auto ai = a.impl();
  return Tape::current().record("slice", {a}, make(s, std::move(out)), [=](std::span<const double> g) {
    auto d = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) d[begin * inner + i] += g[i];
  });
}

Tensor softmax_channels(const Tensor& a) {
  require(a.defined() && a.rank() >= 1, "softmax: needs rank >= 1");
  const std::size_t c = a.dim(0), rest = a.numel() / c;
  auto out = std::make_shared<std::vector<double>>(a.numel());
  for (std::size_t j = 0; j < rest; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, a[k * rest + j]);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += ((*out)[k * rest + j] = std::exp(a[k * rest + j] - mx));
    for (std::size_t k = 0; k < c; ++k) (*out)[k * rest + j] /= s;
  }
  auto ai = a.impl();
  return Tape::current().record("softmax", {a}, make(a.shape(), *out), [=](std::span<const double> g) {
    auto d = ai->grad_buffer();
    for (std::size_t j = 0; j < rest; ++j) {
      double dot = 0.0;
      for (std::size_t k = 0; k < c; ++k) dot += g[k * rest + j] * (*out)[k * rest + j];
      for (std::size_t k = 0; k < c; ++k) d[k * rest + j] += (*out)[k * rest + j] * (g[k * rest + j] - dot);
    }
  });
}

Tensor log_softmax_channels(const Tensor& a) {
  require(a.defined() && a.rank() >= 1, "log_softmax: needs rank >= 1");
  const std::size_t c = a.dim(0), rest = a.numel() / c;
  std::vector<double> out(a.numel());
  auto probs = std::make_shared<std::vector<double>>(a.numel());
  for (std::size_t j = 0; j < rest; ++j) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < c; ++k) mx = std::max(mx, a[k * rest + j]);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(a[k * rest + j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < c; ++k) {
      out[k * rest + j] = a[k * rest + j] - lse;
      (*probs)[k * rest + j] = std::exp(out[k * rest + j]);
    }
  }
  auto ai = a.impl();
  return Tape::current().record("log_softmax", {a}, make(a.shape(), std::move(out)), [=](std::span<const double> g) {
    auto d = ai->grad_buffer();
    for (std::size_t j = 0; j < rest; ++j) {
      double gs = 0.0;
      for (std::size_t k = 0; k < c; ++k) gs += g[k * rest + j];
      for (std::size_t k = 0; k < c; ++k) d[k * rest + j] += g[k * rest + j] - (*probs)[k * rest + j] * gs;
    }
  });
}

Tensor relu(const Tensor& a) {
  require(a.defined(), "relu: undefined input");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
  auto ai = a.impl();
  return Tape::current().record("relu", {a}, make(a.shape(), std::move(out)), [=](std::span<const double> g) {
    auto d = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (ai->data[i] > 0.0) d[i] += g[i];
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 3, "global_avg_pool");
  const std::size_t c = x.dim(0), n = x.dim(1) * x.dim(2);
  std::vector<double> out(c, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < n; ++i) out[k] += x[k * n + i];
    out[k] /= static_cast<double>(n);
  }
  auto xi = x.impl();
  return Tape::current().record("global_avg_pool", {x}, make({c}, std::move(out)), [=](std::span<const double> g) {
    auto d = xi->grad_buffer();
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < n; ++i) d[k * n + i] += g[k] / static_cast<double>(n);
    }
  });
}

Tensor upsample_nearest(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x, 3, "upsample_nearest");
  require(out_h >= 1 && out_w >= 1, "upsample_nearest: output size must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<std::size_t> src(out_h * out_w);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    for (std::size_t ox = 0; ox < out_w; ++ox) src[oy * out_w + ox] = (oy * h / out_h) * w + ox * w / out_w;
  }
  std::vector<double> out(c * out_h * out_w);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < src.size(); ++i) out[k * src.size() + i] = x[k * h * w + src[i]];
  }
  auto xi = x.impl();
  return Tape::current().record("upsample_nearest", {x}, make({c, out_h, out_w}, std::move(out)),
                                [=](std::span<const double> g) {
                                  auto d = xi->grad_buffer();
                                  for (std::size_t k = 0; k < c; ++k) {
                                    for (std::size_t i = 0; i < src.size(); ++i) d[k * h * w + src[i]] += g[k * src.size() + i];
                                  }
                                });
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t groups, double eps) {
  require(x.defined() && x.rank() >= 2, "group_norm: needs (C, ...) input");
  const std::size_t c = x.dim(0), hw = x.numel() / c;
  require(groups >= 1 && c % groups == 0,
          "group_norm: dim 0 (" + std::to_string(c) + ") not divisible by groups " + std::to_string(groups));
  require(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
          "group_norm: gamma/beta dim 0 must equal channels " + std::to_string(c));
  const std::size_t per = c / groups, n = per * hw;
  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(groups);
  std::vector<double> out(x.numel());
  for (std::size_t gi = 0; gi < groups; ++gi) {
    const std::size_t base = gi * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += x[base + i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (x[base + i] - mean) * (x[base + i] - mean);
    var /= static_cast<double>(n);
    (*inv_std)[gi] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t ch = (base + i) / hw;
      (*xhat)[base + i] = (x[base + i] - mean) * (*inv_std)[gi];
      out[base + i] = gamma[ch] * (*xhat)[base + i] + beta[ch];
    }
  }
  auto xi = x.impl(), gmi = gamma.impl(), bti = beta.impl();
  return Tape::current().record(
      "group_norm", {x, gamma, beta}, make(x.shape(), std::move(out)), [=](std::span<const double> g) {
        if (wants_grad(gmi) || wants_grad(bti)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t ch = i / hw;
            if (wants_grad(gmi)) gmi->accumulate_grad(ch, g[i] * (*xhat)[i]);
            if (wants_grad(bti)) bti->accumulate_grad(ch, g[i]);
          }
        }
        if (!wants_grad(xi)) return;
        auto d = xi->grad_buffer();
        for (std::size_t gi = 0; gi < groups; ++gi) {
          const std::size_t base = gi * n;
          double s1 = 0.0, s2 = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const double dxh = g[base + i] * gmi->data[(base + i) / hw];
            s1 += dxh;
            s2 += dxh * (*xhat)[base + i];
          }
          const double nn = static_cast<double>(n);
          for (std::size_t i = 0; i < n; ++i) {
            const double dxh = g[base + i] * gmi->data[(base + i) / hw];
            d[base + i] += (*inv_std)[gi] / nn * (nn * dxh - s1 - (*xhat)[base + i] * s2);
          }
        }
      });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(a.defined(), "reshape: undefined input");
  require(shape_numel(shape) == a.numel(), "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  auto ai = a.impl();
  return Tape::current().record("reshape", {a}, make(std::move(shape), std::move(out)), [=](std::span<const double> g) {
    auto d = ai->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  return transpose(a, {1, 0});
}

Tensor transpose(const Tensor& a, const std::vector<std::size_t>& perm) {
  require(a.defined(), "transpose: undefined input");
  const std::size_t r = a.rank();
  require(perm.size() == r, "transpose: permutation length " + std::to_string(perm.size()) + " != rank " +
                                std::to_string(r));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    require(p < r && !seen[p], "transpose: invalid permutation");
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = a.dim(perm[i]);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * a.dim(i + 1);
  // src[j] is the input offset of output element j.
  std::vector<std::size_t> src(a.numel());
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t j = 0; j < src.size(); ++j) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * in_strides[perm[i]];
    src[j] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(a.numel());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = a[src[j]];
  auto ai = a.impl();
  return Tape::current().record("transpose", {a}, make(out_shape, std::move(out)), [=](std::span<const double> g) {
    auto d = ai->grad_buffer();
    for (std::size_t j = 0; j < g.size(); ++j) d[src[j]] += g[j];
  });
}

Tensor sum(const Tensor& a) {
  require(a.defined(), "sum: undefined input");
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto ai = a.impl();
  return Tape::current().record("sum", {a}, make({1}, {s}), [=](std::span<const double> g) {
    auto d = ai->grad_buffer();
    for (double& v : d) v += g[0];
  });
}

std::int64_t Attrs::get_int(const std::string& key, std::int64_t fallback) const {
  auto it = ints.find(key);
  return it == ints.end() || it->second.empty() ? fallback : it->second.front();
}

double Attrs::get_float(const std::string& key, double fallback) const {
  auto it = floats.find(key);
  return it == floats.end() ? fallback : it->second;
}

Tensor primitive_forward(std::string_view op, const std::vector<Tensor>& in, const Attrs& attrs) {
  auto arity = [&](std::size_t lo, std::size_t hi) {
    if (in.size() < lo || in.size() > hi) {
      throw ShapeError(std::string(op) + ": expected " + std::to_string(lo) + ".." + std::to_string(hi) +
                       " inputs, got " + std::to_string(in.size()));
    }
  };
  auto to_size = [&](const std::string& key, std::int64_t fallback) {
    const std::int64_t v = attrs.get_int(key, fallback);
    if (v < 0) throw ShapeError(std::string(op) + ": attribute " + key + " must be non-negative");
    return static_cast<std::size_t>(v);
  };
  if (op == "conv2d") {
    arity(2, 3);
    Conv2dParams p{to_size("stride", 1), to_size("padding", 0)};
    return in.size() == 3 ? conv2d(in[0], in[1], in[2], p) : conv2d(in[0], in[1], p);
  }
  if (op == "matmul") return arity(2, 2), matmul(in[0], in[1]);
  if (op == "add") return arity(2, 2), add(in[0], in[1]);
  if (op == "mul") return arity(2, 2), mul(in[0], in[1]);
  if (op == "scale") return arity(1, 1), scale(in[0], attrs.get_float("factor", 1.0));
  if (op == "concat") return arity(1, in.size() + 1), concat(in, to_size("axis", 0));
  if (op == "slice") return arity(1, 1), slice(in[0], to_size("begin", 0), to_size("end", 0));
  if (op == "softmax") return arity(1, 1), softmax_channels(in[0]);
  if (op == "log_softmax") return arity(1, 1), log_softmax_channels(in[0]);
  if (op == "relu") return arity(1, 1), relu(in[0]);
  if (op == "global_avg_pool") return arity(1, 1), global_avg_pool(in[0]);
  if (op == "upsample_nearest") return arity(1, 1), upsample_nearest(in[0], to_size("height", 0), to_size("width", 0));
  if (op == "group_norm") {
    arity(3, 3);
    return group_norm(in[0], in[1], in[2], to_size("groups", 1), attrs.get_float("eps", 1e-5));
  }
  if (op == "reshape") {
    arity(1, 1);
    auto it = attrs.ints.find("shape");
    if (it == attrs.ints.end()) throw ShapeError("reshape: missing shape attribute");
    Shape s;
    for (auto v : it->second) {
      if (v <= 0) throw ShapeError("reshape: dimensions must be positive");
      s.push_back(static_cast<std::size_t>(v));
    }
    return reshape(in[0], s);
  }
  if (op == "transpose") {
    arity(1, 1);
    auto it = attrs.ints.find("perm");
    if (it == attrs.ints.end()) return transpose(in[0]);
    std::vector<std::size_t> perm;
    for (auto v : it->second) {
      if (v < 0) throw ShapeError("transpose: negative axis");
      perm.push_back(static_cast<std::size_t>(v));
    }
    return transpose(in[0], perm);
  }
  if (op == "sum") return arity(1, 1), sum(in[0]);
  throw UnknownPrimitiveError("unknown primitive: " + std::string(op));
}

}  // namespace dfm

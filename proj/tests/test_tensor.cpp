#include <doctest.h>

#include <cmath>

#include "dfm/ops.hpp"
#include "dfm/tensor.hpp"
#include "support.hpp"

using namespace dfm;
using dfm::testing::random_tensor;

namespace {

// Weighted sum so every output element carries an O(1) gradient.
Tensor weighted(const Tensor& y, std::uint64_t seed) { return sum(mul(y, random_tensor(y.shape(), seed))); }

}  // namespace

TEST_CASE("tensor construction checks element count") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  CHECK(t.numel() == 6);
  CHECK(t.is_leaf());
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("softmax of equal logits is uniform") {
  const Tensor s = softmax_channels(Tensor({2, 1, 1}, {0.0, 0.0}));
  CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("softmax sums to one along channels and is positive") {
  const Tensor x = random_tensor({5, 3, 4}, 11, 10.0);
  const Tensor s = softmax_channels(x);
  for (std::size_t p = 0; p < 12; ++p) {
    double total = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(s[c * 12 + p] > 0.0);
      total += s[c * 12 + p];
    }
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
}

TEST_CASE("concat along channels adds channel counts") {
  const Tensor y = concat({Tensor::zeros({3, 8, 8}), Tensor::zeros({5, 8, 8})});
  CHECK(y.shape() == Shape{8, 8, 8});
  CHECK_THROWS_AS(concat({Tensor::zeros({3, 8, 8}), Tensor::zeros({5, 8, 7})}), ShapeError);
}

TEST_CASE("conv2d of ones with a ones kernel sums the window") {
  const Tensor x = Tensor::full({1, 5, 5}, 1.0);
  const Tensor w = Tensor::full({1, 1, 3, 3}, 1.0);
  const Tensor y = conv2d(x, w, {1, 1});
  REQUIRE(y.shape() == Shape{1, 5, 5});
  // Direct summation: interior windows hold 9 ones, corners 4, edges 6.
  for (std::size_t r = 0; r < 5; ++r) {
    for (std::size_t c = 0; c < 5; ++c) {
      const int rows = 3 - (r == 0) - (r == 4), cols = 3 - (c == 0) - (c == 4);
      CHECK(y[r * 5 + c] == static_cast<double>(rows * cols));
    }
  }
  CHECK(y[12] == 9.0);
}

TEST_CASE("conv2d shape errors name the dimension") {
  const Tensor x = Tensor::zeros({2, 5, 5});
  try {
    conv2d(x, Tensor::zeros({1, 3, 3, 3}), {1, 1});
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("channel") != std::string::npos);
  }
  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 3, 3}), {0, 1}), ShapeError);
}

TEST_CASE("primitive_forward dispatches by name and rejects unknown names") {
  const Tensor a = random_tensor({2, 3}, 1), b = random_tensor({3, 4}, 2);
  const Tensor direct = matmul(a, b);
  const Tensor named = primitive_forward("matmul", {a, b});
  CHECK(named.shape() == direct.shape());
  for (std::size_t i = 0; i < direct.numel(); ++i) CHECK(named[i] == direct[i]);
  CHECK_THROWS_AS(primitive_forward("frobnicate", {a}), UnknownPrimitiveError);
  Attrs attrs;
  attrs.floats["factor"] = 2.0;
  CHECK(primitive_forward("scale", {a}, attrs)[0] == 2.0 * a[0]);
}

TEST_CASE("backward of sum of squares") {
  Tensor x({3}, {1.0, 2.0, 3.0}, true);
  const GradMap g = backward(sum(mul(x, x)));
  REQUIRE(x.has_grad());
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  CHECK(x.grad()[2] == 6.0);
  REQUIRE(g.contains(x.id()));
  CHECK(g.at(x.id())[2] == 6.0);
  CHECK(Tape::current().size() == 0);
}

TEST_CASE("gradient of a reused value is the sum of path contributions") {
  const Tensor x0 = random_tensor({4}, 3);
  // Fused: f(x) + g(x) in one graph.
  Tensor x({4}, std::vector<double>(x0.data().begin(), x0.data().end()), true);
  backward(add(sum(mul(x, x)), sum(scale(relu(x), 3.0))));
  const std::vector<double> fused(x.grad().begin(), x.grad().end());
  // Split: each branch differentiated on its own leaf.
  Tensor xf({4}, std::vector<double>(x0.data().begin(), x0.data().end()), true);
  backward(sum(mul(xf, xf)));
  Tensor xg({4}, std::vector<double>(x0.data().begin(), x0.data().end()), true);
  backward(sum(scale(relu(xg), 3.0)));
  for (std::size_t i = 0; i < 4; ++i) CHECK(fused[i] == doctest::Approx(xf.grad()[i] + xg.grad()[i]).epsilon(1e-15));
}

TEST_CASE("backward rejects non-scalar and detached losses") {
  Tensor x({2}, {1.0, 2.0}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.0)), AutodiffError);
  Tape::current().clear();
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0)), AutodiffError);
}

TEST_CASE("no-grad guard suppresses recording") {
  Tensor x({2}, {1.0, 2.0}, true);
  {
    NoGradGuard guard;
    const Tensor y = sum(mul(x, x));
    CHECK(y.is_leaf());
    CHECK(Tape::current().size() == 0);
  }
  const Tensor y = sum(mul(x, x));
  CHECK_FALSE(y.is_leaf());
  Tape::current().clear();
}

TEST_CASE("grad_check on x squared") {
  const double err = grad_check([](const Tensor& x) { return mul(x, x); }, Tensor({1}, {3.0}), 1e-5);
  CHECK(err < 1e-8);
  CHECK_THROWS_AS(grad_check([](const Tensor& x) { return mul(x, x); }, Tensor({1}, {3.0}), 0.0), std::invalid_argument);
  CHECK_THROWS_AS(grad_check([](const Tensor& x) { return scale(x, std::nan("")); }, Tensor({1}, {3.0}), 1e-5),
                  NonFiniteError);
}

TEST_CASE("every primitive agrees with central differences") {
  constexpr double kStep = 1e-5, kTol = 1e-6;
  const Tensor w3 = random_tensor({4, 2, 3, 3}, 20);
  const Tensor bias = random_tensor({4}, 21);
  const Tensor other = random_tensor({2, 5, 5}, 22);
  const Tensor gamma = random_tensor({4}, 23), beta = random_tensor({4}, 24);

  struct Case {
    const char* name;
    Shape shape;
    std::function<Tensor(const Tensor&)> f;
  };
  const std::vector<Case> cases{
      {"conv2d input", {2, 5, 5}, [&](const Tensor& x) { return weighted(conv2d(x, w3, bias, {1, 1}), 1); }},
      {"conv2d weight", {4, 2, 3, 3}, [&](const Tensor& w) { return weighted(conv2d(other, w, {2, 1}), 2); }},
      {"conv2d bias", {4}, [&](const Tensor& b) { return weighted(conv2d(other, w3, b, {1, 0}), 3); }},
      {"matmul", {3, 4}, [&](const Tensor& a) { return weighted(matmul(a, random_tensor({4, 2}, 5)), 4); }},
      {"add", {2, 5, 5}, [&](const Tensor& a) { return weighted(add(a, other), 6); }},
      {"mul", {2, 5, 5}, [&](const Tensor& a) { return weighted(mul(a, other), 7); }},
      {"scale", {3, 2}, [&](const Tensor& a) { return weighted(scale(a, -1.7), 8); }},
      {"concat", {2, 5, 5}, [&](const Tensor& a) { return weighted(concat({other, a}), 9); }},
      {"slice", {4, 2, 2}, [&](const Tensor& a) { return weighted(slice(a, 1, 3), 10); }},
      {"softmax", {4, 2, 3}, [&](const Tensor& a) { return weighted(softmax_channels(a), 11); }},
      {"log_softmax", {4, 2, 3}, [&](const Tensor& a) { return weighted(log_softmax_channels(a), 12); }},
      {"relu", {3, 3}, [&](const Tensor& a) { return weighted(relu(a), 13); }},
      {"global_avg_pool", {3, 4, 4}, [&](const Tensor& a) { return weighted(global_avg_pool(a), 14); }},
      {"upsample_nearest", {2, 2, 3}, [&](const Tensor& a) { return weighted(upsample_nearest(a, 4, 6), 15); }},
      {"group_norm", {4, 3, 3}, [&](const Tensor& a) { return weighted(group_norm(a, gamma, beta, 2), 16); }},
      {"group_norm gamma", {4}, [&](const Tensor& g) { return weighted(group_norm(random_tensor({4, 3, 3}, 17), g, beta, 2), 18); }},
      {"reshape", {2, 3, 4}, [&](const Tensor& a) { return weighted(reshape(a, {6, 4}), 19); }},
      {"transpose", {2, 3, 4}, [&](const Tensor& a) { return weighted(transpose(a, {2, 0, 1}), 25); }},
      {"sum", {3, 2}, [&](const Tensor& a) { return scale(sum(a), 2.5); }},
  };
  for (const auto& c : cases) {
    CAPTURE(c.name);
    const Tensor point = random_tensor(c.shape, 100 + c.shape.size());
    CHECK(grad_check(c.f, point, kStep) < kTol);
  }
}

TEST_CASE("random three-layer CNN: every parameter gradient matches finite differences") {
  const Tensor x = random_tensor({2, 6, 6}, 40);
  Tensor w1 = random_tensor({3, 2, 3, 3}, 41, 0.5, true), b1 = random_tensor({3}, 42, 0.5, true);
  Tensor w2 = random_tensor({4, 3, 3, 3}, 43, 0.5, true), b2 = random_tensor({4}, 44, 0.5, true);
  Tensor w3 = random_tensor({5, 4}, 45, 0.5, true), b3 = random_tensor({5}, 46, 0.5, true);
  std::vector<Tensor*> params{&w1, &b1, &w2, &b2, &w3, &b3};
  auto net = [&](const std::vector<Tensor>& p) {
    Tensor h = relu(conv2d(x, p[0], p[1], {1, 1}));
    h = relu(conv2d(h, p[2], p[3], {2, 1}));
    const Tensor logits = add(reshape(matmul(p[4], reshape(global_avg_pool(h), {4, 1})), {5}), p[5]);
    return sum(mul(log_softmax_channels(logits), Tensor({5}, {0.1, 0.1, 0.6, 0.1, 0.1})));
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    CAPTURE(k);
    const double err = grad_check(
        [&](const Tensor& v) {
          std::vector<Tensor> p;
          for (auto* q : params) p.push_back(*q);
          p[k] = v;
          return net(p);
        },
        *params[k], 1e-5);
    CHECK(err < 1e-4);
  }
}

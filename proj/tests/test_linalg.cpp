#include <doctest.h>

#include <cmath>
#include <random>

#include "dfm/linalg.hpp"
#include "oracles.hpp"

using namespace dfm::linalg;
using Eigen::MatrixXd;

namespace {

MatrixXd gaussian(Eigen::Index n, std::uint64_t seed, double stddev = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, stddev);
  MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

using dfm::testing::taylor_oracle;

double max_abs(const MatrixXd& m) { return m.cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("qr of the identity is trivial") {
  const auto [q, r] = gram_schmidt_qr(MatrixXd::Identity(2, 2));
  CHECK(max_abs(q - MatrixXd::Identity(2, 2)) == 0.0);
  CHECK(max_abs(r - MatrixXd::Identity(2, 2)) == 0.0);
}

TEST_CASE("qr of a permutation keeps it and gives R = I") {
  MatrixXd u(2, 2);
  u << 0, 1, 1, 0;
  const auto [q, r] = gram_schmidt_qr(u);
  CHECK(max_abs(q - u) == 0.0);
  CHECK(max_abs(r - MatrixXd::Identity(2, 2)) == 0.0);
}

TEST_CASE("qr reconstructs a random Gaussian matrix") {
  const MatrixXd u = gaussian(8, 7);
  const auto [q, r] = gram_schmidt_qr(u);
  CHECK(inf_norm(MatrixXd(q * r - u)) < 1e-10);
  CHECK(inf_norm(MatrixXd(q.transpose() * q - MatrixXd::Identity(8, 8))) < 1e-10);
  for (Eigen::Index i = 0; i < 8; ++i) {
    CHECK(r(i, i) > 0.0);
    for (Eigen::Index j = 0; j < i; ++j) CHECK(r(i, j) == 0.0);
  }
}

TEST_CASE("qr is a projection onto orthogonal matrices") {
  const MatrixXd q0 = gram_schmidt_qr(gaussian(6, 9)).first;
  const MatrixXd q1 = gram_schmidt_qr(q0).first;
  CHECK(max_abs(q1 - q0) < 1e-12);
}

TEST_CASE("qr rejects rank deficiency and bad shapes") {
  MatrixXd u = gaussian(3, 4);
  u.col(2) = 2.0 * u.col(0) - u.col(1);
  CHECK_THROWS_AS(gram_schmidt_qr(u), RankDeficientError);
  CHECK_THROWS_AS(gram_schmidt_qr(MatrixXd::Zero(2, 2)), RankDeficientError);
  CHECK_THROWS_AS(gram_schmidt_qr(MatrixXd(2, 3)), std::invalid_argument);
  CHECK_THROWS_AS(gram_schmidt_qr(MatrixXd::Identity(65, 65)), std::invalid_argument);
  MatrixXd nan = MatrixXd::Identity(2, 2);
  nan(0, 1) = std::nan("");
  CHECK_THROWS_AS(gram_schmidt_qr(nan), std::invalid_argument);
}

TEST_CASE("eig of minus identity") {
  const auto e = eig_small(MatrixXd(-MatrixXd::Identity(3, 3)));
  for (Eigen::Index i = 0; i < 3; ++i) {
    CHECK(e.values(i).real() == -1.0);
    CHECK(e.values(i).imag() == 0.0);
  }
}

TEST_CASE("eig of a symmetric 2x2 matches characteristic roots") {
  // det(A - l I) = (2 - l)^2 - 1 has roots 3 and 1.
  MatrixXd a(2, 2);
  a << 2, 1, 1, 2;
  const auto e = eig_small(a);
  CHECK(e.values(0).real() == doctest::Approx(3.0).epsilon(1e-14));
  CHECK(e.values(1).real() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(std::abs(e.values(0).imag()) < 1e-15);
}

TEST_CASE("eig of a rotation generator gives a conjugate pair, positive imaginary first") {
  // l^2 + 1 = 0.
  MatrixXd a(2, 2);
  a << 0, -1, 1, 0;
  const auto e = eig_small(a);
  CHECK(std::abs(e.values(0) - std::complex<double>(0, 1)) < 1e-14);
  CHECK(std::abs(e.values(1) - std::complex<double>(0, -1)) < 1e-14);
}

TEST_CASE("eig residuals, ordering and reconstruction on random matrices") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    CAPTURE(seed);
    const MatrixXd a = gaussian(5, 100 + seed);
    const auto e = eig_small(a);
    const double anorm = inf_norm(a);
    for (Eigen::Index i = 0; i < 5; ++i) {
      const auto residual = (a.cast<std::complex<double>>() * e.vectors.col(i) - e.values(i) * e.vectors.col(i));
      CHECK(residual.cwiseAbs().maxCoeff() < 1e-8 * anorm);
      if (i > 0) CHECK(e.values(i - 1).real() >= e.values(i).real());
      if (e.values(i).imag() > 0) CHECK(std::abs(e.values(i + 1) - std::conj(e.values(i))) < 1e-10);
    }
    CHECK(reconstruction_residual(e, a) < 1e-8 * anorm);
  }
}

TEST_CASE("matrix exponential basics") {
  const MatrixXd a = gaussian(3, 1);
  CHECK(max_abs(matrix_exp(a, 0.0) - MatrixXd::Identity(3, 3)) == 0.0);

  MatrixXd d = MatrixXd::Zero(2, 2);
  d(0, 0) = -1;
  d(1, 1) = -2;
  const MatrixXd e = matrix_exp(d, 1.0);
  CHECK(e(0, 0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-14));
  CHECK(e(1, 1) == doctest::Approx(std::exp(-2.0)).epsilon(1e-14));
  CHECK(e(0, 1) == 0.0);
  CHECK(e(1, 0) == 0.0);

  CHECK_THROWS_AS(matrix_exp(a, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(matrix_exp(MatrixXd(MatrixXd::Identity(2, 2) * 1e4), 1.0), OverflowError);
}

TEST_CASE("eigen path agrees with an independent Taylor oracle") {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const MatrixXd a = gaussian(3, 500 + seed);
    const auto r = matrix_exp_detailed(a, 0.7);
    CHECK(r.path == ExpPath::kEigen);
    CHECK(r.imag_residual < 1e-9);
    worst = std::max(worst, max_abs(r.value - taylor_oracle(0.7 * a)));
  }
  CHECK(worst < 1e-8);
}

TEST_CASE("defective input falls back to the series") {
  MatrixXd jordan(2, 2);
  jordan << -1, 1, 0, -1;
  const auto r = matrix_exp_detailed(jordan, 1.0);
  CHECK(r.path == ExpPath::kSeries);
  // e^{J} = e^{-1} [[1, 1], [0, 1]].
  CHECK(r.value(0, 0) == doctest::Approx(std::exp(-1.0)).epsilon(1e-13));
  CHECK(r.value(0, 1) == doctest::Approx(std::exp(-1.0)).epsilon(1e-13));
  CHECK(std::abs(r.value(1, 0)) < 1e-15);
  CHECK(series_fallback_count() >= 1);
}

TEST_CASE("matrix exponential semigroup on stable matrices") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const MatrixXd a = gaussian(4, 900 + seed) - 3.0 * MatrixXd::Identity(4, 4);
    const MatrixXd lhs = matrix_exp(a, 0.4) * matrix_exp(a, 1.1);
    CHECK(max_abs(lhs - matrix_exp(a, 1.5)) < 1e-8);
  }
}

TEST_CASE("exponential of a stable matrix is a contraction in spectral radius") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    MatrixXd a = gaussian(4, 1300 + seed);
    const double shift = eig_small(a).values(0).real() + 0.1;
    a -= shift * MatrixXd::Identity(4, 4);  // all real parts <= -0.1
    const MatrixXd m = matrix_exp(a, 0.5);
    // Power iteration on M^T M would give a norm; the radius needs ||M^k||^{1/k}.
    MatrixXd p = MatrixXd::Identity(4, 4);
    for (int k = 0; k < 400; ++k) p = p * m;
    const double radius = std::pow(p.norm(), 1.0 / 400.0);
    CHECK(radius < 1.0);
  }
}

TEST_CASE("Frechet derivative matches a finite difference of the exponential") {
  const MatrixXd a = gaussian(3, 77, 0.5), e = gaussian(3, 78);
  const double h = 1e-6;
  const MatrixXd fd = (matrix_exp_series(MatrixXd(a + h * e)) - matrix_exp_series(MatrixXd(a - h * e))) / (2 * h);
  CHECK(max_abs(expm_frechet(a, e) - fd) < 1e-8);
}

TEST_CASE("orthogonality residual") {
  CHECK(orthogonality_residual(MatrixXd::Identity(3, 3)) == 0.0);
  CHECK(orthogonality_residual(MatrixXd(2.0 * MatrixXd::Identity(3, 3))) == 3.0);
}

#pragma once

// Small dense linear algebra for the decay operators: modified Gram-Schmidt QR,
// eigendecomposition, and the matrix exponential with a series fallback.
// Everything here is templated on the real scalar type; complex arithmetic
// never leaves this header.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <complex>
#include <iostream>
#include <stdexcept>
#include <string>
#include <utility>

namespace dfm::linalg {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using ComplexMatrix = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using ComplexVector = Eigen::Matrix<std::complex<Scalar>, Eigen::Dynamic, 1>;

using SmallMatrix = Matrix<double>;

inline constexpr Eigen::Index kMaxOrder = 64;

class RankDeficientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConvergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class OverflowError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <typename Derived>
typename Derived::Scalar inf_norm(const Eigen::MatrixBase<Derived>& a) {
  if (a.size() == 0) return 0;
  return a.cwiseAbs().rowwise().sum().maxCoeff();
}

template <typename Derived>
void check_small(const Eigen::MatrixBase<Derived>& a, const char* op) {
  if (a.rows() != a.cols()) throw std::invalid_argument(std::string(op) + ": matrix must be square");
  if (a.rows() < 1 || a.rows() > kMaxOrder) {
    throw std::invalid_argument(std::string(op) + ": order must be in [1, 64], got " + std::to_string(a.rows()));
  }
  if (!a.allFinite()) throw std::invalid_argument(std::string(op) + ": non-finite entries");
}

/// Thin QR by modified Gram-Schmidt. R has a strictly positive diagonal, which
/// makes Q unique for full-rank input.
template <typename Derived>
std::pair<Matrix<typename Derived::Scalar>, Matrix<typename Derived::Scalar>> gram_schmidt_qr(
    const Eigen::MatrixBase<Derived>& u) {
  using Scalar = typename Derived::Scalar;
  check_small(u, "gram_schmidt_qr");
  const Eigen::Index n = u.cols();
  Matrix<Scalar> q = u;
  Matrix<Scalar> r = Matrix<Scalar>::Zero(n, n);
  const Scalar tol = Scalar(1e-12) * u.norm();
  for (Eigen::Index j = 0; j < n; ++j) {
    const Scalar pivot = q.col(j).norm();
    if (!(pivot > tol)) {
      throw RankDeficientError("gram_schmidt_qr: column " + std::to_string(j) + " is linearly dependent");
    }
    r(j, j) = pivot;
    q.col(j) /= pivot;
    for (Eigen::Index k = j + 1; k < n; ++k) {
      r(j, k) = q.col(j).dot(q.col(k));
      q.col(k) -= r(j, k) * q.col(j);
    }
  }
  return {std::move(q), std::move(r)};
}

template <typename Scalar>
struct EigenPair {
  ComplexVector<Scalar> values;
  ComplexMatrix<Scalar> vectors;  // columns are eigenvectors
};

/// Eigenpairs sorted by descending real part; a conjugate pair is adjacent with
/// the positive imaginary part first.
template <typename Derived>
EigenPair<typename Derived::Scalar> eig_small(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  check_small(a, "eig_small");
  Eigen::EigenSolver<Matrix<Scalar>> solver(a.derived().eval(), true);
  if (solver.info() != Eigen::Success) throw ConvergenceError("eig_small: eigensolver did not converge");
  const auto& vals = solver.eigenvalues();
  const auto& vecs = solver.eigenvectors();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(vals.size()));
  for (Eigen::Index i = 0; i < vals.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index x, Eigen::Index y) {
    if (vals(x).real() != vals(y).real()) return vals(x).real() > vals(y).real();
    return vals(x).imag() > vals(y).imag();
  });
  EigenPair<Scalar> out;
  out.values.resize(vals.size());
  out.vectors.resize(vecs.rows(), vecs.cols());
  for (Eigen::Index i = 0; i < vals.size(); ++i) {
    out.values(i) = vals(order[static_cast<std::size_t>(i)]);
    out.vectors.col(i) = vecs.col(order[static_cast<std::size_t>(i)]);
  }
  return out;
}

/// ||V diag(values) V^-1 - A||_inf; infinite when V is singular.
template <typename Derived>
typename Derived::Scalar reconstruction_residual(const EigenPair<typename Derived::Scalar>& eig,
                                                 const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  Eigen::FullPivLU<ComplexMatrix<Scalar>> lu(eig.vectors);
  if (!lu.isInvertible()) return std::numeric_limits<Scalar>::infinity();
  const ComplexMatrix<Scalar> rebuilt = eig.vectors * eig.values.asDiagonal() * lu.inverse();
  const ComplexMatrix<Scalar> diff = rebuilt - a.template cast<std::complex<Scalar>>();
  return diff.cwiseAbs().rowwise().sum().maxCoeff();
}

/// e^{A} by scaling and squaring of a truncated Taylor series.
template <typename Derived>
Matrix<typename Derived::Scalar> matrix_exp_series(const Eigen::MatrixBase<Derived>& a) {
  using Scalar = typename Derived::Scalar;
  const Eigen::Index n = a.rows();
  const Scalar norm = inf_norm(a);
  int squarings = 0;
  if (norm > Scalar(0.5)) squarings = static_cast<int>(std::ceil(std::log2(norm / Scalar(0.5))));
  const Matrix<Scalar> scaled = a / std::ldexp(Scalar(1), squarings);
  Matrix<Scalar> result = Matrix<Scalar>::Identity(n, n);
  Matrix<Scalar> term = Matrix<Scalar>::Identity(n, n);
  for (int k = 1; k <= 40; ++k) {
    term = (term * scaled) / Scalar(k);
    result += term;
    if (inf_norm(term) <= std::numeric_limits<Scalar>::epsilon() * inf_norm(result)) break;
  }
  for (int i = 0; i < squarings; ++i) result = (result * result).eval();
  return result;
}

enum class ExpPath { kIdentity, kEigen, kSeries };

template <typename Scalar>
struct MatrixExpResult {
  Matrix<Scalar> value;
  ExpPath path = ExpPath::kIdentity;
  Scalar imag_residual = 0;  // max |Im| of the eigen-path product, relative to ||value||
};

namespace detail {
inline thread_local std::size_t series_fallbacks = 0;
}

inline std::size_t series_fallback_count() { return detail::series_fallbacks; }

/// e^{scale * A}. Uses Q e^{scale*Sigma} Q^-1 when the eigendecomposition
/// reconstructs A, otherwise falls back to matrix_exp_series.
template <typename Derived>
MatrixExpResult<typename Derived::Scalar> matrix_exp_detailed(const Eigen::MatrixBase<Derived>& a,
                                                              typename Derived::Scalar scale) {
  using Scalar = typename Derived::Scalar;
  check_small(a, "matrix_exp");
  if (!(scale >= 0) || !std::isfinite(scale)) throw std::invalid_argument("matrix_exp: scale must be finite and >= 0");
  const Eigen::Index n = a.rows();
  MatrixExpResult<Scalar> out;
  if (scale == 0) {
    out.value = Matrix<Scalar>::Identity(n, n);
    return out;
  }
  const Matrix<Scalar> sa = scale * a;
  if (inf_norm(sa) > Scalar(700)) {
    // Only a bound; the spectrum may still be safe, so try before giving up.
    const Matrix<Scalar> probe = matrix_exp_series(sa);
    if (!probe.allFinite()) throw OverflowError("matrix_exp: result overflows");
  }

  const Scalar anorm = std::max(inf_norm(a), Scalar(1e-300));
  bool eigen_ok = false;
  try {
    const auto eig = eig_small(a);
    if (reconstruction_residual(eig, a) < Scalar(1e-8) * anorm) {
      Eigen::FullPivLU<ComplexMatrix<Scalar>> lu(eig.vectors);
      ComplexVector<Scalar> expvals(n);
      for (Eigen::Index i = 0; i < n; ++i) expvals(i) = std::exp(eig.values(i) * scale);
      const ComplexMatrix<Scalar> full = eig.vectors * expvals.asDiagonal() * lu.inverse();
      const Matrix<Scalar> real = full.real();
      const Scalar rnorm = std::max(inf_norm(real), Scalar(1e-300));
      const Scalar imag = full.imag().cwiseAbs().maxCoeff() / rnorm;
      if (real.allFinite() && imag < Scalar(1e-9)) {
        out.value = real;
        out.path = ExpPath::kEigen;
        out.imag_residual = imag;
        eigen_ok = true;
      }
    }
  } catch (const ConvergenceError&) {
  }
  if (!eigen_ok) {
    if (detail::series_fallbacks++ == 0) {
      std::clog << "[linalg] matrix_exp: eigendecomposition rejected, using scaling-and-squaring series\n";
    }
    out.value = matrix_exp_series(sa);
    out.path = ExpPath::kSeries;
  }
  if (!out.value.allFinite()) throw OverflowError("matrix_exp: result overflows");
  return out;
}

template <typename Derived>
Matrix<typename Derived::Scalar> matrix_exp(const Eigen::MatrixBase<Derived>& a, typename Derived::Scalar scale) {
  return matrix_exp_detailed(a, scale).value;
}

/// Fréchet derivative L(A, E) of the exponential at A in direction E, read off
/// the upper-right block of exp([[A, E], [0, A]]).
template <typename DA, typename DE>
Matrix<typename DA::Scalar> expm_frechet(const Eigen::MatrixBase<DA>& a, const Eigen::MatrixBase<DE>& e) {
  using Scalar = typename DA::Scalar;
  const Eigen::Index n = a.rows();
  Matrix<Scalar> block = Matrix<Scalar>::Zero(2 * n, 2 * n);
  block.topLeftCorner(n, n) = a;
  block.bottomRightCorner(n, n) = a;
  block.topRightCorner(n, n) = e;
  return matrix_exp_series(block).topRightCorner(n, n);
}

template <typename Derived>
typename Derived::Scalar orthogonality_residual(const Eigen::MatrixBase<Derived>& q) {
  using Scalar = typename Derived::Scalar;
  const Matrix<Scalar> gram = q.transpose() * q;
  return (gram - Matrix<Scalar>::Identity(q.cols(), q.cols())).cwiseAbs().maxCoeff();
}

}  // namespace dfm::linalg

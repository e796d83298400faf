#pragma once

#include <memory>
#include <stdexcept>
#include <vector>

#include "mfsb/measures.hpp"
#include "mfsb/penalty.hpp"

namespace mfsb {

/// {1, monomials of degree 1..degree, extra features} evaluated on state rows.
class RegressionBasis {
 public:
  RegressionBasis(int m, int degree, std::vector<Feature> extra = {})
      : m_(m), exps_(monomial_exponents(m, 1, degree)), extra_(std::move(extra)) {
    if (degree < 0) throw std::invalid_argument("regression basis: degree must be >= 0");
  }

  int dim() const { return m_; }
  int size() const { return 1 + static_cast<int>(exps_.size() + extra_.size()); }

  MatrixXd raw(const Points& X) const {
    const Eigen::Index n = X.rows();
    MatrixXd A(n, size());
    for (Eigen::Index i = 0; i < n; ++i) {
      const double* x = X.row(i).data();
      Eigen::Index col = 0;
      A(i, col++) = 1.0;
      for (const auto& e : exps_) A(i, col++) = monomial(x, e);
      for (const auto& f : extra_) A(i, col++) = f.value(x, m_);
    }
    return A;
  }

 private:
  int m_;
  std::vector<std::vector<int>> exps_;
  std::vector<Feature> extra_;
};

/// Affine standardization of the non-intercept columns, frozen once fitted.
struct ColumnScaling {
  VectorXd shift, scale;

  static ColumnScaling fit(const MatrixXd& A) {
    const Eigen::Index n = A.rows(), b = A.cols();
    ColumnScaling s{VectorXd::Zero(b), VectorXd::Ones(b)};
    for (Eigen::Index c = 1; c < b; ++c) {
      const double mu = A.col(c).sum() / static_cast<double>(n);
      const double var = (A.col(c).array() - mu).square().sum() / static_cast<double>(n);
      s.shift(c) = mu;
      s.scale(c) = var > 1e-300 ? std::sqrt(var) : 1.0;
    }
    return s;
  }

  void apply(MatrixXd& A) const {
    for (Eigen::Index c = 1; c < A.cols(); ++c) A.col(c) = (A.col(c).array() - shift(c)) / scale(c);
  }
};

/// Ridge least squares: argmin |A beta - T|^2 + ridge * n * |beta_{1:}|^2 (intercept unpenalized).
inline MatrixXd ridge_solve(const MatrixXd& A, const MatrixXd& T, double ridge) {
  const Eigen::Index n = A.rows(), b = A.cols();
  MatrixXd G = A.transpose() * A;
  for (Eigen::Index c = 1; c < b; ++c) G(c, c) += ridge * static_cast<double>(n);
  MatrixXd rhs = A.transpose() * T;
  Eigen::LLT<MatrixXd> llt(G);
  if (llt.info() == Eigen::Success) return llt.solve(rhs);
  return G.completeOrthogonalDecomposition().solve(rhs);
}

/// Y_j = design_j(X_j) * coef_j for nodes j < M.
struct DecouplingField {
  std::shared_ptr<const RegressionBasis> basis;
  std::vector<ColumnScaling> scaling;
  std::vector<MatrixXd> coef;
  VectorXd terminal_weights;  // Y_T = sum_c w_c grad psi_c when the terminal law enters through a summary

  int nodes() const { return static_cast<int>(coef.size()); }

  MatrixXd design(int j, const Points& X) const {
    MatrixXd A = basis->raw(X);
    scaling[static_cast<std::size_t>(j)].apply(A);
    return A;
  }

  Points eval(int j, const Points& X) const {
    Points out = design(j, X) * coef[static_cast<std::size_t>(j)];
    return out;
  }
};

}  // namespace mfsb

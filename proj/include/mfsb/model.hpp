#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <variant>

#include "mfsb/measures.hpp"

namespace mfsb {

class NonConvergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- running cost f = f1(t, a) + f2(t, x, law) ----

/// f1(a) = |a|^2 / 2
struct QuadraticCost {};

/// f1(a) = scale * |a|^p, 1 < p < 2
struct PowerCost {
  double exponent = 1.5;
  double scale = 1.0;
};

/// f1(a) = sum_c a_c^2 + asinh(a_c)
struct QuadraticPlusAsinhCost {};

/// User-supplied strongly convex f1. The value callback is optional: without it f1 is
/// recovered from the gradient by quadrature along the segment [0, a] (needs f1(0) = 0).
struct CustomCost {
  std::function<VectorXd(double, const VectorXd&)> gradient;
  std::function<double(double, const VectorXd&)> value;
  std::function<MatrixXd(double, const VectorXd&)> hessian;
  double strong_convexity = 1.0;
  double smoothness = std::numeric_limits<double>::infinity();
};

/// f2 with its x-gradient and its L-derivative dmu f2(t, x, law)(z).
struct F2Callback {
  std::function<double(double, const VectorXd&, const Points&)> value;
  std::function<VectorXd(double, const VectorXd&, const Points&)> grad_x;
  std::function<VectorXd(double, const VectorXd&, const Points&, const VectorXd&)> lderiv;
};

struct Coercivity {
  double exponent = 2.0;  // f1(a) >= c1 + c2 |a|^exponent
  double c1 = 0.0;
  double c2 = 0.5;
};

struct CostSpec {
  std::variant<QuadraticCost, PowerCost, QuadraticPlusAsinhCost, CustomCost> f1 = QuadraticCost{};
  std::optional<F2Callback> f2;

  bool strongly_convex() const { return !std::holds_alternative<PowerCost>(f1); }

  /// Lower curvature bound of f1 (0 for the power kind).
  double strong_convexity() const {
    if (std::holds_alternative<QuadraticCost>(f1)) return 1.0;
    if (std::holds_alternative<PowerCost>(f1)) return 0.0;
    if (std::holds_alternative<QuadraticPlusAsinhCost>(f1)) return 2.0 - 2.0 / (3.0 * std::sqrt(3.0));
    return std::get<CustomCost>(f1).strong_convexity;
  }

  /// Upper curvature bound of f1 (Lipschitz constant of its gradient).
  double smoothness() const {
    if (std::holds_alternative<QuadraticCost>(f1)) return 1.0;
    if (std::holds_alternative<PowerCost>(f1)) return std::numeric_limits<double>::infinity();
    if (std::holds_alternative<QuadraticPlusAsinhCost>(f1)) return 2.0 + 2.0 / (3.0 * std::sqrt(3.0));
    return std::get<CustomCost>(f1).smoothness;
  }

  Coercivity coercivity(int m) const {
    if (std::holds_alternative<QuadraticCost>(f1)) return {2.0, 0.0, 0.5};
    if (auto* p = std::get_if<PowerCost>(&f1)) return {p->exponent, 0.0, p->scale};
    // a^2 + asinh(a) >= a^2 - |a| >= a^2/2 - 1/2 per coordinate
    if (std::holds_alternative<QuadraticPlusAsinhCost>(f1)) return {2.0, -0.5 * m, 0.5};
    return {2.0, 0.0, 0.5 * std::get<CustomCost>(f1).strong_convexity};
  }
};

// ---- interaction drift b(t, x, law) ----

struct NoInteraction {};

/// Psi(x) = |x|^2 / 2, so b(x, law) = -(x - mean(law)).
struct PairwiseQuadratic {};

/// b(x, law) = -avg grad Psi(x - x~).
struct PairwisePotential {
  std::function<VectorXd(const VectorXd&)> grad_psi;
  std::function<MatrixXd(const VectorXd&)> hess_psi;
  double lipschitz = 1.0;
};

/// Arbitrary b with dx b (m x m) and the L-derivative dmu b(t, x, law)(z) (m x m).
struct GeneralInteraction {
  std::function<VectorXd(double, const VectorXd&, const Points&)> b;
  std::function<MatrixXd(double, const VectorXd&, const Points&)> dx_b;
  std::function<MatrixXd(double, const VectorXd&, const Points&, const VectorXd&)> dmu_b;
  double lipschitz = 1.0;
};

struct InteractionSpec {
  std::variant<NoInteraction, PairwiseQuadratic, PairwisePotential, GeneralInteraction> kind = NoInteraction{};

  bool none() const { return std::holds_alternative<NoInteraction>(kind); }

  double lipschitz() const {
    if (std::holds_alternative<NoInteraction>(kind)) return 0.0;
    if (std::holds_alternative<PairwiseQuadratic>(kind)) return 2.0;  // 1 in x plus 1 in W1(law)
    if (auto* p = std::get_if<PairwisePotential>(&kind)) return p->lipschitz;
    return std::get<GeneralInteraction>(kind).lipschitz;
  }
};

struct ProblemSpec {
  int dim = 1;
  double horizon = 1.0;
  MatrixXd sigma = MatrixXd::Identity(1, 1);
  CostSpec cost;
  InteractionSpec interaction;
  MeasureSpec mu_in = MeasureSpec::gaussian1d(0.0, 1.0);
  MeasureSpec mu_fin = MeasureSpec::gaussian1d(0.0, 1.0);

  int noise_dim() const { return static_cast<int>(sigma.cols()); }

  void validate() const {
    if (dim < 1) throw std::invalid_argument("problem: dimension must be >= 1");
    if (!(horizon > 0.0) || !std::isfinite(horizon)) throw std::invalid_argument("problem: horizon must be > 0");
    if (sigma.rows() != dim || sigma.cols() < 1) throw std::invalid_argument("problem: sigma must be m x d");
    if (!sigma.allFinite() || sigma.isZero(0.0)) throw std::invalid_argument("problem: sigma must be finite and nonzero");
    if (mu_in.dim != dim || mu_fin.dim != dim) throw std::invalid_argument("problem: measure dimension mismatch");
    if (auto* p = std::get_if<PowerCost>(&cost.f1)) {
      if (!(p->exponent > 1.0 && p->exponent < 2.0)) throw std::invalid_argument("power cost: exponent must be in (1,2)");
      if (!(p->scale > 0.0)) throw std::invalid_argument("power cost: scale must be > 0");
    }
    if (std::holds_alternative<QuadraticPlusAsinhCost>(cost.f1) && dim != 1)
      throw std::invalid_argument("quadratic_plus_asinh cost is one-dimensional");
    if (auto* c = std::get_if<CustomCost>(&cost.f1)) {
      if (!c->gradient) throw std::invalid_argument("custom cost: gradient callback required");
      if (!(c->strong_convexity > 0.0)) throw std::invalid_argument("custom cost: strong convexity must be > 0");
    }
    if (auto* p = std::get_if<PairwisePotential>(&interaction.kind))
      if (!p->grad_psi) throw std::invalid_argument("pairwise_potential: grad Psi callback required");
    if (auto* g = std::get_if<GeneralInteraction>(&interaction.kind))
      if (!g->b) throw std::invalid_argument("general interaction: b callback required");
    mfsb::validate(mu_in);
    mfsb::validate(mu_fin);
  }
};

// ---- f1, Lambda, H1 ----

namespace detail {

inline double asinh_cost_grad(double a) { return 2.0 * a + 1.0 / std::sqrt(1.0 + a * a); }
inline double asinh_cost_hess(double a) { return 2.0 - a / std::pow(1.0 + a * a, 1.5); }

// root of 2a + 1/sqrt(1+a^2) = rhs; Newton inside a bracket, bisection when Newton leaves it
inline double asinh_cost_solve(double rhs) {
  double lo = (rhs - 1.0) / 2.0, hi = rhs / 2.0;
  double a = 0.5 * (lo + hi);
  const double tol = 1e-13 * std::max(1.0, std::abs(rhs));
  for (int it = 0; it < 200; ++it) {
    const double r = asinh_cost_grad(a) - rhs;
    if (std::abs(r) <= tol) return a;
    if (r > 0.0) hi = a; else lo = a;
    double next = a - r / asinh_cost_hess(a);
    if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
    a = next;
  }
  if (std::abs(asinh_cost_grad(a) - rhs) <= 1e-10 * std::max(1.0, std::abs(rhs))) return a;
  throw NonConvergence("lambda_min: asinh root-find did not converge");
}

inline MatrixXd fd_hessian(const CustomCost& c, double t, const VectorXd& a) {
  const Eigen::Index m = a.size();
  MatrixXd h(m, m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const double step = 1e-6 * std::max(1.0, std::abs(a(k)));
    VectorXd ap = a, am = a;
    ap(k) += step;
    am(k) -= step;
    h.col(k) = (c.gradient(t, ap) - c.gradient(t, am)) / (2.0 * step);
  }
  return 0.5 * (h + h.transpose());
}

// damped Newton on a -> grad f1(a) + y with backtracking on the residual norm
inline VectorXd custom_cost_solve(const CustomCost& c, double t, const VectorXd& y) {
  VectorXd a = -y / (std::isfinite(c.smoothness) ? c.smoothness : c.strong_convexity);
  const double tol = 1e-12 * std::max(1.0, y.norm());
  VectorXd r = c.gradient(t, a) + y;
  for (int it = 0; it < 200; ++it) {
    const double rn = r.norm();
    if (rn <= tol) return a;
    MatrixXd h = c.hessian ? c.hessian(t, a) : fd_hessian(c, t, a);
    VectorXd d = h.ldlt().solve(-r);
    if (!d.allFinite()) d = -r / c.strong_convexity;
    double step = 1.0;
    VectorXd trial, rt;
    for (int ls = 0; ls < 60; ++ls) {
      trial = a + step * d;
      rt = c.gradient(t, trial) + y;
      if (rt.norm() < (1.0 - 1e-4 * step) * rn) break;
      step *= 0.5;
    }
    a = trial;
    r = rt;
  }
  if (r.norm() <= 1e-10 * std::max(1.0, y.norm())) return a;
  throw NonConvergence("lambda_min: Newton iteration for the custom cost did not converge (residual " +
                       std::to_string(r.norm()) + ")");
}

}  // namespace detail

inline double f1_value(const CostSpec& cost, double t, const VectorXd& a) {
  if (std::holds_alternative<QuadraticCost>(cost.f1)) return 0.5 * a.squaredNorm();
  if (auto* p = std::get_if<PowerCost>(&cost.f1)) return p->scale * std::pow(a.norm(), p->exponent);
  if (std::holds_alternative<QuadraticPlusAsinhCost>(cost.f1)) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < a.size(); ++c) s += a(c) * a(c) + std::asinh(a(c));
    return s;
  }
  const auto& c = std::get<CustomCost>(cost.f1);
  if (c.value) return c.value(t, a);
  // 8-point Gauss-Legendre on [0, 1] of grad f1(s a) . a
  static const double nodes[8] = {0.0198550717512319, 0.1016667612931866, 0.2372337950418355, 0.4082826787521751,
                                  0.5917173212478249, 0.7627662049581645, 0.8983332387068134, 0.9801449282487681};
  static const double weights[8] = {0.0506142681451881, 0.1111905172266872, 0.1568533229389436, 0.1813418916891810,
                                    0.1813418916891810, 0.1568533229389436, 0.1111905172266872, 0.0506142681451881};
  double s = 0.0;
  for (int q = 0; q < 8; ++q) s += weights[q] * c.gradient(t, nodes[q] * a).dot(a);
  return s;
}

inline VectorXd f1_gradient(const CostSpec& cost, double t, const VectorXd& a) {
  if (std::holds_alternative<QuadraticCost>(cost.f1)) return a;
  if (auto* p = std::get_if<PowerCost>(&cost.f1)) {
    const double n = a.norm();
    if (n == 0.0) return VectorXd::Zero(a.size());
    return p->scale * p->exponent * std::pow(n, p->exponent - 2.0) * a;
  }
  if (std::holds_alternative<QuadraticPlusAsinhCost>(cost.f1)) {
    VectorXd g(a.size());
    for (Eigen::Index c = 0; c < a.size(); ++c) g(c) = detail::asinh_cost_grad(a(c));
    return g;
  }
  return std::get<CustomCost>(cost.f1).gradient(t, a);
}

/// argmin_a f1(t, a) + a.y
inline VectorXd lambda_min(const CostSpec& cost, double t, const VectorXd& y) {
  if (!y.allFinite()) throw std::invalid_argument("lambda_min: non-finite y");
  if (std::holds_alternative<QuadraticCost>(cost.f1)) return -y;
  if (auto* p = std::get_if<PowerCost>(&cost.f1)) {
    const double n = y.norm();
    if (n == 0.0) return VectorXd::Zero(y.size());
    const double r = std::pow(n / (p->scale * p->exponent), 1.0 / (p->exponent - 1.0));
    return -(r / n) * y;
  }
  if (std::holds_alternative<QuadraticPlusAsinhCost>(cost.f1)) {
    VectorXd a(y.size());
    for (Eigen::Index c = 0; c < y.size(); ++c) a(c) = detail::asinh_cost_solve(-y(c));
    return a;
  }
  return detail::custom_cost_solve(std::get<CustomCost>(cost.f1), t, y);
}

/// inf_a f1(t, a) + a.y
inline double h1(const CostSpec& cost, double t, const VectorXd& y) {
  if (std::holds_alternative<QuadraticCost>(cost.f1)) return -0.5 * y.squaredNorm();
  VectorXd a = lambda_min(cost, t, y);
  return f1_value(cost, t, a) + a.dot(y);
}

// ---- batched kernels over whole clouds ----
//
// X, Y hold one particle per row. LX (and LY) are the atoms of the law argument; for the
// McKean-Vlasov and N-particle systems they are X and Y themselves, for frozen-law copies
// they are a reference cloud.

namespace detail {

inline VectorXd row_vec(const Points& p, Eigen::Index i) { return p.row(i).transpose(); }

inline VectorXd law_mean(const Points& L) { return L.colwise().sum().transpose() / static_cast<double>(L.rows()); }

inline void interaction_drift_rows(const InteractionSpec& inter, double t, const Points& X, const Points& LX,
                                   Points& out) {
  const Eigen::Index n = X.rows(), m = X.cols();
  if (std::holds_alternative<NoInteraction>(inter.kind)) {
    out.setZero(n, m);
  } else if (std::holds_alternative<PairwiseQuadratic>(inter.kind)) {
    const VectorXd mu = law_mean(LX);
    out.resize(n, m);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < m; ++c) out(i, c) = -(X(i, c) - mu(c));
  } else if (auto* p = std::get_if<PairwisePotential>(&inter.kind)) {
    out.resize(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      VectorXd acc = VectorXd::Zero(m);
      for (Eigen::Index l = 0; l < LX.rows(); ++l) acc += p->grad_psi((X.row(i) - LX.row(l)).transpose());
      out.row(i) = -(acc / static_cast<double>(LX.rows())).transpose();
    }
  } else {
    const auto& g = std::get<GeneralInteraction>(inter.kind);
    out.resize(n, m);
    for (Eigen::Index i = 0; i < n; ++i) out.row(i) = g.b(t, row_vec(X, i), LX).transpose();
  }
}

}  // namespace detail

/// Rows of b(t, X_i, law).
inline void interaction_drift_all(const ProblemSpec& spec, double t, const Points& X, const Points& LX, Points& out) {
  detail::interaction_drift_rows(spec.interaction, t, X, LX, out);
}

/// Rows of Lambda(t, Y_i) + b(t, X_i, law).
inline void drift_all(const ProblemSpec& spec, double t, const Points& X, const Points& Y, const Points& LX,
                      Points& out) {
  detail::interaction_drift_rows(spec.interaction, t, X, LX, out);
  const Eigen::Index n = X.rows();
  if (std::holds_alternative<QuadraticCost>(spec.cost.f1)) {
    out -= Y;
    return;
  }
  for (Eigen::Index i = 0; i < n; ++i) out.row(i) += lambda_min(spec.cost, t, detail::row_vec(Y, i)).transpose();
}

/// Rows of F(t, X_i, Y_i, joint law (LX, LY)).
inline void sensitivity_all(const ProblemSpec& spec, double t, const Points& X, const Points& Y, const Points& LX,
                            const Points& LY, Points& out) {
  const Eigen::Index n = X.rows(), m = X.cols(), nl = LX.rows();
  const double inv = 1.0 / static_cast<double>(nl);
  const auto& kind = spec.interaction.kind;
  if (std::holds_alternative<NoInteraction>(kind)) {
    out.setZero(n, m);
  } else if (std::holds_alternative<PairwiseQuadratic>(kind)) {
    const VectorXd ybar = detail::law_mean(LY);
    out.resize(n, m);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index c = 0; c < m; ++c) out(i, c) = -Y(i, c) + ybar(c);
  } else if (auto* p = std::get_if<PairwisePotential>(&kind)) {
    if (!p->hess_psi) throw std::invalid_argument("sensitivity_F: pairwise_potential needs the Hessian of Psi");
    out.resize(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      VectorXd acc = VectorXd::Zero(m);
      const VectorXd xi = detail::row_vec(X, i), yi = detail::row_vec(Y, i);
      for (Eigen::Index l = 0; l < nl; ++l) {
        const VectorXd d = xi - detail::row_vec(LX, l);
        acc -= p->hess_psi(d).transpose() * yi;
        acc += p->hess_psi(-d).transpose() * detail::row_vec(LY, l);
      }
      out.row(i) = (acc * inv).transpose();
    }
  } else {
    const auto& g = std::get<GeneralInteraction>(kind);
    if (!g.dx_b || !g.dmu_b) throw std::invalid_argument("sensitivity_F: general interaction needs dx_b and dmu_b");
    out.resize(n, m);
    for (Eigen::Index i = 0; i < n; ++i) {
      const VectorXd xi = detail::row_vec(X, i), yi = detail::row_vec(Y, i);
      VectorXd acc = g.dx_b(t, xi, LX).transpose() * yi;
      VectorXd avg = VectorXd::Zero(m);
      for (Eigen::Index l = 0; l < nl; ++l)
        avg += g.dmu_b(t, detail::row_vec(LX, l), LX, xi).transpose() * detail::row_vec(LY, l);
      out.row(i) = (acc + avg * inv).transpose();
    }
  }
  if (spec.cost.f2) {
    const auto& f2 = *spec.cost.f2;
    for (Eigen::Index i = 0; i < n; ++i) {
      const VectorXd xi = detail::row_vec(X, i);
      VectorXd acc = f2.grad_x ? f2.grad_x(t, xi, LX) : VectorXd::Zero(m);
      if (f2.lderiv) {
        VectorXd avg = VectorXd::Zero(m);
        for (Eigen::Index l = 0; l < nl; ++l) avg += f2.lderiv(t, detail::row_vec(LX, l), LX, xi);
        acc += avg * inv;
      }
      out.row(i) += acc.transpose();
    }
  }
}

// ---- pointwise forms ----

inline VectorXd interaction_drift(const ProblemSpec& spec, double t, const VectorXd& x, const ParticleCloud& law) {
  Points X = x.transpose();
  Points out;
  interaction_drift_all(spec, t, X, law.points(), out);
  return out.row(0).transpose();
}

/// Lambda(t, y) + b(t, x, law)
inline VectorXd drift_B(const ProblemSpec& spec, double t, const VectorXd& x, const VectorXd& y,
                        const ParticleCloud& law) {
  if (x.size() != spec.dim || y.size() != spec.dim || law.dim() != spec.dim)
    throw std::invalid_argument("drift_B: dimension mismatch");
  Points X = x.transpose(), Y = y.transpose(), out;
  drift_all(spec, t, X, Y, law.points(), out);
  return out.row(0).transpose();
}

/// Sensitivity of H2 = f2 + b.y; law_xy holds concatenated (x~, y~) rows.
inline VectorXd sensitivity_F(const ProblemSpec& spec, double t, const VectorXd& x, const VectorXd& y,
                              const ParticleCloud& law_xy) {
  const int m = spec.dim;
  if (x.size() != m || y.size() != m || law_xy.dim() != 2 * m)
    throw std::invalid_argument("sensitivity_F: dimension mismatch");
  Points X = x.transpose(), Y = y.transpose(), out;
  Points LX = law_xy.points().leftCols(m), LY = law_xy.points().rightCols(m);
  sensitivity_all(spec, t, X, Y, LX, LY, out);
  return out.row(0).transpose();
}

inline double f2_value(const ProblemSpec& spec, double t, const VectorXd& x, const Points& law) {
  if (!spec.cost.f2 || !spec.cost.f2->value) return 0.0;
  return spec.cost.f2->value(t, x, law);
}

/// f1(t, a) + f2(t, x, law)
inline double running_cost(const ProblemSpec& spec, double t, const VectorXd& x, const VectorXd& a,
                           const ParticleCloud& law) {
  return f1_value(spec.cost, t, a) + f2_value(spec, t, x, law.points());
}

}  // namespace mfsb

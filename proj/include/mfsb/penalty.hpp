#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "mfsb/measures.hpp"
#include "mfsb/phi_family.hpp"

namespace mfsb {

/// Smooth scalar feature psi on R^m with its gradient.
struct Feature {
  std::string name;
  std::function<double(const double*, int)> value;
  std::function<void(const double*, int, double*)> gradient;
  bool monomial = false;  // already spanned by the polynomial regression basis

  double mean(const Points& pts) const {
    double s = 0.0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) s += value(pts.row(i).data(), static_cast<int>(pts.cols()));
    return s / static_cast<double>(pts.rows());
  }
};

inline Feature monomial_feature(const std::vector<int>& e) {
  std::string name = "x^(";
  for (std::size_t c = 0; c < e.size(); ++c) name += (c ? "," : "") + std::to_string(e[c]);
  name += ")";
  Feature f;
  f.name = name;
  f.monomial = true;
  f.value = [e](const double* x, int) { return monomial(x, e); };
  f.gradient = [e](const double* x, int m, double* out) {
    for (int c = 0; c < m; ++c) {
      if (e[static_cast<std::size_t>(c)] == 0) {
        out[c] = 0.0;
        continue;
      }
      auto d = e;
      d[static_cast<std::size_t>(c)] -= 1;
      out[c] = e[static_cast<std::size_t>(c)] * monomial(x, d);
    }
  };
  return f;
}

/// exp(-(x_c - center)^2 / (2 width^2)) in coordinate c.
inline Feature bump_feature(int coord, double center, double width) {
  Feature f;
  f.name = "bump[" + std::to_string(coord) + "](" + std::to_string(center) + ")";
  const double inv = 1.0 / (width * width);
  f.value = [=](const double* x, int) {
    const double d = x[coord] - center;
    return std::exp(-0.5 * d * d * inv);
  };
  f.gradient = [=](const double* x, int m, double* out) {
    for (int c = 0; c < m; ++c) out[c] = 0.0;
    const double d = x[coord] - center;
    out[coord] = -d * inv * std::exp(-0.5 * d * d * inv);
  };
  return f;
}

/// g(mu) = mu(phi) - target(phi)
struct ConvexDualPenalty {
  PhiMember phi;
  double target_mean = 0.0;

  ConvexDualPenalty() = default;
  ConvexDualPenalty(PhiMember f, const ParticleCloud& target) : phi(std::move(f)), target_mean(phi.mean(target.points())) {}
  ConvexDualPenalty(PhiMember f, double target_value) : phi(std::move(f)), target_mean(target_value) {}
};

/// g(mu) = sum_j w_j (mu(psi_j) - target_j)^2
struct FeatureMomentPenalty {
  std::vector<Feature> features;
  std::vector<double> weights;
  std::vector<double> target_moments;

  FeatureMomentPenalty() = default;
  FeatureMomentPenalty(std::vector<Feature> fs, std::vector<double> ws, const ParticleCloud& target)
      : features(std::move(fs)), weights(std::move(ws)) {
    if (features.size() != weights.size()) throw std::invalid_argument("feature_moment: weights/features size mismatch");
    for (double w : weights)
      if (!(w > 0.0)) throw std::invalid_argument("feature_moment: weights must be > 0");
    for (const auto& f : features) target_moments.push_back(f.mean(target.points()));
  }
};

/// g(mu) = tau * log(sum_l exp(G_l / tau) [+ 1]), G_l = mu(phi_l) - target(phi_l).
/// A smooth upper bound of max_l G_l (and of 0 when include_zero is set), used as the
/// penalty of the primal weak problem restricted to a finite family.
struct SoftMaxDualPenalty {
  PhiFamily family;
  std::vector<double> target_means;
  double temperature = 0.01;
  bool include_zero = true;

  SoftMaxDualPenalty() = default;
  SoftMaxDualPenalty(PhiFamily fam, const ParticleCloud& target, double tau, bool with_zero = true)
      : family(std::move(fam)), temperature(tau), include_zero(with_zero) {
    if (family.members.empty()) throw std::invalid_argument("softmax penalty: empty family");
    if (!(tau > 0.0)) throw std::invalid_argument("softmax penalty: temperature must be > 0");
    for (const auto& f : family.members) target_means.push_back(f.mean(target.points()));
  }
};

using PenaltySpec = std::variant<ConvexDualPenalty, FeatureMomentPenalty, SoftMaxDualPenalty>;

inline const char* penalty_kind(const PenaltySpec& p) {
  if (std::holds_alternative<ConvexDualPenalty>(p)) return "convex_dual";
  if (std::holds_alternative<FeatureMomentPenalty>(p)) return "feature_moment";
  return "softmax_dual";
}

/// Monomials of degree 1..degree plus `bumps` Gaussian bumps per coordinate centred at
/// quantiles of the target, width equal to the centre spacing; unit weights.
inline FeatureMomentPenalty default_feature_penalty(const ParticleCloud& target, int degree = 2, int bumps = 8) {
  const int m = target.dim();
  std::vector<Feature> fs;
  for (const auto& e : monomial_exponents(m, 1, degree)) fs.push_back(monomial_feature(e));
  for (int c = 0; c < m && bumps > 0; ++c) {
    std::vector<double> col(static_cast<std::size_t>(target.size()));
    for (int i = 0; i < target.size(); ++i) col[static_cast<std::size_t>(i)] = target.points()(i, c);
    std::sort(col.begin(), col.end());
    auto quantile = [&](double level) {
      const double pos = level * (static_cast<double>(col.size()) - 1.0);
      const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi = std::min(lo + 1, col.size() - 1);
      return col[lo] + (pos - static_cast<double>(lo)) * (col[hi] - col[lo]);
    };
    std::vector<double> centers;
    for (int q = 0; q < bumps; ++q) centers.push_back(quantile((q + 0.5) / bumps));
    // one standard deviation wide: narrower bumps make the terminal condition stiff
    double mu = 0.0, var = 0.0;
    for (double v : col) mu += v;
    mu /= static_cast<double>(col.size());
    for (double v : col) var += (v - mu) * (v - mu);
    double width = std::sqrt(var / static_cast<double>(col.size()));
    if (!(width > 0.0)) width = 1.0;
    for (double ctr : centers) fs.push_back(bump_feature(c, ctr, width));
  }
  std::vector<double> ws(fs.size(), 1.0);
  return FeatureMomentPenalty(std::move(fs), std::move(ws), target);
}

/// Law-dependent part of the penalty: feature means (feature_moment), member means
/// (softmax_dual), empty for convex_dual whose L-derivative does not depend on the law.
inline VectorXd law_summary(const PenaltySpec& p, const Points& law) {
  if (auto* fm = std::get_if<FeatureMomentPenalty>(&p)) {
    VectorXd s(static_cast<Eigen::Index>(fm->features.size()));
    for (std::size_t j = 0; j < fm->features.size(); ++j) s(static_cast<Eigen::Index>(j)) = fm->features[j].mean(law);
    return s;
  }
  if (auto* sm = std::get_if<SoftMaxDualPenalty>(&p)) {
    VectorXd s(static_cast<Eigen::Index>(sm->family.members.size()));
    for (std::size_t l = 0; l < sm->family.members.size(); ++l)
      s(static_cast<Eigen::Index>(l)) = sm->family.members[l].mean(law);
    return s;
  }
  return VectorXd();
}

/// Softmax weights of the members (the zero element takes the remainder).
inline std::vector<double> softmax_weights(const SoftMaxDualPenalty& sm, const VectorXd& summary) {
  std::vector<double> g;
  double top = sm.include_zero ? 0.0 : -std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < sm.family.members.size(); ++l) {
    g.push_back((summary(static_cast<Eigen::Index>(l)) - sm.target_means[l]) / sm.temperature);
    top = std::max(top, g.back());
  }
  double z = sm.include_zero ? std::exp(-top) : 0.0;
  for (double v : g) z += std::exp(v - top);
  std::vector<double> w;
  for (double v : g) w.push_back(std::exp(v - top) / z);
  return w;
}

/// The L-derivative x -> dmu g(law)(x) with all law-dependent coefficients precomputed.
class LawDerivative {
 public:
  LawDerivative(const PenaltySpec& p, const Points& law) : LawDerivative(p, law_summary(p, law)) {}

  LawDerivative(const PenaltySpec& p, const VectorXd& summary) : p_(&p) {
    if (auto* fm = std::get_if<FeatureMomentPenalty>(&p)) {
      for (std::size_t j = 0; j < fm->features.size(); ++j)
        coef_.push_back(2.0 * fm->weights[j] * (summary(static_cast<Eigen::Index>(j)) - fm->target_moments[j]));
    } else if (auto* sm = std::get_if<SoftMaxDualPenalty>(&p)) {
      coef_ = softmax_weights(*sm, summary);
    }
  }

  void eval(const double* x, int m, double* out) const {
    if (auto* cd = std::get_if<ConvexDualPenalty>(p_)) {
      cd->phi.gradient(x, m, out);
      return;
    }
    for (int c = 0; c < m; ++c) out[c] = 0.0;
    std::vector<double> g(static_cast<std::size_t>(m));
    if (auto* fm = std::get_if<FeatureMomentPenalty>(p_)) {
      for (std::size_t j = 0; j < fm->features.size(); ++j) {
        if (coef_[j] == 0.0) continue;
        fm->features[j].gradient(x, m, g.data());
        for (int c = 0; c < m; ++c) out[c] += coef_[j] * g[static_cast<std::size_t>(c)];
      }
      return;
    }
    const auto& sm = std::get<SoftMaxDualPenalty>(*p_);
    for (std::size_t l = 0; l < sm.family.members.size(); ++l) {
      sm.family.members[l].gradient(x, m, g.data());
      for (int c = 0; c < m; ++c) out[c] += coef_[l] * g[static_cast<std::size_t>(c)];
    }
  }

  VectorXd operator()(const VectorXd& x) const {
    VectorXd out(x.size());
    eval(x.data(), static_cast<int>(x.size()), out.data());
    return out;
  }

  /// Rows dmu g(law)(X_i).
  Points rows(const Points& X) const {
    Points out(X.rows(), X.cols());
    for (Eigen::Index i = 0; i < X.rows(); ++i) eval(X.row(i).data(), static_cast<int>(X.cols()), out.row(i).data());
    return out;
  }

  /// Weights of the summary gradients in dmu g (empty for convex_dual).
  VectorXd coefficients() const { return Eigen::Map<const VectorXd>(coef_.data(), static_cast<Eigen::Index>(coef_.size())); }

 private:
  const PenaltySpec* p_;
  std::vector<double> coef_;
};

/// Gradients of the functions behind law_summary, one n x m block per summary entry.
inline std::vector<Points> summary_gradients(const PenaltySpec& p, const Points& X) {
  std::vector<Points> out;
  auto fill = [&X, &out](auto&& grad) {
    Points G(X.rows(), X.cols());
    for (Eigen::Index i = 0; i < X.rows(); ++i) grad(X.row(i).data(), static_cast<int>(X.cols()), G.row(i).data());
    out.push_back(std::move(G));
  };
  if (auto* fm = std::get_if<FeatureMomentPenalty>(&p)) {
    for (const auto& f : fm->features) fill(f.gradient);
  } else if (auto* sm = std::get_if<SoftMaxDualPenalty>(&p)) {
    for (const auto& phi : sm->family.members)
      fill([&phi](const double* x, int m, double* o) { phi.gradient(x, m, o); });
  }
  return out;
}

/// Values of the functions behind law_summary, one column per summary entry.
inline MatrixXd summary_values(const PenaltySpec& p, const Points& X) {
  std::vector<std::function<double(const double*, int)>> fs;
  if (auto* fm = std::get_if<FeatureMomentPenalty>(&p)) {
    for (const auto& f : fm->features) fs.push_back(f.value);
  } else if (auto* sm = std::get_if<SoftMaxDualPenalty>(&p)) {
    for (const auto& phi : sm->family.members) fs.push_back([&phi](const double* x, int m) { return phi.value(x, m); });
  }
  MatrixXd out(X.rows(), static_cast<Eigen::Index>(fs.size()));
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (std::size_t c = 0; c < fs.size(); ++c)
      out(i, static_cast<Eigen::Index>(c)) = fs[c](X.row(i).data(), static_cast<int>(X.cols()));
  return out;
}

/// Rows sum_c w_c grad psi_c(X_i) over the summary functions.
inline Points weighted_summary_gradient(const PenaltySpec& p, const VectorXd& w, const Points& X) {
  const std::vector<Points> G = summary_gradients(p, X);
  Points out = Points::Zero(X.rows(), X.cols());
  for (std::size_t c = 0; c < G.size(); ++c) out += w(static_cast<Eigen::Index>(c)) * G[c];
  return out;
}

/// First variation of g at the law of X, evaluated at each row: the per-particle term whose
/// mean moves g to first order. Used for the spread of value estimates.
inline VectorXd penalty_influence(const PenaltySpec& p, const Points& X) {
  if (auto* cd = std::get_if<ConvexDualPenalty>(&p)) {
    VectorXd out(X.rows());
    for (Eigen::Index i = 0; i < X.rows(); ++i) out(i) = cd->phi.value(X.row(i).data(), static_cast<int>(X.cols()));
    return out;
  }
  return summary_values(p, X) * LawDerivative(p, X).coefficients();
}

inline double penalty_value(const PenaltySpec& p, const Points& pts) {
  if (auto* cd = std::get_if<ConvexDualPenalty>(&p)) return cd->phi.mean(pts) - cd->target_mean;
  if (auto* fm = std::get_if<FeatureMomentPenalty>(&p)) {
    double s = 0.0;
    for (std::size_t j = 0; j < fm->features.size(); ++j) {
      const double gap = fm->features[j].mean(pts) - fm->target_moments[j];
      s += fm->weights[j] * gap * gap;
    }
    return s;
  }
  const auto& sm = std::get<SoftMaxDualPenalty>(p);
  double top = sm.include_zero ? 0.0 : -std::numeric_limits<double>::infinity();
  std::vector<double> g;
  for (std::size_t l = 0; l < sm.family.members.size(); ++l) {
    g.push_back((sm.family.members[l].mean(pts) - sm.target_means[l]) / sm.temperature);
    top = std::max(top, g.back());
  }
  double z = sm.include_zero ? std::exp(-top) : 0.0;
  for (double v : g) z += std::exp(v - top);
  return sm.temperature * (top + std::log(z));
}

inline double penalty_value(const PenaltySpec& p, const ParticleCloud& cloud) { return penalty_value(p, cloud.points()); }

inline VectorXd penalty_lderiv(const PenaltySpec& p, const ParticleCloud& cloud, const VectorXd& x) {
  if (x.size() != cloud.dim()) throw std::invalid_argument("penalty_lderiv: dimension mismatch");
  return LawDerivative(p, cloud.points())(x);
}

/// avg_i (a_i - b_i).(dmu g(law_a)(a_i) - dmu g(law_b)(b_i)) under the index coupling.
inline double displacement_convexity_probe(const PenaltySpec& p, const ParticleCloud& a, const ParticleCloud& b) {
  if (a.size() != b.size() || a.dim() != b.dim()) throw std::invalid_argument("displacement_convexity_probe: size mismatch");
  Points ga = LawDerivative(p, a.points()).rows(a.points());
  Points gb = LawDerivative(p, b.points()).rows(b.points());
  double s = 0.0;
  for (int i = 0; i < a.size(); ++i) s += (a.points().row(i) - b.points().row(i)).dot(ga.row(i) - gb.row(i));
  return s / a.size();
}

/// Non-polynomial regressors suggested by the penalty: each non-monomial feature and the
/// components of its gradient (the terminal condition lies in their span).
inline std::vector<Feature> regression_features(const PenaltySpec& p, int m) {
  std::vector<Feature> out;
  auto add_atom = [&out, m](const PhiAtom& atom, const std::string& tag) {
    Feature v;
    v.name = tag;
    v.value = [atom](const double* x, int dim) { return detail::atom_value(atom, x, dim); };
    out.push_back(v);
    if (auto* rp = std::get_if<Ridge>(&atom)) {
      // gradient is u * sigmoid(.), one scalar regressor suffices
      const Ridge r = *rp;
      Feature g;
      g.name = tag + "'";
      g.value = [r](const double* x, int dim) {
        double z = -r.offset;
        for (int c = 0; c < dim; ++c) z += r.direction(c) * x[c];
        return sigmoid(z / r.smoothing);
      };
      out.push_back(g);
    } else {
      for (int c = 0; c < m; ++c) {
        Feature g;
        g.name = tag + "'" + std::to_string(c);
        g.value = [atom, c](const double* x, int dim) {
          std::vector<double> gr(static_cast<std::size_t>(dim), 0.0);
          detail::atom_gradient(atom, x, dim, 1.0, gr.data());
          return gr[static_cast<std::size_t>(c)];
        };
        out.push_back(g);
      }
    }
  };
  auto add_member = [&add_atom](const PhiMember& phi, const std::string& tag) {
    auto atoms = phi.atoms();
    for (std::size_t q = 0; q < atoms.size(); ++q)
      add_atom(atoms[q], atoms.size() == 1 ? tag : tag + "." + std::to_string(q));
  };
  if (auto* cd = std::get_if<ConvexDualPenalty>(&p)) {
    add_member(cd->phi, "phi");
  } else if (auto* sm = std::get_if<SoftMaxDualPenalty>(&p)) {
    for (std::size_t l = 0; l < sm->family.members.size(); ++l) add_member(sm->family.members[l], "phi" + std::to_string(l));
  } else {
    const auto& fm = std::get<FeatureMomentPenalty>(p);
    for (const auto& f : fm.features) {
      if (f.monomial) continue;
      out.push_back(f);
      Feature g;
      g.name = f.name + "'";
      g.value = [f](const double* x, int m) {
        std::vector<double> gr(static_cast<std::size_t>(m));
        f.gradient(x, m, gr.data());
        double s = 0.0;
        for (double v : gr) s += v;
        return s;
      };
      out.push_back(g);
    }
  }
  return out;
}

}  // namespace mfsb

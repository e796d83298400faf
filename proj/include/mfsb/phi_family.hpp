#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <variant>
#include <vector>

#include "mfsb/measures.hpp"

namespace mfsb {

inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }
inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// x -> s * softplus((u.x - c) / s), u a unit vector.
struct Ridge {
  VectorXd direction;
  double offset = 0.0;
  double smoothing = 1.0;
};

/// x -> sqrt(|x|^2 + s^2) - s.
struct SmoothedNorm {
  double smoothing = 1.0;
};

using PhiAtom = std::variant<Ridge, SmoothedNorm>;

/// sum_l w_l phi_l with w_l >= 0 and sum_l w_l <= 1 (the rest on the zero function).
struct PhiMixture {
  std::vector<double> weights;
  std::vector<PhiAtom> parts;
};

namespace detail {

inline double atom_value(const PhiAtom& a, const double* x, int m) {
  if (auto* r = std::get_if<Ridge>(&a)) {
    double z = -r->offset;
    for (int c = 0; c < m; ++c) z += r->direction(c) * x[c];
    return r->smoothing * softplus(z / r->smoothing);
  }
  const double s = std::get<SmoothedNorm>(a).smoothing;
  double q = 0.0;
  for (int c = 0; c < m; ++c) q += x[c] * x[c];
  return std::sqrt(q + s * s) - s;
}

// adds w * grad into out
inline void atom_gradient(const PhiAtom& a, const double* x, int m, double w, double* out) {
  if (auto* r = std::get_if<Ridge>(&a)) {
    double z = -r->offset;
    for (int c = 0; c < m; ++c) z += r->direction(c) * x[c];
    const double sg = w * sigmoid(z / r->smoothing);
    for (int c = 0; c < m; ++c) out[c] += r->direction(c) * sg;
    return;
  }
  const double s = std::get<SmoothedNorm>(a).smoothing;
  double q = 0.0;
  for (int c = 0; c < m; ++c) q += x[c] * x[c];
  const double r = std::sqrt(q + s * s);
  for (int c = 0; c < m; ++c) out[c] += w * x[c] / r;
}

inline void check_atom(const PhiAtom& a) {
  if (auto* r = std::get_if<Ridge>(&a)) {
    if (!(r->smoothing > 0.0)) throw std::invalid_argument("ridge: smoothing must be > 0");
    if (std::abs(r->direction.norm() - 1.0) > 1e-12) throw std::invalid_argument("ridge: direction must be a unit vector");
  } else if (!(std::get<SmoothedNorm>(a).smoothing > 0.0)) {
    throw std::invalid_argument("smoothed norm: smoothing must be > 0");
  }
}

}  // namespace detail

/// One test function: convex, C^1, 1-Lipschitz, nonnegative.
class PhiMember {
 public:
  PhiMember() = default;
  PhiMember(Ridge r) : kind_(std::move(r)) { detail::check_atom(std::get<Ridge>(kind_)); }
  PhiMember(SmoothedNorm n) : kind_(n) { detail::check_atom(std::get<SmoothedNorm>(kind_)); }
  PhiMember(PhiMixture mix) : kind_(std::move(mix)) {
    const auto& mx = std::get<PhiMixture>(kind_);
    if (mx.weights.size() != mx.parts.size()) throw std::invalid_argument("phi mixture: size mismatch");
    double total = 0.0;
    for (double w : mx.weights) {
      if (!(w >= 0.0)) throw std::invalid_argument("phi mixture: negative weight");
      total += w;
    }
    if (total > 1.0 + 1e-12) throw std::invalid_argument("phi mixture: weights must sum to at most 1");
    for (const auto& a : mx.parts) detail::check_atom(a);
  }

  const std::variant<Ridge, SmoothedNorm, PhiMixture>& kind() const { return kind_; }

  /// The atoms this member is built from (itself unless it is a mixture).
  std::vector<PhiAtom> atoms() const {
    if (auto* r = std::get_if<Ridge>(&kind_)) return {*r};
    if (auto* n = std::get_if<SmoothedNorm>(&kind_)) return {*n};
    return std::get<PhiMixture>(kind_).parts;
  }

  double value(const double* x, int m) const {
    if (auto* r = std::get_if<Ridge>(&kind_)) return detail::atom_value(*r, x, m);
    if (auto* n = std::get_if<SmoothedNorm>(&kind_)) return detail::atom_value(*n, x, m);
    const auto& mx = std::get<PhiMixture>(kind_);
    double v = 0.0;
    for (std::size_t l = 0; l < mx.parts.size(); ++l) v += mx.weights[l] * detail::atom_value(mx.parts[l], x, m);
    return v;
  }
  double value(const VectorXd& x) const { return value(x.data(), static_cast<int>(x.size())); }

  void gradient(const double* x, int m, double* out) const {
    for (int c = 0; c < m; ++c) out[c] = 0.0;
    if (auto* r = std::get_if<Ridge>(&kind_)) return detail::atom_gradient(*r, x, m, 1.0, out);
    if (auto* n = std::get_if<SmoothedNorm>(&kind_)) return detail::atom_gradient(*n, x, m, 1.0, out);
    const auto& mx = std::get<PhiMixture>(kind_);
    for (std::size_t l = 0; l < mx.parts.size(); ++l) detail::atom_gradient(mx.parts[l], x, m, mx.weights[l], out);
  }
  VectorXd gradient(const VectorXd& x) const {
    VectorXd g(x.size());
    gradient(x.data(), static_cast<int>(x.size()), g.data());
    return g;
  }

  /// Mean of the member over the atoms of a cloud.
  double mean(const Points& pts) const {
    double s = 0.0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) s += value(pts.row(i).data(), static_cast<int>(pts.cols()));
    return s / static_cast<double>(pts.rows());
  }

 private:
  std::variant<Ridge, SmoothedNorm, PhiMixture> kind_{SmoothedNorm{}};
};

struct PhiFamily {
  std::vector<PhiMember> members;
  int size() const { return static_cast<int>(members.size()); }
};

/// Ridge family: `directions` unit directions (seeded uniform on the sphere; {+1,-1} in 1-D,
/// cycling through +-e_1 first when the count is at most 2), each with `offsets` offsets at
/// interior quantiles of the target projected on that direction. Smoothing is
/// smoothing_factor times the average coordinate standard deviation of the target.
inline PhiFamily default_phi_family(const ParticleCloud& target, int directions = 16, int offsets = 5,
                                    double smoothing_factor = 0.1, std::uint64_t seed = 0,
                                    bool include_smoothed_norm = false) {
  if (directions < 1 || offsets < 1) throw std::invalid_argument("phi family: counts must be >= 1");
  const int m = target.dim();
  const Points& pts = target.points();
  VectorXd mu = target.mean();
  double var = 0.0;
  for (int c = 0; c < m; ++c) var += (pts.col(c).array() - mu(c)).square().mean();
  const double sd = std::sqrt(var / m);
  const double s = smoothing_factor * (sd > 0.0 ? sd : 1.0);

  std::vector<VectorXd> dirs;
  if (m == 1 || directions <= 2) {
    for (int q = 0; q < directions; ++q) {
      VectorXd u = VectorXd::Zero(m);
      u(0) = (q % 2 == 0) ? 1.0 : -1.0;
      dirs.push_back(u);
    }
  } else {
    Rng rng(seed, "phi-directions");
    for (int q = 0; q < directions; ++q) {
      VectorXd u(m);
      do {
        for (int c = 0; c < m; ++c) u(c) = rng.normal();
      } while (u.norm() == 0.0);
      dirs.push_back(u / u.norm());
    }
  }

  PhiFamily fam;
  std::vector<double> proj(static_cast<std::size_t>(target.size()));
  for (const auto& u : dirs) {
    for (int i = 0; i < target.size(); ++i) proj[static_cast<std::size_t>(i)] = pts.row(i).dot(u);
    std::sort(proj.begin(), proj.end());
    for (int o = 0; o < offsets; ++o) {
      const double level = (o + 1.0) / (offsets + 1.0);
      const double pos = level * (static_cast<double>(proj.size()) - 1.0);
      const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
      const std::size_t hi = std::min(lo + 1, proj.size() - 1);
      const double c = proj[lo] + (pos - static_cast<double>(lo)) * (proj[hi] - proj[lo]);
      fam.members.emplace_back(Ridge{u, c, s});
    }
  }
  if (include_smoothed_norm) fam.members.emplace_back(SmoothedNorm{s});
  return fam;
}

/// max over the family of mean_a(phi) - mean_target(phi). A value <= tol means a is
/// dominated by target in convex order as far as the family can tell.
inline double convex_order_gap(const ParticleCloud& a, const ParticleCloud& target, const PhiFamily& family) {
  if (family.members.empty()) throw std::invalid_argument("convex_order_gap: empty family");
  if (a.dim() != target.dim()) throw std::invalid_argument("convex_order_gap: dimension mismatch");
  double gap = -std::numeric_limits<double>::infinity();
  for (const auto& phi : family.members) gap = std::max(gap, phi.mean(a.points()) - phi.mean(target.points()));
  return gap;
}

}  // namespace mfsb

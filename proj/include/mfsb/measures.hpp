#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "mfsb/rng.hpp"

namespace mfsb {

/// Row-major point array: one row per atom.
using Points = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Uniformly weighted empirical measure on R^m.
class ParticleCloud {
 public:
  ParticleCloud() = default;
  explicit ParticleCloud(Points pts) : pts_(std::move(pts)) {
    if (pts_.rows() < 1) throw std::invalid_argument("ParticleCloud: needs at least one point");
    if (pts_.cols() < 1) throw std::invalid_argument("ParticleCloud: dimension must be >= 1");
    if (!pts_.allFinite()) throw std::invalid_argument("ParticleCloud: non-finite coordinate");
  }

  static ParticleCloud from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw std::invalid_argument("ParticleCloud: needs at least one point");
    Points p(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() != rows[0].size()) throw std::invalid_argument("ParticleCloud: ragged rows");
      for (std::size_t c = 0; c < rows[i].size(); ++c) p(i, c) = rows[i][c];
    }
    return ParticleCloud(std::move(p));
  }
  static ParticleCloud from_values(const std::vector<double>& xs) {
    Points p(static_cast<Eigen::Index>(xs.size()), 1);
    for (std::size_t i = 0; i < xs.size(); ++i) p(i, 0) = xs[i];
    return ParticleCloud(std::move(p));
  }

  int size() const { return static_cast<int>(pts_.rows()); }
  int dim() const { return static_cast<int>(pts_.cols()); }
  const Points& points() const { return pts_; }
  VectorXd point(int i) const { return pts_.row(i).transpose(); }

  VectorXd mean() const { return pts_.colwise().sum().transpose() / static_cast<double>(size()); }
  double second_moment() const { return pts_.rowwise().squaredNorm().sum() / static_cast<double>(size()); }

 private:
  Points pts_;
};

struct GaussianSpec {
  VectorXd mean;
  MatrixXd cov;
};
struct MixtureComponent {
  double weight;
  VectorXd mean;
  MatrixXd cov;
};
struct GaussianMixtureSpec {
  std::vector<MixtureComponent> components;
};
struct UniformBoxSpec {
  VectorXd lo, hi;
};
struct EmpiricalSpec {
  std::string path;
};

struct MeasureSpec {
  std::variant<GaussianSpec, GaussianMixtureSpec, UniformBoxSpec, EmpiricalSpec> kind;
  int dim = 1;

  static MeasureSpec gaussian(VectorXd mean, MatrixXd cov) {
    int m = static_cast<int>(mean.size());
    return MeasureSpec{GaussianSpec{std::move(mean), std::move(cov)}, m};
  }
  static MeasureSpec gaussian1d(double mean, double sd) {
    return gaussian(VectorXd::Constant(1, mean), MatrixXd::Constant(1, 1, sd * sd));
  }
  static MeasureSpec mixture(std::vector<MixtureComponent> comps) {
    int m = comps.empty() ? 1 : static_cast<int>(comps[0].mean.size());
    return MeasureSpec{GaussianMixtureSpec{std::move(comps)}, m};
  }
  static MeasureSpec uniform_box(VectorXd lo, VectorXd hi) {
    int m = static_cast<int>(lo.size());
    return MeasureSpec{UniformBoxSpec{std::move(lo), std::move(hi)}, m};
  }
  static MeasureSpec empirical(std::string path, int m) { return MeasureSpec{EmpiricalSpec{std::move(path)}, m}; }
};

namespace detail {

inline void check_spd(const MatrixXd& cov, int m, const char* what) {
  if (cov.rows() != m || cov.cols() != m) throw std::invalid_argument(std::string(what) + ": covariance shape mismatch");
  if (!cov.isApprox(cov.transpose(), 1e-12)) throw std::invalid_argument(std::string(what) + ": covariance not symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(cov, Eigen::EigenvaluesOnly);
  if (!(es.eigenvalues().minCoeff() > 0.0))
    throw std::invalid_argument(std::string(what) + ": covariance not positive definite");
}

inline MatrixXd chol_factor(const MatrixXd& cov) { return cov.llt().matrixL(); }

}  // namespace detail

/// Reads one point per line, whitespace-separated. Blank lines and '#' comments are skipped.
inline ParticleCloud load_empirical(const std::string& path, int m) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("empirical measure: cannot open '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    std::vector<double> row;
    std::string tok;
    while (ss >> tok) {
      try {
        std::size_t used = 0;
        double v = std::stod(tok, &used);
        if (used != tok.size() || !std::isfinite(v)) throw std::invalid_argument(tok);
        row.push_back(v);
      } catch (const std::exception&) {
        throw std::runtime_error("empirical measure: " + path + ":" + std::to_string(lineno) + ": bad number '" + tok + "'");
      }
    }
    if (row.empty()) continue;
    if (static_cast<int>(row.size()) != m)
      throw std::runtime_error("empirical measure: " + path + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(m) + " values, got " + std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error("empirical measure: '" + path + "' has no rows");
  return ParticleCloud::from_rows(rows);
}

inline void validate(const MeasureSpec& spec) {
  const int m = spec.dim;
  if (m < 1) throw std::invalid_argument("measure: dimension must be >= 1");
  std::visit(
      [m](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, GaussianSpec>) {
          if (k.mean.size() != m) throw std::invalid_argument("gaussian: mean dimension mismatch");
          detail::check_spd(k.cov, m, "gaussian");
        } else if constexpr (std::is_same_v<K, GaussianMixtureSpec>) {
          if (k.components.empty()) throw std::invalid_argument("gaussian_mixture: no components");
          double total = 0.0;
          for (const auto& c : k.components) {
            if (!(c.weight >= 0.0)) throw std::invalid_argument("gaussian_mixture: negative weight");
            if (c.mean.size() != m) throw std::invalid_argument("gaussian_mixture: mean dimension mismatch");
            detail::check_spd(c.cov, m, "gaussian_mixture");
            total += c.weight;
          }
          if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("gaussian_mixture: weights must sum to 1");
        } else if constexpr (std::is_same_v<K, UniformBoxSpec>) {
          if (k.lo.size() != m || k.hi.size() != m) throw std::invalid_argument("uniform_box: bound dimension mismatch");
          if (!(k.lo.array() < k.hi.array()).all()) throw std::invalid_argument("uniform_box: need lo < hi");
        } else {
          load_empirical(k.path, m);
        }
      },
      spec.kind);
}

/// Reusable sampler for a MeasureSpec; empirical files are read once at construction.
class Sampler {
 public:
  explicit Sampler(const MeasureSpec& spec) : spec_(spec) {
    validate(spec);
    if (auto* g = std::get_if<GaussianSpec>(&spec.kind)) {
      chol_.push_back(detail::chol_factor(g->cov));
    } else if (auto* mix = std::get_if<GaussianMixtureSpec>(&spec.kind)) {
      for (const auto& c : mix->components) chol_.push_back(detail::chol_factor(c.cov));
    } else if (auto* e = std::get_if<EmpiricalSpec>(&spec.kind)) {
      data_ = std::make_shared<ParticleCloud>(load_empirical(e->path, spec.dim));
    }
  }

  int dim() const { return spec_.dim; }

  void draw(Rng& rng, double* out) const {
    const int m = spec_.dim;
    if (auto* g = std::get_if<GaussianSpec>(&spec_.kind)) {
      VectorXd z(m);
      for (int c = 0; c < m; ++c) z(c) = rng.normal();
      VectorXd x = g->mean + chol_[0] * z;
      for (int c = 0; c < m; ++c) out[c] = x(c);
    } else if (auto* mix = std::get_if<GaussianMixtureSpec>(&spec_.kind)) {
      double u = rng.uniform(), acc = 0.0;
      std::size_t pick = mix->components.size() - 1;
      for (std::size_t q = 0; q < mix->components.size(); ++q) {
        acc += mix->components[q].weight;
        if (u < acc) {
          pick = q;
          break;
        }
      }
      VectorXd z(m);
      for (int c = 0; c < m; ++c) z(c) = rng.normal();
      VectorXd x = mix->components[pick].mean + chol_[pick] * z;
      for (int c = 0; c < m; ++c) out[c] = x(c);
    } else if (auto* b = std::get_if<UniformBoxSpec>(&spec_.kind)) {
      for (int c = 0; c < m; ++c) out[c] = b->lo(c) + (b->hi(c) - b->lo(c)) * rng.uniform();
    } else {
      std::size_t i = rng.index(static_cast<std::size_t>(data_->size()));
      for (int c = 0; c < m; ++c) out[c] = data_->points()(static_cast<Eigen::Index>(i), c);
    }
  }

  Points draw(Rng& rng, int n) const {
    Points p(n, spec_.dim);
    for (int i = 0; i < n; ++i) draw(rng, p.row(i).data());
    return p;
  }

 private:
  MeasureSpec spec_;
  std::vector<MatrixXd> chol_;
  std::shared_ptr<const ParticleCloud> data_;
};

/// n i.i.d. draws; deterministic in seed. Empirical kind samples rows with replacement.
inline ParticleCloud sample(const MeasureSpec& spec, int n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
  Sampler s(spec);
  Rng rng(seed, "sample");
  return ParticleCloud(s.draw(rng, n));
}

/// Mean and covariance of a measure spec (empirical: of the file rows).
inline std::pair<VectorXd, MatrixXd> spec_moments(const MeasureSpec& spec) {
  const int m = spec.dim;
  if (auto* g = std::get_if<GaussianSpec>(&spec.kind)) return {g->mean, g->cov};
  if (auto* mix = std::get_if<GaussianMixtureSpec>(&spec.kind)) {
    VectorXd mu = VectorXd::Zero(m);
    for (const auto& c : mix->components) mu += c.weight * c.mean;
    MatrixXd cov = MatrixXd::Zero(m, m);
    for (const auto& c : mix->components) cov += c.weight * (c.cov + (c.mean - mu) * (c.mean - mu).transpose());
    return {mu, cov};
  }
  if (auto* b = std::get_if<UniformBoxSpec>(&spec.kind)) {
    VectorXd w = b->hi - b->lo;
    return {(b->lo + b->hi) / 2.0, MatrixXd((w.array().square() / 12.0).matrix().asDiagonal())};
  }
  ParticleCloud c = load_empirical(std::get<EmpiricalSpec>(spec.kind).path, m);
  VectorXd mu = c.mean();
  Points centered = c.points().rowwise() - mu.transpose();
  return {mu, MatrixXd(centered.transpose() * centered) / static_cast<double>(c.size())};
}

/// Exponent tuples of all monomials in m variables with total degree in [lo, hi], graded order.
inline std::vector<std::vector<int>> monomial_exponents(int m, int lo, int hi) {
  std::vector<std::vector<int>> out;
  for (int deg = lo; deg <= hi; ++deg) {
    // enumerate compositions of deg into m parts, first coordinate varying slowest (descending)
    std::vector<int> cur(m, 0);
    auto rec = [&](auto&& self, int pos, int left) -> void {
      if (pos == m - 1) {
        cur[pos] = left;
        out.push_back(cur);
        return;
      }
      for (int v = left; v >= 0; --v) {
        cur[pos] = v;
        self(self, pos + 1, left - v);
      }
    };
    rec(rec, 0, deg);
  }
  return out;
}

inline double monomial(const double* x, const std::vector<int>& e) {
  double v = 1.0;
  for (std::size_t c = 0; c < e.size(); ++c)
    for (int r = 0; r < e[c]; ++r) v *= x[c];
  return v;
}

/// Averages of all monomials of total degree 1..d, in the order of monomial_exponents(m, 1, d).
inline std::vector<double> empirical_moments(const ParticleCloud& a, int degree) {
  if (degree < 1) throw std::invalid_argument("empirical_moments: degree must be >= 1");
  auto exps = monomial_exponents(a.dim(), 1, degree);
  std::vector<double> out(exps.size(), 0.0);
  for (int i = 0; i < a.size(); ++i)
    for (std::size_t q = 0; q < exps.size(); ++q) out[q] += monomial(a.points().row(i).data(), exps[q]);
  for (double& v : out) v /= static_cast<double>(a.size());
  return out;
}

}  // namespace mfsb

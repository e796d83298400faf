#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "mfsb/measures.hpp"
#include "mfsb/penalty.hpp"
#include "mfsb/wasserstein.hpp"

namespace mfsb {

class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- grid Sinkhorn bridge ----

/// Discrete Schroedinger bridge of Brownian motion with diffusion sigma on a 1-D grid.
struct GridBridge {
  std::vector<double> nodes;                   // G grid points
  double horizon = 1.0;
  double sigma = 1.0;
  int steps = 0;                               // M
  std::vector<std::vector<double>> marginals;  // M+1 rows of G weights
  std::vector<double> log_u, log_v;            // entropic potentials at t = 0 and t = T
  double value = 0.0;                          // sigma^2 KL(bridge | mu_in-started reference), the control cost
  std::vector<double> dual_trace;              // dual objective after each Sinkhorn sweep
  std::vector<double> marginal_error_trace;    // L1 error of the t = 0 marginal after each sweep
  int iterations = 0;
  std::vector<double> mu_in, mu_fin;           // discretized endpoint laws

  int size() const { return static_cast<int>(nodes.size()); }
  double time(int j) const { return j == steps ? horizon : horizon * j / steps; }

  double marginal_mean(int j) const {
    double s = 0.0;
    for (int g = 0; g < size(); ++g) s += marginals[static_cast<std::size_t>(j)][static_cast<std::size_t>(g)] * nodes[static_cast<std::size_t>(g)];
    return s;
  }

  /// W_p between node j's marginal and an equally weighted 1-D cloud.
  double wasserstein_to(int j, const ParticleCloud& cloud, int p = 2) const {
    if (cloud.dim() != 1) throw std::invalid_argument("grid bridge: comparison cloud must be 1-D");
    std::vector<double> xs(static_cast<std::size_t>(cloud.size())), ws(xs.size(), 1.0);
    for (int i = 0; i < cloud.size(); ++i) xs[static_cast<std::size_t>(i)] = cloud.points()(i, 0);
    return wasserstein_1d_weighted(p, xs, ws, nodes, marginals[static_cast<std::size_t>(j)]);
  }
};

struct GridBridgeOptions {
  int grid_points = 401;
  int steps = 50;
  double sinkhorn_tol = 1e-11;
  int max_iterations = 100000;
  double width_sds = 7.0;  // grid half-width beyond the outermost mean, in standard deviations
};

namespace detail {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

// mass of the cell [lo, hi) under a 1-D measure
inline double cell_mass(const MeasureSpec& mu, double lo, double hi) {
  auto gauss = [lo, hi](double m, double var) {
    const double s = std::sqrt(var);
    return normal_cdf((hi - m) / s) - normal_cdf((lo - m) / s);
  };
  if (auto* g = std::get_if<GaussianSpec>(&mu.kind)) return gauss(g->mean(0), g->cov(0, 0));
  if (auto* mix = std::get_if<GaussianMixtureSpec>(&mu.kind)) {
    double s = 0.0;
    for (const auto& c : mix->components) s += c.weight * gauss(c.mean(0), c.cov(0, 0));
    return s;
  }
  const auto& b = std::get<UniformBoxSpec>(mu.kind);
  const double a = std::max(lo, b.lo(0)), z = std::min(hi, b.hi(0));
  return z > a ? (z - a) / (b.hi(0) - b.lo(0)) : 0.0;
}

/// Cell masses of mu around each node (empirical measures: nearest-node counts), normalized.
inline std::vector<double> discretize(const MeasureSpec& mu, const std::vector<double>& nodes) {
  const std::size_t G = nodes.size();
  const double h = nodes[1] - nodes[0];
  std::vector<double> w(G, 0.0);
  if (auto* e = std::get_if<EmpiricalSpec>(&mu.kind)) {
    ParticleCloud c = load_empirical(e->path, 1);
    for (int i = 0; i < c.size(); ++i) {
      const double pos = (c.points()(i, 0) - nodes[0]) / h;
      const auto g = static_cast<std::size_t>(std::clamp(std::lround(pos), 0L, static_cast<long>(G) - 1));
      w[g] += 1.0;
    }
  } else {
    for (std::size_t g = 0; g < G; ++g) {
      // the end cells take the tails
      const double lo = g == 0 ? -std::numeric_limits<double>::infinity() : nodes[g] - h / 2;
      const double hi = g + 1 == G ? std::numeric_limits<double>::infinity() : nodes[g] + h / 2;
      w[g] = cell_mass(mu, lo, hi);
    }
  }
  double total = 0.0;
  for (double v : w) total += v;
  if (!(total > 0.0)) throw OracleError("grid bridge: measure has no mass on the grid");
  for (double& v : w) v /= total;
  return w;
}

// row-normalized Gaussian transition over one step, variance sigma^2 dt
inline MatrixXd heat_step(const std::vector<double>& nodes, double var) {
  const auto G = static_cast<Eigen::Index>(nodes.size());
  MatrixXd P(G, G);
  for (Eigen::Index a = 0; a < G; ++a) {
    for (Eigen::Index b = 0; b < G; ++b) {
      const double d = nodes[static_cast<std::size_t>(b)] - nodes[static_cast<std::size_t>(a)];
      P(a, b) = std::exp(-0.5 * d * d / var);
    }
    P.row(a) /= P.row(a).sum();
  }
  return P;
}

inline MatrixXd matrix_power(MatrixXd P, int e) {
  MatrixXd R = MatrixXd::Identity(P.rows(), P.cols());
  while (e > 0) {
    if (e & 1) R = R * P;
    e >>= 1;
    if (e > 0) P = P * P;
  }
  return R;
}

inline double xlogy_ratio(double p, double q) { return p > 0.0 ? p * std::log(p / q) : 0.0; }

}  // namespace detail

/// Static entropic problem for the Gaussian heat kernel over [0, T] on a uniform grid, solved by
/// Sinkhorn sweeps; the intermediate marginals follow from the Markov (h-transform) interpolation
/// with the one-step kernel. The step kernel is row-normalized, so the discrete reference is a
/// Markov chain on the grid and P_T is its M-th power.
inline GridBridge grid_sinkhorn_bridge(const MeasureSpec& mu_in, const MeasureSpec& mu_fin, double T, double sigma,
                                       const GridBridgeOptions& opts = {}) {
  if (mu_in.dim != 1 || mu_fin.dim != 1) throw std::invalid_argument("grid bridge: one-dimensional measures only");
  if (!(T > 0.0) || !(sigma > 0.0)) throw std::invalid_argument("grid bridge: T and sigma must be > 0");
  if (opts.grid_points < 3 || opts.steps < 1) throw std::invalid_argument("grid bridge: need G >= 3 and M >= 1");
  const auto [m0, c0] = spec_moments(mu_in);
  const auto [m1, c1] = spec_moments(mu_fin);
  const double s0 = std::sqrt(c0(0, 0)), s1 = std::sqrt(c1(0, 0));
  const double lo = std::min(m0(0) - opts.width_sds * s0, m1(0) - opts.width_sds * s1);
  const double hi = std::max(m0(0) + opts.width_sds * s0, m1(0) + opts.width_sds * s1);
  if (!(hi > lo)) throw std::invalid_argument("grid bridge: degenerate measures");

  GridBridge br;
  br.horizon = T;
  br.sigma = sigma;
  br.steps = opts.steps;
  const int G = opts.grid_points;
  for (int g = 0; g < G; ++g) br.nodes.push_back(lo + (hi - lo) * g / (G - 1));
  br.mu_in = detail::discretize(mu_in, br.nodes);
  br.mu_fin = detail::discretize(mu_fin, br.nodes);

  const double dt = T / opts.steps;
  const MatrixXd P1 = detail::heat_step(br.nodes, sigma * sigma * dt);
  const MatrixXd K = detail::matrix_power(P1, opts.steps);
  const VectorXd p0 = Eigen::Map<const VectorXd>(br.mu_in.data(), G);
  const VectorXd pT = Eigen::Map<const VectorXd>(br.mu_fin.data(), G);

  // pi = diag(u) K diag(v); dual objective <p0, log u> + <pT, log v> - u'Kv + 1 rises every sweep
  VectorXd u = VectorXd::Ones(G), v = VectorXd::Ones(G);
  auto safe_log = [](double x) { return x > 0.0 ? std::log(x) : 0.0; };
  bool done = false;
  for (int it = 1; it <= opts.max_iterations; ++it) {
    VectorXd Kv = K * v;
    for (int g = 0; g < G; ++g) u(g) = p0(g) > 0.0 ? p0(g) / Kv(g) : 0.0;
    VectorXd Ku = K.transpose() * u;
    for (int g = 0; g < G; ++g) v(g) = pT(g) > 0.0 ? pT(g) / Ku(g) : 0.0;
    if (!u.allFinite() || !v.allFinite()) throw OracleError("grid bridge: Sinkhorn scalings overflowed (grid too coarse or sigma too small)");
    Kv = K * v;
    double err = 0.0, dual = 1.0;
    for (int g = 0; g < G; ++g) {
      err += std::abs(u(g) * Kv(g) - p0(g));
      dual += p0(g) * safe_log(u(g)) + pT(g) * safe_log(v(g));
    }
    dual -= u.dot(Kv);
    br.dual_trace.push_back(dual);
    br.marginal_error_trace.push_back(err);
    br.iterations = it;
    if (err < opts.sinkhorn_tol) {
      done = true;
      break;
    }
  }
  if (!done)
    throw OracleError("grid bridge: Sinkhorn did not reach tolerance in " + std::to_string(opts.max_iterations) +
                      " sweeps (grid too coarse or sigma too small)");

  for (int g = 0; g < G; ++g) {
    br.log_u.push_back(u(g) > 0.0 ? std::log(u(g)) : -std::numeric_limits<double>::infinity());
    br.log_v.push_back(v(g) > 0.0 ? std::log(v(g)) : -std::numeric_limits<double>::infinity());
  }

  // forward f_j = u' P^j, backward h_j = P^{M-j} v, marginal f_j .* h_j
  const int M = opts.steps;
  std::vector<VectorXd> back(static_cast<std::size_t>(M + 1));
  back[static_cast<std::size_t>(M)] = v;
  for (int j = M - 1; j >= 0; --j) back[static_cast<std::size_t>(j)] = P1 * back[static_cast<std::size_t>(j + 1)];
  Eigen::RowVectorXd fwd = u.transpose();
  for (int j = 0; j <= M; ++j) {
    if (j > 0) fwd = fwd * P1;
    std::vector<double> rho(static_cast<std::size_t>(G));
    double total = 0.0;
    for (int g = 0; g < G; ++g) total += rho[static_cast<std::size_t>(g)] = fwd(g) * back[static_cast<std::size_t>(j)](g);
    for (double& r : rho) r /= total;
    br.marginals.push_back(std::move(rho));
  }

  // KL(pi | diag(p0) K) with pi_ab = u_a K_ab v_b
  double kl = 0.0;
  for (int a = 0; a < G; ++a) {
    if (!(p0(a) > 0.0)) continue;
    for (int b = 0; b < G; ++b) {
      const double pi = u(a) * K(a, b) * v(b);
      if (pi > 0.0) kl += pi * std::log(u(a) * v(b) / p0(a));
    }
  }
  br.value = sigma * sigma * kl;
  return br;
}

/// Cross-check of the bridge value along the lattice: a backward soft Bellman recursion gives the
/// optimal one-step kernels Q_j(x, .) proportional to P(x, .) exp(-W_{j+1}), a forward pass carries
/// the marginals, and the value is sigma^2 times the summed one-step relative entropies.
inline double grid_bridge_dp_value(const GridBridge& br) {
  const int G = br.size(), M = br.steps;
  const double dt = br.horizon / M;
  const MatrixXd P1 = detail::heat_step(br.nodes, br.sigma * br.sigma * dt);
  // W_M = -log v; W_j(x) = -log sum_y P(x, y) exp(-W_{j+1}(y))
  std::vector<VectorXd> W(static_cast<std::size_t>(M + 1), VectorXd(G));
  for (int g = 0; g < G; ++g) W[static_cast<std::size_t>(M)](g) = -br.log_v[static_cast<std::size_t>(g)];
  for (int j = M - 1; j >= 0; --j) {
    const VectorXd& next = W[static_cast<std::size_t>(j + 1)];
    double shift = std::numeric_limits<double>::infinity();
    for (int g = 0; g < G; ++g) shift = std::min(shift, next(g));
    for (int a = 0; a < G; ++a) {
      double s = 0.0;
      for (int b = 0; b < G; ++b)
        if (std::isfinite(next(b))) s += P1(a, b) * std::exp(-(next(b) - shift));
      W[static_cast<std::size_t>(j)](a) = shift - std::log(s);
    }
  }
  VectorXd rho = Eigen::Map<const VectorXd>(br.mu_in.data(), G);
  double total = 0.0;
  for (int j = 0; j < M; ++j) {
    const VectorXd& next = W[static_cast<std::size_t>(j + 1)];
    const VectorXd& here = W[static_cast<std::size_t>(j)];
    VectorXd out = VectorXd::Zero(G);
    for (int a = 0; a < G; ++a) {
      if (!(rho(a) > 0.0)) continue;
      double kl = 0.0;
      for (int b = 0; b < G; ++b) {
        if (!std::isfinite(next(b))) continue;
        const double q = P1(a, b) * std::exp(here(a) - next(b));
        kl += detail::xlogy_ratio(q, P1(a, b));
        out(b) += rho(a) * q;
      }
      total += rho(a) * kl;
    }
    rho = out;
  }
  return br.sigma * br.sigma * total;
}

// ---- mean-steer shooting ----

struct MeanSteerResult {
  double value = 0.0;           // running cost of the mean plus k (m_T - target)^2
  double running = 0.0;
  double terminal_mean = 0.0;
  std::vector<double> control;  // control of the mean at the M+1 nodes
  int shooting_iterations = 0;
};

/// Deterministic mean dynamics m' = a, cost int a^2/2 + k (m_T - target)^2, solved as a two-point
/// boundary problem for (m, p), m' = -p, p' = 0, p_T = 2k (m_T - target), by secant shooting on
/// p_0 with RK4 integration. The variance enters only through the unpenalized diffusion.
inline MeanSteerResult mean_steer_shooting(double initial_mean, double initial_var, double target_mean, double k, double T,
                                           int steps = 100) {
  if (!(initial_var >= 0.0)) throw std::invalid_argument("mean steer: variance must be >= 0");
  if (!(k >= 0.0) || !(T > 0.0) || steps < 1) throw std::invalid_argument("mean steer: need k >= 0, T > 0, M >= 1");
  const double dt = T / steps;
  auto integrate = [&](double p0, std::vector<double>* ctrl) {
    double m = initial_mean, p = p0;
    if (ctrl) ctrl->assign(1, -p);
    for (int j = 0; j < steps; ++j) {
      // RK4 on (m, p); p' = 0 makes the stages equal but the scheme is kept general
      const double k1m = -p, k1p = 0.0;
      const double k2m = -(p + 0.5 * dt * k1p), k2p = 0.0;
      const double k3m = -(p + 0.5 * dt * k2p), k3p = 0.0;
      const double k4m = -(p + dt * k3p), k4p = 0.0;
      m += dt / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m);
      p += dt / 6.0 * (k1p + 2 * k2p + 2 * k3p + k4p);
      if (ctrl) ctrl->push_back(-p);
    }
    return std::pair{m, p};
  };
  auto mismatch = [&](double p0) {
    auto [mT, pT] = integrate(p0, nullptr);
    return pT - 2.0 * k * (mT - target_mean);
  };
  MeanSteerResult res;
  double a = 0.0, b = -2.0 * k * (target_mean - initial_mean);
  if (b == a) b = 1.0;
  double fa = mismatch(a), fb = mismatch(b);
  for (int it = 0; it < 50 && std::abs(fb) > 1e-14 * (1.0 + std::abs(b)); ++it) {
    if (fb == fa) break;  // at roundoff level; the check below decides
    const double c = b - fb * (b - a) / (fb - fa);
    a = b;
    fa = fb;
    b = c;
    fb = mismatch(b);
    res.shooting_iterations = it + 1;
  }
  if (!(std::abs(fb) <= 1e-10 * (1.0 + std::abs(b)))) throw OracleError("mean steer: shooting did not converge");
  auto [mT, pT] = integrate(b, &res.control);
  (void)pT;
  res.terminal_mean = mT;
  for (int j = 0; j < steps; ++j) res.running += 0.5 * res.control[static_cast<std::size_t>(j)] * res.control[static_cast<std::size_t>(j)] * dt;
  res.value = res.running + k * (mT - target_mean) * (mT - target_mean);
  return res;
}

/// min over constant c of T c^2/2 + k (c T - delta)^2, attained at c = 2 k delta / (1 + 2 k T).
inline double mean_steer_closed_form(double delta, double k, double T) {
  const double c = 2.0 * k * delta / (1.0 + 2.0 * k * T);
  return 0.5 * T * c * c + k * (c * T - delta) * (c * T - delta);
}

// ---- finite differences ----

using ScalarField = std::function<double(const VectorXd&)>;
using GradientField = std::function<VectorXd(const VectorXd&)>;

/// Max over probes of |grad - central difference|_inf / |central difference|_inf.
inline double finite_diff_check(const ScalarField& f, const GradientField& grad, const std::vector<VectorXd>& probes,
                                double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite differences: h must be > 0");
  double worst = 0.0;
  for (const VectorXd& x : probes) {
    const VectorXd g = grad(x);
    VectorXd fd(x.size());
    for (Eigen::Index c = 0; c < x.size(); ++c) {
      VectorXd up = x, dn = x;
      up(c) += h;
      dn(c) -= h;
      fd(c) = (f(up) - f(dn)) / (2.0 * h);
    }
    const double err = (g - fd).lpNorm<Eigen::Infinity>();
    const double scale = fd.lpNorm<Eigen::Infinity>();
    worst = std::max(worst, scale > 0.0 ? err / scale : err);
  }
  return worst;
}

/// L-derivative against the lift X -> g(empirical(X)): d/dx_i of the lift is dmu g(mu_n)(x_i) / n.
/// Max error over the given particle indices, relative once the gradient exceeds 1 (absolute below,
/// where ridges far from the cloud have gradients at roundoff level).
inline double lifted_lderiv_check(const PenaltySpec& p, const ParticleCloud& cloud, const std::vector<int>& indices,
                                  double h = 1e-5) {
  if (!(h > 0.0)) throw std::invalid_argument("finite differences: h must be > 0");
  const double n = static_cast<double>(cloud.size());
  double worst = 0.0;
  Points X = cloud.points();
  for (int i : indices) {
    if (i < 0 || i >= cloud.size()) throw std::invalid_argument("lifted check: particle index out of range");
    const VectorXd an = penalty_lderiv(p, cloud, cloud.point(i));
    VectorXd fd(cloud.dim());
    for (int c = 0; c < cloud.dim(); ++c) {
      const double keep = X(i, c);
      X(i, c) = keep + h;
      const double up = penalty_value(p, X);
      X(i, c) = keep - h;
      const double dn = penalty_value(p, X);
      X(i, c) = keep;
      fd(c) = n * (up - dn) / (2.0 * h);
    }
    const double err = (an - fd).lpNorm<Eigen::Infinity>();
    const double scale = std::max({an.lpNorm<Eigen::Infinity>(), fd.lpNorm<Eigen::Infinity>(), 1.0});
    worst = std::max(worst, err / scale);
  }
  return worst;
}

}  // namespace mfsb

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "mfsb/measures.hpp"

namespace mfsb {

/// Minimum-cost perfect matching on a dense square cost matrix (Hungarian method, O(n^3)).
/// Returns assignment[row] = column.
inline std::vector<int> solve_assignment(const MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != n) throw std::invalid_argument("solve_assignment: cost matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> assign(n, -1);
  for (int j = 1; j <= n; ++j) assign[p[j] - 1] = j - 1;
  return assign;
}

enum class WassersteinMode { sorted_1d, assignment, sliced };

inline const char* to_string(WassersteinMode m) {
  switch (m) {
    case WassersteinMode::sorted_1d: return "sorted_1d";
    case WassersteinMode::assignment: return "assignment";
    case WassersteinMode::sliced: return "sliced";
  }
  return "?";
}

struct WassersteinOptions {
  int exact_threshold = 512;
  int projections = 64;
  std::uint64_t seed = 0x5eed;
};

struct WassersteinResult {
  double value = 0.0;
  WassersteinMode mode = WassersteinMode::sorted_1d;
};

namespace detail {

inline double powp(double x, int p) { return p == 1 ? x : x * x; }
inline double rootp(double x, int p) { return p == 1 ? x : std::sqrt(std::max(x, 0.0)); }

/// W_p^p between two weighted 1-D measures given sorted supports and weights summing to 1.
inline double wpp_1d_sorted(const std::vector<double>& xa, const std::vector<double>& wa, const std::vector<double>& xb,
                            const std::vector<double>& wb, int p) {
  std::size_t i = 0, j = 0;
  double ra = wa.empty() ? 0.0 : wa[0], rb = wb.empty() ? 0.0 : wb[0], total = 0.0;
  while (i < xa.size() && j < xb.size()) {
    const double mass = std::min(ra, rb);
    total += mass * powp(std::abs(xa[i] - xb[j]), p);
    ra -= mass;
    rb -= mass;
    if (ra <= 0.0) {
      if (++i < xa.size()) ra = wa[i];
    }
    if (rb <= 0.0) {
      if (++j < xb.size()) rb = wb[j];
    }
  }
  return total;
}

/// Uniform-weight 1-D W_p^p for arbitrary sizes (quantile coupling).
inline double wpp_1d(std::vector<double> a, std::vector<double> b, int p) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += powp(std::abs(a[i] - b[i]), p);
    return s / static_cast<double>(a.size());
  }
  // exact rational bookkeeping: masses in units of 1/(na*nb)
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double ra = nb, rb = na, total = 0.0;
  while (i < a.size() && j < b.size()) {
    const double mass = std::min(ra, rb);
    total += mass * powp(std::abs(a[i] - b[j]), p);
    ra -= mass;
    rb -= mass;
    if (ra == 0.0) {
      ++i;
      ra = nb;
    }
    if (rb == 0.0) {
      ++j;
      rb = na;
    }
  }
  return total / (na * nb);
}

inline Points subsample_rows(const Points& x, int n, std::uint64_t seed) {
  std::vector<int> idx(static_cast<std::size_t>(x.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed, "w-subsample", static_cast<std::uint64_t>(x.rows()));
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  Points out(n, x.cols());
  for (int i = 0; i < n; ++i) out.row(i) = x.row(idx[static_cast<std::size_t>(i)]);
  return out;
}

inline double wpp_assignment(const Points& a, const Points& b, int p) {
  const Eigen::Index n = a.rows();
  MatrixXd cost(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) cost(i, j) = powp((a.row(i) - b.row(j)).norm(), p);
  auto assign = solve_assignment(cost);
  double s = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) s += cost(i, assign[static_cast<std::size_t>(i)]);
  return s / static_cast<double>(n);
}

inline double wpp_sliced(const Points& a, const Points& b, int p, int projections, std::uint64_t seed) {
  const Eigen::Index m = a.cols();
  Rng rng(seed, "w-sliced");
  double acc = 0.0;
  std::vector<double> pa(static_cast<std::size_t>(a.rows())), pb(static_cast<std::size_t>(b.rows()));
  for (int k = 0; k < projections; ++k) {
    VectorXd u(m);
    do {
      for (Eigen::Index c = 0; c < m; ++c) u(c) = rng.normal();
    } while (u.norm() == 0.0);
    u /= u.norm();
    for (Eigen::Index i = 0; i < a.rows(); ++i) pa[static_cast<std::size_t>(i)] = a.row(i).dot(u);
    for (Eigen::Index i = 0; i < b.rows(); ++i) pb[static_cast<std::size_t>(i)] = b.row(i).dot(u);
    acc += wpp_1d(pa, pb, p);
  }
  return acc / projections;
}

inline std::vector<double> column(const Points& x, Eigen::Index c) {
  std::vector<double> v(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i) v[static_cast<std::size_t>(i)] = x(i, c);
  return v;
}

}  // namespace detail

/// W_p between uniformly weighted point sets. 1-D is always exact (any sizes).
/// In m > 1 the larger set is subsampled to the smaller size, then solved exactly by
/// assignment up to opts.exact_threshold points and by sliced W_p above it.
inline WassersteinResult wasserstein_detailed(int p, const Points& a, const Points& b,
                                              const WassersteinOptions& opts = {}) {
  if (p != 1 && p != 2) throw std::invalid_argument("wasserstein: p must be 1 or 2");
  if (a.cols() != b.cols()) throw std::invalid_argument("wasserstein: dimension mismatch");
  if (a.rows() < 1 || b.rows() < 1) throw std::invalid_argument("wasserstein: empty cloud");
  if (a.cols() == 1)
    return {detail::rootp(detail::wpp_1d(detail::column(a, 0), detail::column(b, 0), p), p),
            WassersteinMode::sorted_1d};
  const Points* pa = &a;
  const Points* pb = &b;
  Points sub;
  if (a.rows() > b.rows()) {
    sub = detail::subsample_rows(a, static_cast<int>(b.rows()), opts.seed);
    pa = &sub;
  } else if (b.rows() > a.rows()) {
    sub = detail::subsample_rows(b, static_cast<int>(a.rows()), opts.seed);
    pb = &sub;
  }
  if (pa->rows() <= opts.exact_threshold)
    return {detail::rootp(detail::wpp_assignment(*pa, *pb, p), p), WassersteinMode::assignment};
  return {detail::rootp(detail::wpp_sliced(*pa, *pb, p, opts.projections, opts.seed), p), WassersteinMode::sliced};
}

inline double wasserstein(int p, const ParticleCloud& a, const ParticleCloud& b, const WassersteinOptions& opts = {}) {
  return wasserstein_detailed(p, a.points(), b.points(), opts).value;
}

/// W_p between two weighted 1-D measures (weights normalized internally, zero weights allowed).
inline double wasserstein_1d_weighted(int p, const std::vector<double>& xa, const std::vector<double>& wa,
                                      const std::vector<double>& xb, const std::vector<double>& wb) {
  if (xa.size() != wa.size() || xb.size() != wb.size()) throw std::invalid_argument("wasserstein_1d_weighted: size mismatch");
  auto prep = [](const std::vector<double>& x, const std::vector<double>& w, std::vector<double>& xs,
                 std::vector<double>& ws) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t l, std::size_t r) { return x[l] < x[r]; });
    double total = 0.0;
    for (double v : w) total += v;
    if (!(total > 0.0)) throw std::invalid_argument("wasserstein_1d_weighted: zero total weight");
    for (std::size_t i : idx) {
      if (w[i] <= 0.0) continue;
      xs.push_back(x[i]);
      ws.push_back(w[i] / total);
    }
  };
  std::vector<double> xs, ws, ys, vs;
  prep(xa, wa, xs, ws);
  prep(xb, wb, ys, vs);
  return detail::rootp(detail::wpp_1d_sorted(xs, ws, ys, vs, p), p);
}

}  // namespace mfsb

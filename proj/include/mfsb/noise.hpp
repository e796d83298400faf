#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "mfsb/measures.hpp"

namespace mfsb {

struct TimeGrid {
  double horizon = 1.0;
  int steps = 50;

  TimeGrid() = default;
  TimeGrid(double T, int M) : horizon(T), steps(M) {
    if (!(T > 0.0)) throw std::invalid_argument("time grid: horizon must be > 0");
    if (M < 2) throw std::invalid_argument("time grid: need at least 2 steps");
  }
  double dt() const { return horizon / steps; }
  double node(int j) const { return j == steps ? horizon : horizon * j / steps; }
};

/// Initial draws from mu_in and Brownian increments N(0, dt I), one independent stream per row,
/// so a bank is reproducible from (seed, n, M, d) and its rows do not depend on n.
class NoiseBank {
 public:
  NoiseBank() = default;

  NoiseBank(const MeasureSpec& mu_in, int n, const TimeGrid& grid, int noise_dim, std::uint64_t seed)
      : seed_(seed), generated_(true) {
    if (n < 1) throw std::invalid_argument("noise bank: need at least one row");
    Sampler sampler(mu_in);
    const int M = grid.steps;
    const double sdt = std::sqrt(grid.dt());
    initial_.resize(n, mu_in.dim);
    incr_.assign(static_cast<std::size_t>(M), Points(n, noise_dim));
    for (int i = 0; i < n; ++i) {
      Rng r0(seed, "initial", static_cast<std::uint64_t>(i));
      sampler.draw(r0, initial_.row(i).data());
      Rng rw(seed, "increments", static_cast<std::uint64_t>(i));
      for (int j = 0; j < M; ++j)
        for (int c = 0; c < noise_dim; ++c) incr_[static_cast<std::size_t>(j)](i, c) = sdt * rw.normal();
    }
    id_ = splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(n) * 0x100000001b3ULL +
                                       static_cast<std::uint64_t>(M) * 131 + static_cast<std::uint64_t>(noise_dim)));
  }

  NoiseBank(Points initial, std::vector<Points> increments) : initial_(std::move(initial)), incr_(std::move(increments)) {
    if (incr_.empty()) throw std::invalid_argument("noise bank: no increments");
    for (const auto& w : incr_)
      if (w.rows() != initial_.rows()) throw std::invalid_argument("noise bank: row count mismatch");
    id_ = content_hash();
  }

  int particles() const { return static_cast<int>(initial_.rows()); }
  int steps() const { return static_cast<int>(incr_.size()); }
  int noise_dim() const { return incr_.empty() ? 0 : static_cast<int>(incr_[0].cols()); }
  int dim() const { return static_cast<int>(initial_.cols()); }
  const Points& initial() const { return initial_; }
  const Points& increments(int j) const { return incr_[static_cast<std::size_t>(j)]; }
  std::uint64_t id() const { return id_; }
  std::uint64_t seed() const { return seed_; }
  bool generated() const { return generated_; }

  /// Row i of the result is row idx[i] of this bank.
  NoiseBank select(const std::vector<int>& idx) const {
    Points x0(static_cast<Eigen::Index>(idx.size()), initial_.cols());
    std::vector<Points> w(incr_.size(), Points(static_cast<Eigen::Index>(idx.size()), noise_dim()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      x0.row(static_cast<Eigen::Index>(i)) = initial_.row(idx[i]);
      for (std::size_t j = 0; j < incr_.size(); ++j) w[j].row(static_cast<Eigen::Index>(i)) = incr_[j].row(idx[i]);
    }
    return NoiseBank(std::move(x0), std::move(w));
  }

  /// Lexicographic order of rows by (initial point, increments); ties keep index order.
  std::vector<int> canonical_order() const {
    std::vector<int> idx(static_cast<std::size_t>(particles()));
    for (int i = 0; i < particles(); ++i) idx[static_cast<std::size_t>(i)] = i;
    auto less = [this](int a, int b) {
      for (Eigen::Index c = 0; c < initial_.cols(); ++c)
        if (initial_(a, c) != initial_(b, c)) return initial_(a, c) < initial_(b, c);
      for (const auto& w : incr_)
        for (Eigen::Index c = 0; c < w.cols(); ++c)
          if (w(a, c) != w(b, c)) return w(a, c) < w(b, c);
      return false;
    };
    std::stable_sort(idx.begin(), idx.end(), less);
    return idx;
  }

 private:
  std::uint64_t content_hash() const {
    std::uint64_t h = 0x6a09e667f3bcc908ULL;
    auto mix = [&h](const Points& p) {
      for (Eigen::Index i = 0; i < p.size(); ++i) {
        std::uint64_t bits;
        double v = p.data()[i];
        std::memcpy(&bits, &v, sizeof bits);
        h = splitmix64(h ^ bits);
      }
    };
    mix(initial_);
    for (const auto& w : incr_) mix(w);
    return h;
  }

  Points initial_;
  std::vector<Points> incr_;
  std::uint64_t id_ = 0;
  std::uint64_t seed_ = 0;
  bool generated_ = false;
};

}  // namespace mfsb

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "mfsb/io.hpp"
#include "mfsb/mkv_solver.hpp"

namespace mfsb {

/// Minimal SVG line chart: polylines with markers, linear or log10 axes, a legend and free text.
class SvgChart {
 public:
  struct Series {
    std::string label;
    std::vector<double> x, y;
    std::string color;
    bool markers = true;
    bool dashed = false;
  };

  SvgChart(std::string title, std::string xlabel, std::string ylabel, bool logx = false, bool logy = false)
      : title_(std::move(title)), xlabel_(std::move(xlabel)), ylabel_(std::move(ylabel)), logx_(logx), logy_(logy) {}

  void add(Series s) {
    if (s.color.empty()) s.color = kPalette[series_.size() % 6];
    series_.push_back(std::move(s));
  }
  void note(std::string text) { notes_.push_back(std::move(text)); }

  std::string str() const {
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    for (const auto& s : series_)
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        if (!usable(s.x[i], logx_) || !usable(s.y[i], logy_)) continue;
        x0 = std::min(x0, tx(s.x[i]));
        x1 = std::max(x1, tx(s.x[i]));
        y0 = std::min(y0, ty(s.y[i]));
        y1 = std::max(y1, ty(s.y[i]));
      }
    if (!(x0 <= x1)) x0 = 0, x1 = 1;
    if (!(y0 <= y1)) y0 = 0, y1 = 1;
    if (x1 - x0 < 1e-12) x0 -= 0.5, x1 += 0.5;
    if (y1 - y0 < 1e-12) y0 -= 0.5, y1 += 0.5;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    auto px = [&](double v) { return kLeft + (v - x0) / (x1 - x0) * (kW - kLeft - kRight); };
    auto py = [&](double v) { return kH - kBottom - (v - y0) / (y1 - y0) * (kH - kTop - kBottom); };

    std::ostringstream o;
    o.precision(6);
    o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    o << "<text x=\"" << kW / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << esc(title_) << "</text>\n";
    o << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << kW - kLeft - kRight << "\" height=\""
      << kH - kTop - kBottom << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 4; ++t) {
      const double fx = x0 + (x1 - x0) * t / 4.0, fy = y0 + (y1 - y0) * t / 4.0;
      o << "<text x=\"" << px(fx) << "\" y=\"" << kH - kBottom + 16 << "\" text-anchor=\"middle\">" << tick(fx, logx_) << "</text>\n";
      o << "<text x=\"" << kLeft - 6 << "\" y=\"" << py(fy) + 4 << "\" text-anchor=\"end\">" << tick(fy, logy_) << "</text>\n";
    }
    o << "<text x=\"" << (kW + kLeft - kRight) / 2 << "\" y=\"" << kH - 8 << "\" text-anchor=\"middle\">" << esc(xlabel_) << "</text>\n";
    o << "<text x=\"14\" y=\"" << (kH - kBottom + kTop) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
      << (kH - kBottom + kTop) / 2 << ")\">" << esc(ylabel_) << "</text>\n";
    for (std::size_t k = 0; k < series_.size(); ++k) {
      const auto& s = series_[k];
      std::ostringstream pts;
      pts.precision(6);
      for (std::size_t i = 0; i < s.x.size(); ++i)
        if (usable(s.x[i], logx_) && usable(s.y[i], logy_)) pts << px(tx(s.x[i])) << ',' << py(ty(s.y[i])) << ' ';
      o << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\""
        << (s.dashed ? " stroke-dasharray=\"5,3\"" : "") << " points=\"" << pts.str() << "\"/>\n";
      if (s.markers)
        for (std::size_t i = 0; i < s.x.size(); ++i)
          if (usable(s.x[i], logx_) && usable(s.y[i], logy_))
            o << "<circle cx=\"" << px(tx(s.x[i])) << "\" cy=\"" << py(ty(s.y[i])) << "\" r=\"3\" fill=\"" << s.color << "\"/>\n";
      const double ly = kTop + 16 + 16.0 * static_cast<double>(k);
      o << "<line x1=\"" << kW - kRight - 150 << "\" y1=\"" << ly - 4 << "\" x2=\"" << kW - kRight - 130 << "\" y2=\"" << ly - 4
        << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>\n";
      o << "<text x=\"" << kW - kRight - 125 << "\" y=\"" << ly << "\">" << esc(s.label) << "</text>\n";
    }
    for (std::size_t k = 0; k < notes_.size(); ++k)
      o << "<text x=\"" << kLeft + 10 << "\" y=\"" << kTop + 18 + 16.0 * static_cast<double>(k) << "\">" << esc(notes_[k]) << "</text>\n";
    o << "</svg>\n";
    return o.str();
  }

  void write(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path.string() + " for writing");
    f << str();
  }

 private:
  static constexpr int kW = 720, kH = 460, kLeft = 70, kRight = 20, kTop = 34, kBottom = 48;
  static constexpr const char* kPalette[6] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};

  static bool usable(double v, bool log) { return std::isfinite(v) && (!log || v > 0.0); }
  double tx(double v) const { return logx_ ? std::log10(v) : v; }
  double ty(double v) const { return logy_ ? std::log10(v) : v; }
  static std::string tick(double v, bool log) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", log ? std::pow(10.0, v) : v);
    return buf;
  }
  static std::string esc(const std::string& s) {
    std::string out;
    for (char c : s) {
      if (c == '<') out += "&lt;";
      else if (c == '>') out += "&gt;";
      else if (c == '&') out += "&amp;";
      else out += c;
    }
    return out;
  }

  std::string title_, xlabel_, ylabel_;
  bool logx_, logy_;
  std::vector<Series> series_;
  std::vector<std::string> notes_;
};

struct ChartReport {
  std::vector<std::filesystem::path> written;
  std::vector<std::string> warnings;
};

/// Renders the charts that the CSVs in `dir` allow; a missing CSV skips its chart with a warning.
inline ChartReport emit_charts(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  ChartReport rep;
  auto load = [&](const char* name, const char* chart) -> std::optional<Table> {
    if (!fs::exists(dir / name)) {
      rep.warnings.push_back(std::string(chart) + ": skipped, " + name + " not found");
      return std::nullopt;
    }
    try {
      return Table::read(dir / name);
    } catch (const IoError& e) {
      rep.warnings.push_back(std::string(chart) + ": skipped, " + e.what());
      return std::nullopt;
    }
  };

  if (auto t = load("ladder.csv", "value vs k")) {
    SvgChart c("Penalized value along the k ladder", "k", "value", true, false);
    SvgChart::Series v{"value", t->numbers("k"), t->numbers("value")};
    c.add(v);
    const auto oracle = t->numbers("oracle_value");
    if (!oracle.empty() && std::isfinite(oracle.front())) {
      c.add({"grid oracle", v.x, oracle, "", false, true});
    }
    c.write(dir / "value_vs_k.svg");
    rep.written.push_back(dir / "value_vs_k.svg");
  }

  if (auto t = load("chaos.csv", "H2 error vs N")) {
    std::vector<double> N, h2;
    for (std::size_t r = 0; r < t->rows(); ++r)
      if (t->text(r, "status") != "error") {
        N.push_back(t->number(r, "N"));
        h2.push_back(t->number(r, "h2_error"));
      }
    const double slope = loglog_slope(N, h2);
    SvgChart c("Synchronous-coupling error", "N", "H2 error", true, true);
    c.add({"H2 error", N, h2});
    if (N.size() >= 2 && std::isfinite(slope)) {
      // fitted line through the geometric means
      double lx = 0, ly = 0;
      for (std::size_t i = 0; i < N.size(); ++i) lx += std::log(N[i]), ly += std::log(h2[i]);
      lx /= static_cast<double>(N.size());
      ly /= static_cast<double>(N.size());
      std::vector<double> fit;
      for (double n : N) fit.push_back(std::exp(ly + slope * (std::log(n) - lx)));
      c.add({"fit", N, fit, "", false, true});
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "fitted slope %.3f", slope);
    c.note(buf);
    c.write(dir / "chaos_loglog.svg");
    rep.written.push_back(dir / "chaos_loglog.svg");
  }

  if (auto t = load("marginals.csv", "marginal overlays")) {
    std::vector<int> nodes;
    for (double v : t->numbers("node"))
      if (nodes.empty() || nodes.back() != static_cast<int>(v)) nodes.push_back(static_cast<int>(v));
    if (nodes.empty()) {
      rep.warnings.push_back("marginal overlays: skipped, marginals.csv has no rows");
    } else {
      SvgChart c("Particle histograms against grid marginals", "x", "mass per bin");
      static constexpr const char* kOverlayColors[5] = {"#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#d62728"};
      for (int q = 0; q <= 4; ++q) {
        const int node = nodes[static_cast<std::size_t>(q * (nodes.size() - 1) / 4)];
        if (q > 0 && node == nodes[static_cast<std::size_t>((q - 1) * (nodes.size() - 1) / 4)]) continue;
        SvgChart::Series p, g;
        for (std::size_t r = 0; r < t->rows(); ++r)
          if (static_cast<int>(t->number(r, "node")) == node) {
            p.x.push_back(t->number(r, "x"));
            p.y.push_back(t->number(r, "particle_mass"));
            g.y.push_back(t->number(r, "grid_mass"));
          }
        g.x = p.x;
        p.label = "particles, node " + std::to_string(node);
        g.label = "grid, node " + std::to_string(node);
        p.color = g.color = kOverlayColors[q];
        p.markers = false;
        g.markers = false;
        g.dashed = true;
        c.add(p);
        c.add(g);
      }
      c.write(dir / "marginals.svg");
      rep.written.push_back(dir / "marginals.svg");
    }
  }
  return rep;
}

}  // namespace mfsb

#include "dfm/plot.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace dfm::plot {
namespace {

constexpr double kWidth = 640, kHeight = 420, kLeft = 70, kRight = 160, kTop = 40, kBottom = 55;
constexpr std::array<const char*, 8> kPalette{"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                              "#9467bd", "#8c564b", "#e377c2", "#17becf"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Axis {
  double lo = 0.0, hi = 1.0;
  bool log = false;

  double map(double v) const {
    const double a = log ? std::log10(v) : v;
    return (a - lo) / (hi - lo);
  }
  bool usable(double v) const { return std::isfinite(v) && (!log || v > 0.0); }
};

Axis fit_axis(const Chart& c, bool x_axis) {
  Axis ax;
  ax.log = x_axis ? c.log_x : c.log_y;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& s : c.series) {
    const auto& vals = x_axis ? s.x : s.y;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!ax.usable(vals[i]) || !std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      const double v = ax.log ? std::log10(vals[i]) : vals[i];
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  if (!std::isfinite(lo)) lo = 0.0, hi = 1.0;
  if (hi - lo < 1e-12) lo -= 0.5, hi += 0.5;
  const double pad = 0.05 * (hi - lo);
  ax.lo = lo - pad;
  ax.hi = hi + pad;
  return ax;
}

}  // namespace

std::string render_svg(const Chart& chart) {
  const Axis xa = fit_axis(chart, true), ya = fit_axis(chart, false);
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double v) { return kLeft + xa.map(v) * pw; };
  auto py = [&](double v) { return kTop + (1.0 - ya.map(v)) * ph; };

  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
     << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(chart.title)
     << "</text>\n";
  os << "<rect x=\"" << kLeft << "\" y=\"" << kTop << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"#333\"/>\n";

  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0;
    const double xv = xa.lo + f * (xa.hi - xa.lo), yv = ya.lo + f * (ya.hi - ya.lo);
    const double gx = kLeft + f * pw, gy = kTop + (1.0 - f) * ph;
    os << "<line x1=\"" << gx << "\" y1=\"" << kTop + ph << "\" x2=\"" << gx << "\" y2=\"" << kTop + ph + 5
       << "\" stroke=\"#333\"/>\n";
    os << "<text x=\"" << gx << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">"
       << num(xa.log ? std::pow(10.0, xv) : xv) << "</text>\n";
    os << "<line x1=\"" << kLeft - 5 << "\" y1=\"" << gy << "\" x2=\"" << kLeft << "\" y2=\"" << gy
       << "\" stroke=\"#333\"/>\n";
    os << "<text x=\"" << kLeft - 8 << "\" y=\"" << gy + 4 << "\" text-anchor=\"end\">"
       << num(ya.log ? std::pow(10.0, yv) : yv) << "</text>\n";
  }
  os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 12 << "\" text-anchor=\"middle\">"
     << escape(chart.x_label) << (chart.log_x ? " (log)" : "") << "</text>\n";
  os << "<text transform=\"translate(16," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
     << escape(chart.y_label) << (chart.log_y ? " (log)" : "") << "</text>\n";

  for (std::size_t k = 0; k < chart.series.size(); ++k) {
    const auto& s = chart.series[k];
    const char* colour = kPalette[k % kPalette.size()];
    std::ostringstream pts;
    for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
      if (!xa.usable(s.x[i]) || !ya.usable(s.y[i])) continue;
      pts << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
      if (s.markers) {
        os << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i]) << "\" r=\"3\" fill=\"" << colour << "\"/>\n";
      }
    }
    os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\""
       << (s.dashed ? " stroke-dasharray=\"5,4\"" : "") << " points=\"" << pts.str() << "\"/>\n";
    const double ly = kTop + 12 + 18.0 * static_cast<double>(k);
    os << "<line x1=\"" << kLeft + pw + 12 << "\" y1=\"" << ly << "\" x2=\"" << kLeft + pw + 32 << "\" y2=\"" << ly
       << "\" stroke=\"" << colour << "\" stroke-width=\"2\"" << (s.dashed ? " stroke-dasharray=\"5,4\"" : "")
       << "/>\n";
    os << "<text x=\"" << kLeft + pw + 38 << "\" y=\"" << ly + 4 << "\">" << escape(s.label) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

void write_svg(const std::filesystem::path& path, const Chart& chart) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("plot: cannot write " + path.string());
  out << render_svg(chart);
}

}  // namespace dfm::plot

#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace dfm::plot {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
  bool markers = true;
  bool dashed = false;
};

struct Chart {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  std::vector<Series> series;
};

// Standalone SVG line chart. Non-finite points, and non-positive points on a
// log axis, are skipped.
std::string render_svg(const Chart& chart);
void write_svg(const std::filesystem::path& path, const Chart& chart);

}  // namespace dfm::plot

#pragma once

#include <string>
#include <vector>

namespace cilfuse {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Standalone SVG line chart with labeled axes and a legend.
std::string line_plot_svg(const std::string& title, const std::string& x_label, const std::string& y_label,
                          const std::vector<Series>& series);

std::string xml_escape(const std::string& s);

}  // namespace cilfuse

#pragma once

#include <string>
#include <vector>

namespace adfp {

// Self-contained SVG heatmap: one rect per cell plus value annotations.
std::string svg_heatmap(const std::vector<std::vector<double>>& cells,
                        const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels,
                        const std::string& title);

// Line plot with one polyline per labeled series, log10 y-scale optional.
std::string svg_lines(const std::vector<double>& xs,
                      const std::vector<std::pair<std::string, std::vector<double>>>& series,
                      const std::string& title, bool log_y = false);

}  // namespace adfp

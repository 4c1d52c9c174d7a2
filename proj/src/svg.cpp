#include "adfp/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace adfp {

namespace {

std::string fmt(double v, int prec = 2) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
  return buf;
}

// five-stop blue->yellow map, t in [0,1]
std::string color_for(double t) {
  t = std::clamp(t, 0.0, 1.0);
  static const double stops[5][3] = {{68, 1, 84},
                                     {59, 82, 139},
                                     {33, 145, 140},
                                     {94, 201, 98},
                                     {253, 231, 37}};
  const double pos = t * 4.0;
  const int lo = std::min(3, static_cast<int>(pos));
  const double f = pos - lo;
  char buf[16];
  std::snprintf(buf, sizeof(buf), "#%02x%02x%02x",
                static_cast<int>(stops[lo][0] + f * (stops[lo + 1][0] - stops[lo][0])),
                static_cast<int>(stops[lo][1] + f * (stops[lo + 1][1] - stops[lo][1])),
                static_cast<int>(stops[lo][2] + f * (stops[lo + 1][2] - stops[lo][2])));
  return buf;
}

}  // namespace

std::string svg_heatmap(const std::vector<std::vector<double>>& cells,
                        const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels,
                        const std::string& title) {
  if (cells.empty() || cells.front().empty())
    throw std::invalid_argument("svg_heatmap: empty matrix");
  const size_t rows = cells.size(), cols = cells.front().size();
  if (row_labels.size() != rows || col_labels.size() != cols)
    throw std::invalid_argument("svg_heatmap: label count mismatch");

  const int cell = 56, left = 110, top = 60, bottom = 20, right = 20;
  const int width = left + static_cast<int>(cols) * cell + right;
  const int height = top + static_cast<int>(rows) * cell + bottom;

  double lo = cells[0][0], hi = cells[0][0];
  for (const auto& row : cells)
    for (double v : row) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  const double span = hi - lo > 1e-12 ? hi - lo : 1.0;

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(width) + "\" height=\"" + std::to_string(height) +
         "\" font-family=\"monospace\" font-size=\"11\">\n";
  out += "<text x=\"" + std::to_string(width / 2) +
         "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" + title +
         "</text>\n";
  for (size_t c = 0; c < cols; ++c)
    out += "<text x=\"" + std::to_string(left + static_cast<int>(c) * cell + cell / 2) +
           "\" y=\"" + std::to_string(top - 8) +
           "\" text-anchor=\"middle\">" + col_labels[c] + "</text>\n";
  for (size_t r = 0; r < rows; ++r) {
    out += "<text x=\"" + std::to_string(left - 8) + "\" y=\"" +
           std::to_string(top + static_cast<int>(r) * cell + cell / 2 + 4) +
           "\" text-anchor=\"end\">" + row_labels[r] + "</text>\n";
    if (cells[r].size() != cols)
      throw std::invalid_argument("svg_heatmap: ragged matrix");
    for (size_t c = 0; c < cols; ++c) {
      const double t = (cells[r][c] - lo) / span;
      const int x = left + static_cast<int>(c) * cell;
      const int y = top + static_cast<int>(r) * cell;
      out += "<rect x=\"" + std::to_string(x) + "\" y=\"" + std::to_string(y) +
             "\" width=\"" + std::to_string(cell) + "\" height=\"" +
             std::to_string(cell) + "\" fill=\"" + color_for(t) +
             "\" stroke=\"white\"/>\n";
      out += "<text x=\"" + std::to_string(x + cell / 2) + "\" y=\"" +
             std::to_string(y + cell / 2 + 4) +
             "\" text-anchor=\"middle\" fill=\"" +
             (t > 0.55 ? std::string("black") : std::string("white")) + "\">" +
             fmt(cells[r][c]) + "</text>\n";
    }
  }
  out += "</svg>\n";
  return out;
}

std::string svg_lines(
    const std::vector<double>& xs,
    const std::vector<std::pair<std::string, std::vector<double>>>& series,
    const std::string& title, bool log_y) {
  if (xs.empty() || series.empty())
    throw std::invalid_argument("svg_lines: empty input");
  const int width = 640, height = 420, left = 70, top = 50, right = 160,
            bottom = 50;
  const double plot_w = width - left - right, plot_h = height - top - bottom;

  auto yval = [&](double v) { return log_y ? std::log10(std::max(v, 1e-12)) : v; };
  double xlo = xs.front(), xhi = xs.back();
  for (double x : xs) {
    xlo = std::min(xlo, x);
    xhi = std::max(xhi, x);
  }
  double ylo = yval(series[0].second[0]), yhi = ylo;
  for (const auto& [name, ys] : series) {
    if (ys.size() != xs.size())
      throw std::invalid_argument("svg_lines: series '" + name +
                                  "' length mismatch");
    for (double v : ys) {
      ylo = std::min(ylo, yval(v));
      yhi = std::max(yhi, yval(v));
    }
  }
  const double xspan = xhi - xlo > 1e-12 ? xhi - xlo : 1.0;
  const double yspan = yhi - ylo > 1e-12 ? yhi - ylo : 1.0;
  static const char* kColors[] = {"#4477aa", "#ee6677", "#228833",
                                  "#ccbb44", "#66ccee", "#aa3377",
                                  "#bbbbbb", "#222255"};

  std::string out;
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
         std::to_string(width) + "\" height=\"" + std::to_string(height) +
         "\" font-family=\"monospace\" font-size=\"11\">\n";
  out += "<text x=\"" + std::to_string(width / 2) +
         "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" + title +
         "</text>\n";
  out += "<rect x=\"" + std::to_string(left) + "\" y=\"" + std::to_string(top) +
         "\" width=\"" + fmt(plot_w, 0) + "\" height=\"" + fmt(plot_h, 0) +
         "\" fill=\"none\" stroke=\"black\"/>\n";
  out += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" +
         std::to_string(top + 10) + "\" text-anchor=\"end\">" + fmt(yhi) +
         "</text>\n";
  out += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" +
         std::to_string(top + static_cast<int>(plot_h)) +
         "\" text-anchor=\"end\">" + fmt(ylo) + "</text>\n";
  out += "<text x=\"" + std::to_string(left) + "\" y=\"" +
         std::to_string(height - 16) + "\">" + fmt(xlo, 0) + "</text>\n";
  out += "<text x=\"" + std::to_string(left + static_cast<int>(plot_w)) +
         "\" y=\"" + std::to_string(height - 16) +
         "\" text-anchor=\"end\">" + fmt(xhi, 0) + "</text>\n";

  for (size_t s = 0; s < series.size(); ++s) {
    std::string pts;
    for (size_t i = 0; i < xs.size(); ++i) {
      const double px = left + (xs[i] - xlo) / xspan * plot_w;
      const double py =
          top + plot_h - (yval(series[s].second[i]) - ylo) / yspan * plot_h;
      pts += fmt(px, 1) + "," + fmt(py, 1) + " ";
    }
    const char* color = kColors[s % 8];
    out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
           "\" stroke-width=\"1.5\"/>\n";
    out += "<text x=\"" + std::to_string(width - right + 10) + "\" y=\"" +
           std::to_string(top + 14 + static_cast<int>(s) * 16) +
           "\" fill=\"" + color + "\">" + series[s].first + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace adfp

#pragma once

// Minimal SVG emitters for reports. Output is a pure function of the input,
// so re-emitting a report yields byte-identical files.

#include <string>
#include <vector>

namespace groklab::svg {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  /// Optional symmetric band (same length as y), drawn as a shaded region.
  std::vector<double> band_low;
  std::vector<double> band_high;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  bool log_x = false;
  /// Fixed y range; when low >= high the range is taken from the data.
  double y_low = 0.0;
  double y_high = 1.0;
};

struct Heatmap {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<std::string> x_ticks;
  std::vector<std::string> y_ticks;
  /// Row-major [y_ticks × x_ticks], values in [0, 1]; NaN marks an empty cell.
  std::vector<double> values;
  /// Optional per-cell text (same layout as values).
  std::vector<std::string> cell_text;
};

std::string line_plot(const LinePlot& plot);
std::string heatmap(const Heatmap& map);

/// Escapes &, <, >, " for use in text nodes and attributes.
std::string escape(const std::string& text);

}  // namespace groklab::svg

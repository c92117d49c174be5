#include "groklab/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "groklab/errors.hpp"

namespace groklab::svg {
namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 60;
constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  if (std::abs(v) >= 1000 || (v != 0 && std::abs(v) < 0.01)) {
    std::snprintf(buf, sizeof buf, "%.3g", v);
  } else {
    std::snprintf(buf, sizeof buf, "%.4g", v);
  }
  return buf;
}

std::string header(const std::string& title) {
  std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(kWidth) +
                  "\" height=\"" + num(kHeight) + "\" viewBox=\"0 0 " + num(kWidth) + " " +
                  num(kHeight) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += "<text x=\"" + num(kWidth / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" +
       escape(title) + "</text>\n";
  return s;
}

std::string axis_labels(const std::string& x_label, const std::string& y_label) {
  const double plot_mid_x = kLeft + (kWidth - kLeft - kRight) / 2;
  const double plot_mid_y = kTop + (kHeight - kTop - kBottom) / 2;
  std::string s = "<text x=\"" + num(plot_mid_x) + "\" y=\"" + num(kHeight - 15) +
                  "\" text-anchor=\"middle\">" + escape(x_label) + "</text>\n";
  s += "<text x=\"18\" y=\"" + num(plot_mid_y) + "\" text-anchor=\"middle\" transform=\"rotate(-90 18 " +
       num(plot_mid_y) + ")\">" + escape(y_label) + "</text>\n";
  return s;
}

}  // namespace

std::string escape(const std::string& text) {
  std::string out;
  out.reserve(text.size());
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string line_plot(const LinePlot& plot) {
  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo;
  double y_lo = x_lo, y_hi = -x_lo;
  for (const auto& s : plot.series) {
    if (s.x.size() != s.y.size()) throw InputError("svg: series '" + s.name + "' x/y length mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (plot.log_x && !(s.x[i] > 0)) throw InputError("svg: log axis needs positive x");
      x_lo = std::min(x_lo, s.x[i]);
      x_hi = std::max(x_hi, s.x[i]);
      y_lo = std::min(y_lo, s.y[i]);
      y_hi = std::max(y_hi, s.y[i]);
    }
  }
  if (!std::isfinite(x_lo)) throw InputError("svg: line plot has no points");
  if (plot.y_low < plot.y_high) {
    y_lo = plot.y_low;
    y_hi = plot.y_high;
  }
  auto tx = [&](double x) { return plot.log_x ? std::log10(x) : x; };
  double ax_lo = tx(x_lo), ax_hi = tx(x_hi);
  if (ax_hi <= ax_lo) ax_hi = ax_lo + 1;
  if (y_hi <= y_lo) y_hi = y_lo + 1;
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  auto px = [&](double x) { return kLeft + (tx(x) - ax_lo) / (ax_hi - ax_lo) * pw; };
  auto py = [&](double y) {
    const double c = std::clamp(y, y_lo, y_hi);
    return kTop + ph - (c - y_lo) / (y_hi - y_lo) * ph;
  };

  std::string s = header(plot.title);
  s += "<rect x=\"" + num(kLeft) + "\" y=\"" + num(kTop) + "\" width=\"" + num(pw) +
       "\" height=\"" + num(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = y_lo + (y_hi - y_lo) * i / 4.0;
    const double xv_axis = ax_lo + (ax_hi - ax_lo) * i / 4.0;
    const double xv = plot.log_x ? std::pow(10.0, xv_axis) : xv_axis;
    s += "<text x=\"" + num(kLeft - 6) + "\" y=\"" + num(py(yv) + 4) + "\" text-anchor=\"end\">" +
         tick_label(yv) + "</text>\n";
    s += "<text x=\"" + num(px(xv)) + "\" y=\"" + num(kTop + ph + 16) +
         "\" text-anchor=\"middle\">" + tick_label(xv) + "</text>\n";
  }
  s += axis_labels(plot.x_label, plot.y_label);

  for (std::size_t k = 0; k < plot.series.size(); ++k) {
    const auto& ser = plot.series[k];
    const char* color = kPalette[k % std::size(kPalette)];
    if (!ser.band_low.empty() && ser.band_low.size() == ser.y.size() &&
        ser.band_high.size() == ser.y.size()) {
      std::string pts;
      for (std::size_t i = 0; i < ser.x.size(); ++i) {
        pts += num(px(ser.x[i])) + "," + num(py(ser.band_high[i])) + " ";
      }
      for (std::size_t i = ser.x.size(); i-- > 0;) {
        pts += num(px(ser.x[i])) + "," + num(py(ser.band_low[i])) + " ";
      }
      if (!pts.empty()) pts.pop_back();
      s += "<polygon points=\"" + pts + "\" fill=\"" + color + "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
    }
    std::string pts;
    for (std::size_t i = 0; i < ser.x.size(); ++i) {
      if (i) pts += ' ';
      pts += num(px(ser.x[i])) + "," + num(py(ser.y[i]));
    }
    s += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
         "\" stroke-width=\"1.5\"/>\n";
    if (ser.x.size() <= 40) {
      for (std::size_t i = 0; i < ser.x.size(); ++i) {
        s += "<circle cx=\"" + num(px(ser.x[i])) + "\" cy=\"" + num(py(ser.y[i])) +
             "\" r=\"2.5\" fill=\"" + color + "\"/>\n";
      }
    }
    const double ly = kTop + 10 + 18.0 * static_cast<double>(k);
    s += "<line x1=\"" + num(kWidth - kRight + 10) + "\" y1=\"" + num(ly) + "\" x2=\"" +
         num(kWidth - kRight + 30) + "\" y2=\"" + num(ly) + "\" stroke=\"" + color +
         "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + num(kWidth - kRight + 35) + "\" y=\"" + num(ly + 4) + "\">" +
         escape(ser.name) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

std::string heatmap(const Heatmap& map) {
  const std::size_t nx = map.x_ticks.size(), ny = map.y_ticks.size();
  if (nx == 0 || ny == 0) throw InputError("svg: heatmap has no cells");
  if (map.values.size() != nx * ny) throw InputError("svg: heatmap value count mismatch");
  if (!map.cell_text.empty() && map.cell_text.size() != nx * ny) {
    throw InputError("svg: heatmap cell text count mismatch");
  }
  const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
  const double cw = pw / static_cast<double>(nx), ch = ph / static_cast<double>(ny);
  std::string s = header(map.title);
  for (std::size_t r = 0; r < ny; ++r) {
    // Row 0 at the bottom.
    const double y = kTop + ph - ch * static_cast<double>(r + 1);
    for (std::size_t c = 0; c < nx; ++c) {
      const double v = map.values[r * nx + c];
      const double x = kLeft + cw * static_cast<double>(c);
      std::string fill = "#dddddd";
      if (!std::isnan(v)) {
        const double t = std::clamp(v, 0.0, 1.0);
        const int red = static_cast<int>(std::lround(255 * (1 - t)));
        const int green = static_cast<int>(std::lround(90 + 120 * t));
        const int blue = static_cast<int>(std::lround(255 * (1 - t) * 0.6 + 60 * t));
        char buf[16];
        std::snprintf(buf, sizeof buf, "#%02x%02x%02x", red, green, blue);
        fill = buf;
      }
      s += "<rect x=\"" + num(x) + "\" y=\"" + num(y) + "\" width=\"" + num(cw) + "\" height=\"" +
           num(ch) + "\" fill=\"" + fill + "\" stroke=\"white\"/>\n";
      if (!map.cell_text.empty() && !map.cell_text[r * nx + c].empty()) {
        s += "<text x=\"" + num(x + cw / 2) + "\" y=\"" + num(y + ch / 2 + 4) +
             "\" text-anchor=\"middle\" font-size=\"9\">" + escape(map.cell_text[r * nx + c]) +
             "</text>\n";
      }
    }
    s += "<text x=\"" + num(kLeft - 6) + "\" y=\"" + num(y + ch / 2 + 4) +
         "\" text-anchor=\"end\">" + escape(map.y_ticks[r]) + "</text>\n";
  }
  for (std::size_t c = 0; c < nx; ++c) {
    s += "<text x=\"" + num(kLeft + cw * (static_cast<double>(c) + 0.5)) + "\" y=\"" +
         num(kTop + ph + 16) + "\" text-anchor=\"middle\">" + escape(map.x_ticks[c]) + "</text>\n";
  }
  s += axis_labels(map.x_label, map.y_label);
  s += "</svg>\n";
  return s;
}

}  // namespace groklab::svg

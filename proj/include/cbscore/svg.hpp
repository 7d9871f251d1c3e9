#pragma once

// Minimal SVG emission for grouped bar charts. Output is plain markup with
// fixed number formatting so identical input gives identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <string_view>
#include <vector>

#include "cbscore/error.hpp"

namespace cbscore::svg {

inline std::string escape(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

struct Series {
  std::string label;
  std::vector<double> values;
};

struct BarChartStyle {
  double bar_width = 10.0;
  double group_gap = 14.0;
  double plot_height = 320.0;
  double margin_left = 64.0;
  double margin_right = 24.0;
  double margin_top = 48.0;
  double margin_bottom = 120.0;
  double legend_width = 180.0;
};

inline const std::vector<std::string>& palette() {
  static const std::vector<std::string> colors = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f",
                                                   "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac"};
  return colors;
}

/// One bar group per category, one bar per series inside each group.
/// Every bar is a <rect class="bar"> carrying data-series and data-category.
inline std::string grouped_bar_chart(std::string_view title, const std::vector<std::string>& categories,
                                     const std::vector<Series>& series, std::string_view y_label = "",
                                     const BarChartStyle& style = {}) {
  if (categories.empty() || series.empty()) throw PreconditionError("bar chart needs categories and series");
  double max_v = 0.0;
  for (const auto& s : series) {
    if (s.values.size() != categories.size()) throw PreconditionError("series '" + s.label + "' has the wrong length");
    for (const double v : s.values) {
      if (!std::isfinite(v) || v < 0.0) throw PreconditionError("bar values must be finite and non-negative");
      max_v = std::max(max_v, v);
    }
  }
  if (max_v == 0.0) max_v = 1.0;

  const auto n_series = static_cast<double>(series.size());
  const double group_w = n_series * style.bar_width + style.group_gap;
  const double plot_w = group_w * static_cast<double>(categories.size());
  const double width = style.margin_left + plot_w + style.margin_right + style.legend_width;
  const double height = style.margin_top + style.plot_height + style.margin_bottom;
  const double base_y = style.margin_top + style.plot_height;

  std::string out;
  out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + num(width) + "\" height=\"" + num(height) +
         "\" viewBox=\"0 0 " + num(width) + " " + num(height) + "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  out += "  <title>" + escape(title) + "</title>\n";
  out += "  <rect x=\"0\" y=\"0\" width=\"" + num(width) + "\" height=\"" + num(height) + "\" fill=\"#ffffff\"/>\n";
  out += "  <text x=\"" + num(width / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">" + escape(title) +
         "</text>\n";

  // Axes and ticks.
  out += "  <g class=\"axes\" stroke=\"#333333\">\n";
  out += "    <line x1=\"" + num(style.margin_left) + "\" y1=\"" + num(style.margin_top) + "\" x2=\"" +
         num(style.margin_left) + "\" y2=\"" + num(base_y) + "\"/>\n";
  out += "    <line x1=\"" + num(style.margin_left) + "\" y1=\"" + num(base_y) + "\" x2=\"" +
         num(style.margin_left + plot_w) + "\" y2=\"" + num(base_y) + "\"/>\n";
  out += "  </g>\n";
  out += "  <g class=\"ticks\" text-anchor=\"end\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = max_v * i / 4.0;
    const double y = base_y - style.plot_height * i / 4.0;
    char label[32];
    std::snprintf(label, sizeof label, "%.3g", v);
    out += "    <line x1=\"" + num(style.margin_left - 4) + "\" y1=\"" + num(y) + "\" x2=\"" + num(style.margin_left) +
           "\" y2=\"" + num(y) + "\" stroke=\"#333333\"/>\n";
    out += "    <text x=\"" + num(style.margin_left - 6) + "\" y=\"" + num(y + 4) + "\">" + label + "</text>\n";
  }
  out += "  </g>\n";
  if (!y_label.empty()) {
    out += "  <text transform=\"translate(16 " + num(style.margin_top + style.plot_height / 2) +
           ") rotate(-90)\" text-anchor=\"middle\">" + escape(y_label) + "</text>\n";
  }

  out += "  <g class=\"bars\">\n";
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const double gx = style.margin_left + group_w * static_cast<double>(c) + style.group_gap / 2;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double h = style.plot_height * series[s].values[c] / max_v;
      out += "    <rect class=\"bar\" data-series=\"" + escape(series[s].label) + "\" data-category=\"" +
             escape(categories[c]) + "\" x=\"" + num(gx + style.bar_width * static_cast<double>(s)) + "\" y=\"" +
             num(base_y - h) + "\" width=\"" + num(style.bar_width) + "\" height=\"" + num(h) + "\" fill=\"" +
             palette()[s % palette().size()] + "\"/>\n";
    }
    const double lx = gx + style.bar_width * n_series / 2;
    out += "    <text x=\"" + num(lx) + "\" y=\"" + num(base_y + 12) + "\" text-anchor=\"end\" transform=\"rotate(-45 " +
           num(lx) + " " + num(base_y + 12) + ")\">" + escape(categories[c]) + "</text>\n";
  }
  out += "  </g>\n";

  out += "  <g class=\"legend\">\n";
  const double lx = style.margin_left + plot_w + style.margin_right;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const double ly = style.margin_top + 18.0 * static_cast<double>(s);
    out += "    <rect x=\"" + num(lx) + "\" y=\"" + num(ly) + "\" width=\"12\" height=\"12\" fill=\"" +
           palette()[s % palette().size()] + "\"/>\n";
    out += "    <text x=\"" + num(lx + 18) + "\" y=\"" + num(ly + 10) + "\">" + escape(series[s].label) + "</text>\n";
  }
  out += "  </g>\n";
  out += "</svg>\n";
  return out;
}

}  // namespace cbscore::svg

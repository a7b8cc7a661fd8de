#include "promptlab/eval/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "promptlab/core/error.hpp"

namespace promptlab::eval {

namespace {

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                          "#9467bd", "#8c564b", "#17becf", "#7f7f7f",
                          "#bcbd22", "#e377c2"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string fmt_tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

}  // namespace

std::string render_line_chart(const std::string& title,
                              const std::string& x_label,
                              const std::string& y_label,
                              const std::vector<Series>& series) {
  if (series.empty()) throw ValueError("render_line_chart: no series");
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  size_t n_points = 0;
  for (const Series& s : series) {
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) {
        throw ValueError("render_line_chart: non-finite data in series " +
                         s.name);
      }
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
      ++n_points;
    }
  }
  if (n_points == 0) throw ValueError("render_line_chart: no points");

  // Data hull padded by 5% per side; degenerate ranges get a unit pad.
  const double xpad = (xmax - xmin) > 0 ? 0.05 * (xmax - xmin) : 1.0;
  const double ypad = (ymax - ymin) > 0 ? 0.05 * (ymax - ymin) : 1.0;
  xmin -= xpad;
  xmax += xpad;
  ymin -= ypad;
  ymax += ypad;

  const double width = 640, height = 420;
  const double ml = 62, mr = 160, mt = 36, mb = 46;
  const double pw = width - ml - mr, ph = height - mt - mb;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return mt + ph - (y - ymin) / (ymax - ymin) * ph; };

  std::string svg;
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) +
         "\" height=\"" + fmt(height) + "\" viewBox=\"0 0 " + fmt(width) +
         " " + fmt(height) + "\">\n";
  svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  svg += "<text x=\"" + fmt(ml + pw / 2) + "\" y=\"20\" font-size=\"14\" "
         "text-anchor=\"middle\" font-family=\"sans-serif\">" + title +
         "</text>\n";
  // Axes.
  svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(mt + ph) + "\" x2=\"" +
         fmt(ml + pw) + "\" y2=\"" + fmt(mt + ph) +
         "\" stroke=\"black\"/>\n";
  svg += "<line x1=\"" + fmt(ml) + "\" y1=\"" + fmt(mt) + "\" x2=\"" +
         fmt(ml) + "\" y2=\"" + fmt(mt + ph) + "\" stroke=\"black\"/>\n";
  // Ticks.
  for (int i = 0; i <= 4; ++i) {
    const double tx = xmin + (xmax - xmin) * i / 4.0;
    const double ty = ymin + (ymax - ymin) * i / 4.0;
    svg += "<line x1=\"" + fmt(px(tx)) + "\" y1=\"" + fmt(mt + ph) +
           "\" x2=\"" + fmt(px(tx)) + "\" y2=\"" + fmt(mt + ph + 5) +
           "\" stroke=\"black\"/>\n";
    svg += "<text x=\"" + fmt(px(tx)) + "\" y=\"" + fmt(mt + ph + 18) +
           "\" font-size=\"10\" text-anchor=\"middle\" "
           "font-family=\"sans-serif\">" + fmt_tick(tx) + "</text>\n";
    svg += "<line x1=\"" + fmt(ml - 5) + "\" y1=\"" + fmt(py(ty)) +
           "\" x2=\"" + fmt(ml) + "\" y2=\"" + fmt(py(ty)) +
           "\" stroke=\"black\"/>\n";
    svg += "<text x=\"" + fmt(ml - 8) + "\" y=\"" + fmt(py(ty) + 3) +
           "\" font-size=\"10\" text-anchor=\"end\" "
           "font-family=\"sans-serif\">" + fmt_tick(ty) + "</text>\n";
  }
  svg += "<text x=\"" + fmt(ml + pw / 2) + "\" y=\"" + fmt(height - 10) +
         "\" font-size=\"12\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\">" + x_label + "</text>\n";
  svg += "<text x=\"16\" y=\"" + fmt(mt + ph / 2) +
         "\" font-size=\"12\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" transform=\"rotate(-90 16 " +
         fmt(mt + ph / 2) + ")\">" + y_label + "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const char* color = kPalette[si % (sizeof(kPalette) / sizeof(*kPalette))];
    const Series& s = series[si];
    if (s.points.size() > 1) {
      std::string pts;
      for (const auto& [x, y] : s.points) {
        if (!pts.empty()) pts += " ";
        pts += fmt(px(x)) + "," + fmt(py(y));
      }
      svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
             "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
    }
    for (const auto& [x, y] : s.points) {
      svg += "<circle cx=\"" + fmt(px(x)) + "\" cy=\"" + fmt(py(y)) +
             "\" r=\"3\" fill=\"" + std::string(color) + "\"/>\n";
    }
    const double ly = mt + 14 + 16 * static_cast<double>(si);
    svg += "<rect x=\"" + fmt(ml + pw + 12) + "\" y=\"" + fmt(ly - 8) +
           "\" width=\"10\" height=\"10\" fill=\"" + std::string(color) +
           "\"/>\n";
    svg += "<text x=\"" + fmt(ml + pw + 27) + "\" y=\"" + fmt(ly + 1) +
           "\" font-size=\"11\" font-family=\"sans-serif\">" + s.name +
           "</text>\n";
  }
  svg += "</svg>\n";
  return svg;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("write_text_file: cannot open " + path);
  out << content;
  if (!out) throw FormatError("write_text_file: write failed for " + path);
}

}  // namespace promptlab::eval

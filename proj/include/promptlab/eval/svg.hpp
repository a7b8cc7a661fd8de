#pragma once

#include <string>
#include <utility>
#include <vector>

namespace promptlab::eval {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

// Self-contained deterministic SVG line chart: fixed palette, fixed float
// formatting, no timestamps. Axis ranges are the data hull padded by 5%.
// Non-finite data raises ValueError.
std::string render_line_chart(const std::string& title,
                              const std::string& x_label,
                              const std::string& y_label,
                              const std::vector<Series>& series);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace promptlab::eval

#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace explore::tools {

struct Series {
  std::string name;
  std::vector<double> values;  // x = position
};

// Static line chart; y starts at zero.
void write_line_chart(const std::filesystem::path& path, const std::string& title,
                      const std::string& x_label, const std::string& y_label,
                      const std::vector<Series>& series);

// Static bar chart with one bar per category.
void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::string>& categories, const std::vector<double>& values);

}  // namespace explore::tools

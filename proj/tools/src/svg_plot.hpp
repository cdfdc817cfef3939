#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace rwkv_clip::cli {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotOptions {
  std::string title;
  std::string x_label;
  std::string y_label;
  bool log_x = false;
  bool log_y = false;
  double width = 640;
  double height = 400;
};

/// Static line chart. Non-positive values are dropped on log axes.
std::string line_plot_svg(const std::vector<PlotSeries>& series, const PlotOptions& options);
void write_text_file(const std::filesystem::path& path, const std::string& content);

}  // namespace rwkv_clip::cli

#pragma once

// Minimal line charts rendered to PNG for run reports.

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace adabldm::plot {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

struct Axes {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  bool log_y = false;
  std::optional<std::pair<double, double>> x_range;
  std::optional<std::pair<double, double>> y_range;
};

/// Throws ParameterError when a series has mismatched lengths or nothing is plottable.
void line_plot(const std::filesystem::path& path, const Axes& axes, const std::vector<Series>& series,
               int width = 640, int height = 480);

/// Trailing moving average with the given window (window 1 returns the input).
std::vector<double> moving_average(const std::vector<double>& v, int window);

}  // namespace adabldm::plot

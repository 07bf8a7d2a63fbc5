#include "adabldm/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <tuple>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "adabldm/errors.hpp"
#include "adabldm/image.hpp"

namespace adabldm::plot {

namespace {

const cv::Scalar kPalette[] = {{180, 119, 31}, {14, 127, 255}, {44, 160, 44}, {40, 39, 214}, {189, 103, 148}};
constexpr int kFont = cv::FONT_HERSHEY_SIMPLEX;

std::string tick_label(double v, bool log_y) {
  char buf[32];
  if (log_y) std::snprintf(buf, sizeof buf, "%.2g", std::pow(10.0, v));
  else std::snprintf(buf, sizeof buf, "%.3g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

void put_centered(cv::Mat& img, const std::string& text, cv::Point center, double scale) {
  int base = 0;
  const cv::Size sz = cv::getTextSize(text, kFont, scale, 1, &base);
  cv::putText(img, text, {center.x - sz.width / 2, center.y + sz.height / 2}, kFont, scale, {0, 0, 0}, 1,
              cv::LINE_AA);
}

}  // namespace

std::vector<double> moving_average(const std::vector<double>& v, int window) {
  ADABLDM_CHECK(window >= 1, ParameterError, "moving_average: window must be positive");
  std::vector<double> out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    sum += v[i];
    if (i >= static_cast<std::size_t>(window)) sum -= v[i - window];
    out[i] = sum / static_cast<double>(std::min<std::size_t>(i + 1, window));
  }
  return out;
}

void line_plot(const std::filesystem::path& path, const Axes& axes, const std::vector<Series>& series, int width,
               int height) {
  ADABLDM_CHECK(width >= 200 && height >= 150, ParameterError, "line_plot: canvas too small");
  double x_lo = std::numeric_limits<double>::infinity(), x_hi = -x_lo, y_lo = x_lo, y_hi = -x_lo;
  auto ty = [&](double y) { return axes.log_y ? std::log10(y) : y; };
  for (const auto& s : series) {
    ADABLDM_CHECK(s.x.size() == s.y.size(), ParameterError, "line_plot: series '" + s.name + "' length mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]) || (axes.log_y && s.y[i] <= 0.0)) continue;
      x_lo = std::min(x_lo, s.x[i]);
      x_hi = std::max(x_hi, s.x[i]);
      y_lo = std::min(y_lo, ty(s.y[i]));
      y_hi = std::max(y_hi, ty(s.y[i]));
    }
  }
  ADABLDM_CHECK(std::isfinite(x_lo) && std::isfinite(y_lo), ParameterError, "line_plot: nothing to plot");
  if (axes.x_range) std::tie(x_lo, x_hi) = *axes.x_range;
  if (axes.y_range) {
    y_lo = ty(axes.y_range->first);
    y_hi = ty(axes.y_range->second);
  }
  if (x_hi - x_lo < 1e-12) x_hi = x_lo + 1.0;
  if (y_hi - y_lo < 1e-12) {
    y_lo -= 0.5;
    y_hi += 0.5;
  }

  cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  const int left = 72, right = 18, top = 36, bottom = 52;
  const int pw = width - left - right, ph = height - top - bottom;
  auto px = [&](double x) { return left + static_cast<int>(std::lround((x - x_lo) / (x_hi - x_lo) * pw)); };
  auto py = [&](double y) { return top + ph - static_cast<int>(std::lround((y - y_lo) / (y_hi - y_lo) * ph)); };

  constexpr int kTicks = 5;
  for (int i = 0; i <= kTicks; ++i) {
    const double fx = x_lo + (x_hi - x_lo) * i / kTicks, fy = y_lo + (y_hi - y_lo) * i / kTicks;
    cv::line(img, {px(fx), top}, {px(fx), top + ph}, {225, 225, 225}, 1);
    cv::line(img, {left, py(fy)}, {left + pw, py(fy)}, {225, 225, 225}, 1);
    put_centered(img, tick_label(fx, false), {px(fx), top + ph + 14}, 0.38);
    int base = 0;
    const std::string yl = tick_label(fy, axes.log_y);
    const cv::Size sz = cv::getTextSize(yl, kFont, 0.38, 1, &base);
    cv::putText(img, yl, {left - 6 - sz.width, py(fy) + sz.height / 2}, kFont, 0.38, {0, 0, 0}, 1, cv::LINE_AA);
  }
  cv::rectangle(img, {left, top}, {left + pw, top + ph}, {0, 0, 0}, 1);

  cv::Mat plot_area = img(cv::Rect(left, top, pw + 1, ph + 1));
  for (std::size_t k = 0; k < series.size(); ++k) {
    std::vector<cv::Point> pts;
    const auto& s = series[k];
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]) || (axes.log_y && s.y[i] <= 0.0)) continue;
      pts.emplace_back(px(s.x[i]) - left, py(ty(s.y[i])) - top);
    }
    if (pts.size() == 1) cv::circle(plot_area, pts[0], 2, kPalette[k % 5], cv::FILLED, cv::LINE_AA);
    if (pts.size() > 1) cv::polylines(plot_area, pts, false, kPalette[k % 5], 2, cv::LINE_AA);
  }

  int legend_y = top + 16;
  for (std::size_t k = 0; k < series.size(); ++k) {
    if (series[k].name.empty()) continue;
    int base = 0;
    const cv::Size sz = cv::getTextSize(series[k].name, kFont, 0.42, 1, &base);
    const int x0 = left + pw - sz.width - 36;
    cv::line(img, {x0, legend_y - 4}, {x0 + 22, legend_y - 4}, kPalette[k % 5], 2, cv::LINE_AA);
    cv::putText(img, series[k].name, {x0 + 28, legend_y}, kFont, 0.42, {0, 0, 0}, 1, cv::LINE_AA);
    legend_y += 18;
  }

  put_centered(img, axes.title, {left + pw / 2, top / 2}, 0.55);
  put_centered(img, axes.xlabel, {left + pw / 2, height - 16}, 0.45);
  if (!axes.ylabel.empty()) {
    int base = 0;
    const cv::Size sz = cv::getTextSize(axes.ylabel, kFont, 0.45, 1, &base);
    cv::Mat label(sz.height + base + 4, sz.width + 4, CV_8UC3, cv::Scalar(255, 255, 255));
    cv::putText(label, axes.ylabel, {2, sz.height + 1}, kFont, 0.45, {0, 0, 0}, 1, cv::LINE_AA);
    cv::Mat rotated;
    cv::rotate(label, rotated, cv::ROTATE_90_COUNTERCLOCKWISE);
    const int y0 = std::max(0, top + ph / 2 - rotated.rows / 2);
    const int h = std::min(rotated.rows, height - y0);
    rotated(cv::Rect(0, 0, rotated.cols, h)).copyTo(img(cv::Rect(4, y0, rotated.cols, h)));
  }

  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(width) * height * 3);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const cv::Vec3b& p = img.at<cv::Vec3b>(y, x);
      const std::size_t o = (static_cast<std::size_t>(y) * width + x) * 3;
      rgb[o] = p[2];
      rgb[o + 1] = p[1];
      rgb[o + 2] = p[0];
    }
  png::write_rgb8(path, height, width, rgb);
}

}  // namespace adabldm::plot

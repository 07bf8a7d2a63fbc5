#include "adabldm/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "adabldm/errors.hpp"

namespace adabldm {

double mean_abs_error(const ImageGrid& a, const ImageGrid& b) {
  ADABLDM_CHECK(a.same_shape(b), ParameterError, "mean_abs_error: shape mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += std::abs(a.data[i] - b.data[i]);
  return a.data.empty() ? 0.0 : acc / static_cast<double>(a.data.size());
}

double mean_abs_error(const ImageGrid& a, const ImageGrid& b, const BinaryMask& region) {
  ADABLDM_CHECK(a.same_shape(b) && region.height == a.height && region.width == a.width, ParameterError,
                "mean_abs_error: shape mismatch");
  double acc = 0.0;
  std::size_t n = 0;
  for (int c = 0; c < a.channels; ++c)
    for (int y = 0; y < a.height; ++y)
      for (int x = 0; x < a.width; ++x) {
        if (!region.at(y, x)) continue;
        acc += std::abs(a.at(c, y, x) - b.at(c, y, x));
        ++n;
      }
  return n ? acc / static_cast<double>(n) : 0.0;
}

BinaryMask logical_not(const BinaryMask& m) {
  BinaryMask out(m.height, m.width);
  for (std::size_t i = 0; i < m.data.size(); ++i) out.data[i] = m.data[i] ? 0 : 1;
  return out;
}

namespace png {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_png(const std::filesystem::path& path, int height, int width, int color_type, int bit_depth,
               const std::vector<std::uint8_t>& bytes) {
  FilePtr fp(std::fopen(path.c_str(), "wb"));
  ADABLDM_CHECK(fp, StateError, "cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw StateError("libpng write failure: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, bit_depth, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  // Fixed compression settings keep byte output reproducible.
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  const std::size_t row_bytes = bytes.size() / static_cast<std::size_t>(height);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(bytes.data() + static_cast<std::size_t>(y) * row_bytes));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_gray8(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& pixels) {
  write_png(path, height, width, PNG_COLOR_TYPE_GRAY, 8, pixels);
}

void write_rgb8(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& pixels) {
  write_png(path, height, width, PNG_COLOR_TYPE_RGB, 8, pixels);
}

void write_gray16(const std::filesystem::path& path, int height, int width, const std::vector<double>& values,
                  double lo, double hi) {
  std::vector<std::uint8_t> bytes(values.size() * 2);
  const double span = hi > lo ? hi - lo : 1.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double u = std::clamp((values[i] - lo) / span, 0.0, 1.0);
    const auto v = static_cast<std::uint16_t>(std::lround(u * 65535.0));
    bytes[2 * i] = static_cast<std::uint8_t>(v >> 8);  // PNG is big-endian
    bytes[2 * i + 1] = static_cast<std::uint8_t>(v & 0xFF);
  }
  write_png(path, height, width, PNG_COLOR_TYPE_GRAY, 16, bytes);
}

Raw8 read_raw8(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.c_str(), "rb"));
  ADABLDM_CHECK(fp, StateError, "cannot open: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw StateError("libpng read failure: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  Raw8 raw;
  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.channels = png_get_channels(png, info);
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  raw.pixels.resize(row_bytes * raw.height);
  for (int y = 0; y < raw.height; ++y) png_read_row(png, raw.pixels.data() + y * row_bytes, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return raw;
}

void write_image(const std::filesystem::path& path, const ImageGrid& img) {
  ADABLDM_CHECK(img.channels == 3, ParameterError, "write_image: expected 3 channels");
  std::vector<std::uint8_t> bytes(img.plane() * 3);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        bytes[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  write_rgb8(path, img.height, img.width, bytes);
}

ImageGrid read_image(const std::filesystem::path& path) {
  const Raw8 raw = read_raw8(path);
  ImageGrid img(3, raw.height, raw.width);
  for (int y = 0; y < raw.height; ++y)
    for (int x = 0; x < raw.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const int src = raw.channels >= 3 ? c : 0;
        img.at(c, y, x) = raw.pixels[(static_cast<std::size_t>(y) * raw.width + x) * raw.channels + src] / 255.0;
      }
  return img;
}

void write_mask(const std::filesystem::path& path, const BinaryMask& mask) {
  std::vector<std::uint8_t> bytes(mask.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = mask.data[i] ? 255 : 0;
  write_gray8(path, mask.height, mask.width, bytes);
}

BinaryMask read_mask(const std::filesystem::path& path) {
  const Raw8 raw = read_raw8(path);
  BinaryMask m(raw.height, raw.width);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = raw.pixels[i * raw.channels] >= 128 ? 1 : 0;
  return m;
}

}  // namespace png
}  // namespace adabldm

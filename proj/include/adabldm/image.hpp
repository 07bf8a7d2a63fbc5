#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "adabldm/tensor.hpp"

namespace adabldm {

struct ImageTag {};
struct LatentTag {};
struct PixelTag {};

/// Channel-planar grid of reals (C,H,W). The tag keeps images and latents apart.
template <class Tag>
struct PlanarGrid {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  PlanarGrid() = default;
  PlanarGrid(int c, int h, int w, double fill = 0.0)
      : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill) {}

  double& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  bool same_shape(const PlanarGrid& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  /// View as a (1,C,H,W) tensor.
  Tensor tensor() const { return Tensor({1, channels, height, width}, data); }
  /// Sample n of an (N,C,H,W) tensor.
  static PlanarGrid from_tensor(const Tensor& t, int n = 0) {
    PlanarGrid g(t.dim(1), t.dim(2), t.dim(3));
    const std::size_t sz = g.data.size();
    std::copy(t.data() + n * sz, t.data() + (n + 1) * sz, g.data.begin());
    return g;
  }

  friend bool operator==(const PlanarGrid& a, const PlanarGrid& b) {
    return a.same_shape(b) && a.data == b.data;
  }
};

/// RGB image with values in [0,1].
using ImageGrid = PlanarGrid<ImageTag>;
/// Diffusion latent (C_z,H_z,W_z).
using LatentGrid = PlanarGrid<LatentTag>;

/// Exactly-binary H x W map.
template <class Tag>
struct BinaryGrid {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  BinaryGrid() = default;
  BinaryGrid(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  bool in_bounds(int y, int x) const { return y >= 0 && y < height && x >= 0 && x < width; }
  std::size_t count() const {
    std::size_t n = 0;
    for (auto v : data) n += v;
    return n;
  }
  bool none() const { return count() == 0; }
  bool all() const { return count() == data.size(); }
  bool same_shape(const BinaryGrid& o) const { return height == o.height && width == o.width; }

  friend bool operator==(const BinaryGrid& a, const BinaryGrid& b) {
    return a.same_shape(b) && a.data == b.data;
  }
};

using BinaryMask = BinaryGrid<PixelTag>;
using LatentMask = BinaryGrid<LatentTag>;

/// Mean absolute error between two images, optionally restricted to where
/// `region` is 1 (returns 0 for an empty region).
double mean_abs_error(const ImageGrid& a, const ImageGrid& b);
double mean_abs_error(const ImageGrid& a, const ImageGrid& b, const BinaryMask& region);

BinaryMask logical_not(const BinaryMask& m);

namespace png {

/// 8-bit RGB, values rounded from [0,1].
void write_image(const std::filesystem::path& path, const ImageGrid& img);
ImageGrid read_image(const std::filesystem::path& path);

/// Single-channel {0,255}.
void write_mask(const std::filesystem::path& path, const BinaryMask& mask);
/// Accepts any 8-bit gray PNG; pixels >= 128 become 1.
BinaryMask read_mask(const std::filesystem::path& path);

/// Single-channel 16-bit, values linearly mapped from [lo,hi].
void write_gray16(const std::filesystem::path& path, int height, int width, const std::vector<double>& values,
                  double lo, double hi);

/// Raw 8-bit writers used by trimap and plotting code.
void write_gray8(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& pixels);
void write_rgb8(const std::filesystem::path& path, int height, int width, const std::vector<std::uint8_t>& pixels);

struct Raw8 {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;
};
/// Reads an 8-bit PNG as gray or RGB, expanding palettes and dropping alpha.
Raw8 read_raw8(const std::filesystem::path& path);

}  // namespace png
}  // namespace adabldm

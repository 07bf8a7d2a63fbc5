#pragma once

// Controlling trimaps: foreground estimation, synthetic defect-mask sampling,
// trimap assembly and the dilated latent-resolution mask used while blending.

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "adabldm/image.hpp"
#include "adabldm/rng.hpp"

namespace adabldm {

/// Per-pixel control map with values in {0, 0.5, 1}: background, object, defect.
struct Trimap {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Trimap() = default;
  Trimap(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}
  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
  double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  /// (1,1,H,W) tensor.
  Tensor tensor() const { return Tensor({1, 1, height, width}, data); }

  friend bool operator==(const Trimap& a, const Trimap& b) {
    return a.height == b.height && a.width == b.width && a.data == b.data;
  }
};

}  // namespace adabldm

namespace adabldm::trimap {

inline constexpr double kBackground = 0.0;
inline constexpr double kObject = 0.5;
inline constexpr double kDefect = 1.0;

enum class ForegroundKind { object, texture };

struct ForegroundOptions {
  /// On a degenerate (constant) image return an all-ones mask instead of throwing.
  bool all_ones_fallback = false;
  int closing_radius = 2;
};

BinaryMask estimate_foreground(const ImageGrid& x, ForegroundKind kind, const ForegroundOptions& options = {});

struct DefectMaskOptions {
  double rotation_min_deg = 0.0;
  double rotation_max_deg = 360.0;
  double scale_min = 0.85;
  double scale_max = 1.15;
  bool allow_flip = false;
  int attempts_per_scale = 100;
  double shrink_factor = 0.9;
  std::size_t min_support = 4;
};

struct SynthesizedMask {
  BinaryMask mask;
  int seed_index = -1;
};

/// Picks a seed uniformly, applies a random rotation/scale, then places it
/// entirely inside the foreground.
SynthesizedMask synth_defect_mask(const std::vector<BinaryMask>& seeds, const BinaryMask& foreground,
                                  const DefectMaskOptions& options, Rng& rng);

/// Rasterizes `seed` rotated by `rotation_deg` and scaled by `scale` about its
/// bounding-box center; the result is cropped to its own bounding box.
BinaryMask transform_mask(const BinaryMask& seed, double rotation_deg, double scale, bool flip);

Trimap build_trimap(const BinaryMask& foreground, const BinaryMask& defect);

/// Inverse of build_trimap: (foreground, defect).
std::pair<BinaryMask, BinaryMask> split_trimap(const Trimap& trimap);

/// Disk dilation with radius ceil(H/H_z) followed by block max-pooling.
LatentMask dilate_downsample(const BinaryMask& defect, int latent_height, int latent_width);

/// Disk dilation of a binary mask (Euclidean radius, inclusive).
BinaryMask dilate(const BinaryMask& mask, int radius);
BinaryMask erode(const BinaryMask& mask, int radius);

/// Nearest-neighbour upsampling of a latent mask to pixel resolution.
BinaryMask upsample_nearest(const LatentMask& latent, int height, int width);

/// 4-connected components of the set pixels; labels are 1-based, 0 = unset.
std::vector<int> label_components(const BinaryMask& mask, int* count);

void write_trimap(const std::filesystem::path& path, const Trimap& trimap);
Trimap read_trimap(const std::filesystem::path& path);

}  // namespace adabldm::trimap

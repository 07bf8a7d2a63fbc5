#include "adabldm/trimap.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "adabldm/errors.hpp"

namespace adabldm::trimap {
namespace {

struct Box {
  int y0, y1, x0, x1;  // inclusive
  int height() const { return y1 - y0 + 1; }
  int width() const { return x1 - x0 + 1; }
};

Box bounding_box(const BinaryMask& m) {
  Box b{m.height, -1, m.width, -1};
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(y, x)) continue;
      b.y0 = std::min(b.y0, y);
      b.y1 = std::max(b.y1, y);
      b.x0 = std::min(b.x0, x);
      b.x1 = std::max(b.x1, x);
    }
  return b;
}

std::vector<std::pair<int, int>> disk_offsets(int radius) {
  std::vector<std::pair<int, int>> offs;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx)
      if (dy * dy + dx * dx <= radius * radius) offs.emplace_back(dy, dx);
  return offs;
}

int otsu_threshold(const std::array<double, 256>& hist, double total) {
  double sum_all = 0.0;
  for (int i = 0; i < 256; ++i) sum_all += i * hist[i];
  double w0 = 0.0, sum0 = 0.0, best = -1.0;
  int best_k = 0;
  for (int k = 0; k < 255; ++k) {
    w0 += hist[k];
    sum0 += k * hist[k];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0, m1 = (sum_all - sum0) / w1;
    const double between = w0 * w1 * (m0 - m1) * (m0 - m1);
    if (between > best) {
      best = between;
      best_k = k;
    }
  }
  return best_k;
}

}  // namespace

std::vector<int> label_components(const BinaryMask& mask, int* count) {
  std::vector<int> labels(mask.data.size(), 0);
  int next = 0;
  std::vector<int> queue;
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      const int idx = y * mask.width + x;
      if (!mask.data[idx] || labels[idx]) continue;
      labels[idx] = ++next;
      queue.assign(1, idx);
      for (std::size_t q = 0; q < queue.size(); ++q) {
        const int cy = queue[q] / mask.width, cx = queue[q] % mask.width;
        constexpr int dy[4] = {-1, 1, 0, 0};
        constexpr int dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ny = cy + dy[k], nx = cx + dx[k];
          if (!mask.in_bounds(ny, nx)) continue;
          const int nidx = ny * mask.width + nx;
          if (mask.data[nidx] && !labels[nidx]) {
            labels[nidx] = next;
            queue.push_back(nidx);
          }
        }
      }
    }
  if (count) *count = next;
  return labels;
}

BinaryMask dilate(const BinaryMask& mask, int radius) {
  if (radius <= 0) return mask;
  const auto offs = disk_offsets(radius);
  BinaryMask out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      for (auto [dy, dx] : offs) {
        if (mask.in_bounds(y + dy, x + dx)) out.at(y + dy, x + dx) = 1;
      }
    }
  return out;
}

BinaryMask erode(const BinaryMask& mask, int radius) {
  if (radius <= 0) return mask;
  const auto offs = disk_offsets(radius);
  BinaryMask out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(y, x)) continue;
      bool keep = true;
      for (auto [dy, dx] : offs) {
        // Outside the image counts as set so objects touching the border keep their edge.
        if (mask.in_bounds(y + dy, x + dx) && !mask.at(y + dy, x + dx)) {
          keep = false;
          break;
        }
      }
      out.at(y, x) = keep ? 1 : 0;
    }
  return out;
}

BinaryMask estimate_foreground(const ImageGrid& x, ForegroundKind kind, const ForegroundOptions& options) {
  ADABLDM_CHECK(x.channels >= 1 && x.height > 0 && x.width > 0, ParameterError, "estimate_foreground: empty image");
  if (kind == ForegroundKind::texture) return BinaryMask(x.height, x.width, 1);

  std::vector<int> gray(x.plane());
  std::array<double, 256> hist{};
  for (int y = 0; y < x.height; ++y)
    for (int xx = 0; xx < x.width; ++xx) {
      double g = 0.0;
      for (int c = 0; c < x.channels; ++c) g += x.at(c, y, xx);
      g /= x.channels;
      const int bin = static_cast<int>(std::lround(std::clamp(g, 0.0, 1.0) * 255.0));
      gray[static_cast<std::size_t>(y) * x.width + xx] = bin;
      hist[bin] += 1.0;
    }
  const auto [lo, hi] = std::minmax_element(gray.begin(), gray.end());
  if (*lo == *hi) {
    if (options.all_ones_fallback) return BinaryMask(x.height, x.width, 1);
    throw DegenerateForegroundError("estimate_foreground: constant image has no foreground");
  }
  const int k = otsu_threshold(hist, static_cast<double>(gray.size()));

  BinaryMask bright(x.height, x.width);
  for (std::size_t i = 0; i < gray.size(); ++i) bright.data[i] = gray[i] > k ? 1 : 0;

  // The class occupying less of the image border is taken as the object.
  std::size_t border_bright = 0, border_total = 0;
  for (int y = 0; y < x.height; ++y)
    for (int xx = 0; xx < x.width; ++xx) {
      if (y != 0 && xx != 0 && y != x.height - 1 && xx != x.width - 1) continue;
      ++border_total;
      border_bright += bright.at(y, xx);
    }
  BinaryMask fg = 2 * border_bright <= border_total ? bright : logical_not(bright);

  int n = 0;
  const auto labels = label_components(fg, &n);
  if (n == 0) {
    if (options.all_ones_fallback) return BinaryMask(x.height, x.width, 1);
    throw DegenerateForegroundError("estimate_foreground: no foreground component");
  }
  std::vector<std::size_t> sizes(n + 1, 0);
  for (int l : labels) sizes[l] += l > 0;
  const int largest = static_cast<int>(std::max_element(sizes.begin() + 1, sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < fg.data.size(); ++i) fg.data[i] = labels[i] == largest ? 1 : 0;
  return erode(dilate(fg, options.closing_radius), options.closing_radius);
}

BinaryMask transform_mask(const BinaryMask& seed, double rotation_deg, double scale, bool flip) {
  ADABLDM_CHECK(scale > 0.0, ParameterError, "transform_mask: scale must be positive");
  const Box b = bounding_box(seed);
  ADABLDM_CHECK(b.y1 >= 0, ParameterError, "transform_mask: empty seed");
  const double cy = 0.5 * (b.y0 + b.y1), cx = 0.5 * (b.x0 + b.x1);
  const double th = rotation_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  const double fx = flip ? -1.0 : 1.0;

  // Forward map of the pixel-edge corners gives the output extent.
  double miny = 1e300, maxy = -1e300, minx = 1e300, maxx = -1e300;
  for (double py : {b.y0 - 0.5, b.y1 + 0.5})
    for (double px : {b.x0 - 0.5, b.x1 + 0.5}) {
      const double dx = fx * (px - cx), dy = py - cy;
      const double ox = cx + scale * (ct * dx - st * dy);
      const double oy = cy + scale * (st * dx + ct * dy);
      miny = std::min(miny, oy);
      maxy = std::max(maxy, oy);
      minx = std::min(minx, ox);
      maxx = std::max(maxx, ox);
    }
  const int y0 = static_cast<int>(std::floor(miny + 0.5)), y1 = static_cast<int>(std::ceil(maxy - 0.5));
  const int x0 = static_cast<int>(std::floor(minx + 0.5)), x1 = static_cast<int>(std::ceil(maxx - 0.5));
  if (y1 < y0 || x1 < x0) return BinaryMask(0, 0);

  BinaryMask canvas(y1 - y0 + 1, x1 - x0 + 1);
  for (int qy = y0; qy <= y1; ++qy)
    for (int qx = x0; qx <= x1; ++qx) {
      // Inverse map back into the seed, nearest-neighbour sampling.
      const double dx = (qx - cx) / scale, dy = (qy - cy) / scale;
      const double sx = cx + fx * (ct * dx + st * dy);
      const double sy = cy + (-st * dx + ct * dy);
      const int iy = static_cast<int>(std::floor(sy + 0.5)), ix = static_cast<int>(std::floor(sx + 0.5));
      if (seed.in_bounds(iy, ix) && seed.at(iy, ix)) canvas.at(qy - y0, qx - x0) = 1;
    }
  const Box cb = bounding_box(canvas);
  if (cb.y1 < 0) return BinaryMask(0, 0);
  BinaryMask cropped(cb.height(), cb.width());
  for (int y = 0; y < cb.height(); ++y)
    for (int x = 0; x < cb.width(); ++x) cropped.at(y, x) = canvas.at(cb.y0 + y, cb.x0 + x);
  return cropped;
}

SynthesizedMask synth_defect_mask(const std::vector<BinaryMask>& seeds, const BinaryMask& foreground,
                                  const DefectMaskOptions& options, Rng& rng) {
  ADABLDM_CHECK(!seeds.empty(), ParameterError, "synth_defect_mask: empty seed list");
  for (const auto& s : seeds) {
    ADABLDM_CHECK(!s.none(), ParameterError, "synth_defect_mask: empty seed mask");
  }
  ADABLDM_CHECK(!foreground.none(), ParameterError, "synth_defect_mask: empty foreground");
  ADABLDM_CHECK(options.scale_min > 0.0 && options.scale_min <= options.scale_max, ParameterError,
                "synth_defect_mask: bad scale range");
  ADABLDM_CHECK(options.rotation_min_deg <= options.rotation_max_deg, ParameterError,
                "synth_defect_mask: bad rotation range");
  ADABLDM_CHECK(options.shrink_factor > 0.0 && options.shrink_factor < 1.0 && options.attempts_per_scale >= 1,
                ParameterError, "synth_defect_mask: bad fit parameters");

  const int index = uniform_int(rng, 0, static_cast<int>(seeds.size()) - 1);
  const double rotation = uniform(rng, options.rotation_min_deg, options.rotation_max_deg);
  double scale = uniform(rng, options.scale_min, options.scale_max);
  const bool flip = options.allow_flip && uniform(rng, 0.0, 1.0) < 0.5;

  const Box fb = bounding_box(foreground);
  for (bool shrunk = false;; shrunk = true) {
    const BinaryMask patch = transform_mask(seeds[index], rotation, scale, flip);
    // Small seeds may start below the support floor; only shrinking can fail.
    if (patch.none() || (shrunk && patch.count() < options.min_support)) {
      throw FitError("synth_defect_mask: mask cannot be fit inside the foreground");
    }
    if (patch.height <= fb.height() && patch.width <= fb.width()) {
      for (int attempt = 0; attempt < options.attempts_per_scale; ++attempt) {
        const int oy = uniform_int(rng, fb.y0, fb.y1 - patch.height + 1);
        const int ox = uniform_int(rng, fb.x0, fb.x1 - patch.width + 1);
        bool inside = true;
        for (int y = 0; y < patch.height && inside; ++y)
          for (int x = 0; x < patch.width; ++x) {
            if (patch.at(y, x) && !foreground.at(oy + y, ox + x)) {
              inside = false;
              break;
            }
          }
        if (!inside) continue;
        SynthesizedMask out{BinaryMask(foreground.height, foreground.width), index};
        for (int y = 0; y < patch.height; ++y)
          for (int x = 0; x < patch.width; ++x)
            if (patch.at(y, x)) out.mask.at(oy + y, ox + x) = 1;
        return out;
      }
    }
    scale *= options.shrink_factor;
  }
}

Trimap build_trimap(const BinaryMask& foreground, const BinaryMask& defect) {
  ADABLDM_CHECK(foreground.same_shape(defect), ParameterError, "build_trimap: mask shapes differ");
  Trimap t(foreground.height, foreground.width);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    if (defect.data[i]) {
      ADABLDM_CHECK(foreground.data[i], PreconditionError, "build_trimap: defect pixel outside the foreground");
      t.data[i] = kDefect;
    } else if (foreground.data[i]) {
      t.data[i] = kObject;
    } else {
      t.data[i] = kBackground;
    }
  }
  return t;
}

std::pair<BinaryMask, BinaryMask> split_trimap(const Trimap& trimap) {
  BinaryMask fg(trimap.height, trimap.width), defect(trimap.height, trimap.width);
  for (std::size_t i = 0; i < trimap.data.size(); ++i) {
    fg.data[i] = trimap.data[i] >= kObject ? 1 : 0;
    defect.data[i] = trimap.data[i] == kDefect ? 1 : 0;
  }
  return {fg, defect};
}

LatentMask dilate_downsample(const BinaryMask& defect, int latent_height, int latent_width) {
  ADABLDM_CHECK(latent_height > 0 && latent_width > 0 && defect.height % latent_height == 0 &&
                    defect.width % latent_width == 0,
                ParameterError, "dilate_downsample: image size must be divisible by latent size");
  const int fy = defect.height / latent_height, fx = defect.width / latent_width;
  const int radius = (defect.height + latent_height - 1) / latent_height;
  const BinaryMask grown = dilate(defect, radius);
  LatentMask out(latent_height, latent_width);
  for (int y = 0; y < defect.height; ++y)
    for (int x = 0; x < defect.width; ++x)
      if (grown.at(y, x)) out.at(y / fy, x / fx) = 1;
  return out;
}

BinaryMask upsample_nearest(const LatentMask& latent, int height, int width) {
  ADABLDM_CHECK(height % latent.height == 0 && width % latent.width == 0, ParameterError,
                "upsample_nearest: size not divisible");
  const int fy = height / latent.height, fx = width / latent.width;
  BinaryMask out(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out.at(y, x) = latent.at(y / fy, x / fx);
  return out;
}

void write_trimap(const std::filesystem::path& path, const Trimap& trimap) {
  std::vector<std::uint8_t> bytes(trimap.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = trimap.data[i];
    bytes[i] = v == kDefect ? 255 : (v == kObject ? 128 : 0);
  }
  png::write_gray8(path, trimap.height, trimap.width, bytes);
}

Trimap read_trimap(const std::filesystem::path& path) {
  const auto raw = png::read_raw8(path);
  Trimap t(raw.height, raw.width);
  for (std::size_t i = 0; i < t.data.size(); ++i) {
    const auto v = raw.pixels[i * raw.channels];
    ADABLDM_CHECK(v == 0 || v == 128 || v == 255, ParameterError,
                  "read_trimap: pixel values must be 0, 128 or 255");
    t.data[i] = v == 255 ? kDefect : (v == 128 ? kObject : kBackground);
  }
  return t;
}

}  // namespace adabldm::trimap

#include "adabldm/harness.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <numbers>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "adabldm/errors.hpp"

namespace adabldm::harness {

using nlohmann::json;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::string to_string(TextureFamily t) { return t == TextureFamily::stripes ? "stripes" : "noise"; }

std::string to_string(DefectFamily d) {
  switch (d) {
    case DefectFamily::blob: return "blob";
    case DefectFamily::scratch: return "scratch";
    case DefectFamily::spot: return "spot";
  }
  return "blob";
}

TextureFamily parse_texture(const std::string& s) {
  if (s == "stripes") return TextureFamily::stripes;
  if (s == "noise") return TextureFamily::noise;
  throw ParameterError("unknown texture family: " + s);
}

DefectFamily parse_defect(const std::string& s) {
  if (s == "blob") return DefectFamily::blob;
  if (s == "scratch") return DefectFamily::scratch;
  if (s == "spot") return DefectFamily::spot;
  throw ParameterError("unknown defect family: " + s);
}

void BenchmarkSpec::validate() const {
  ADABLDM_CHECK(!category.empty() && category.find('/') == std::string::npos, ParameterError,
                "benchmark: category must be a plain non-empty name");
  ADABLDM_CHECK(image_size >= 16 && image_size % 8 == 0, ParameterError,
                "benchmark: image size must be a multiple of 8 and at least 16");
  ADABLDM_CHECK(train_ok >= 1 && test_ok >= 0 && test_ng >= 1, ParameterError, "benchmark: bad image counts");
  ADABLDM_CHECK(seed_ng >= 1 && seed_ng <= 10, ParameterError, "benchmark: seed defect count must be in [1,10]");
  ADABLDM_CHECK(contrast_margin > 0.0 && contrast_margin <= 0.3, ParameterError,
                "benchmark: contrast margin must be in (0,0.3]");
}

// ---------------------------------------------------------------- rendering

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kPixelNoise = 0.015;

struct Style {
  double theta = 0.0;
  double period = 8.0;
  std::array<double, 3> low{}, high{};
  double background = 0.1;
};

Style draw_style(const BenchmarkSpec& spec, Rng& rng) {
  Style s;
  s.theta = uniform(rng, 0.0, std::numbers::pi);
  s.period = spec.texture == TextureFamily::stripes ? uniform(rng, 6.0, 10.0) : uniform(rng, 5.0, 9.0);
  for (int c = 0; c < 3; ++c) {
    s.low[c] = uniform(rng, 0.4, 0.55);
    s.high[c] = std::min(0.8, s.low[c] + uniform(rng, 0.15, 0.25));
  }
  s.background = uniform(rng, 0.05, 0.15);
  return s;
}

struct Render {
  ImageGrid image;
  BinaryMask foreground;  // analytic; the disk for object categories
  BinaryMask placeable;   // where defect pixels may go
};

Render render_clean(const BenchmarkSpec& spec, const Style& style, Rng& rng) {
  const int n = spec.image_size;
  std::vector<double> weight(static_cast<std::size_t>(n) * n);
  if (spec.texture == TextureFamily::stripes) {
    const double theta = style.theta + uniform(rng, -0.08, 0.08);
    const double freq = (1.0 + uniform(rng, -0.05, 0.05)) / style.period;
    const double phase = uniform(rng, 0.0, kTwoPi);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        weight[y * n + x] = 0.5 + 0.5 * std::sin(kTwoPi * freq * (x * std::cos(theta) + y * std::sin(theta)) + phase);
  } else {
    constexpr int kWaves = 8;
    std::array<double, kWaves> fx{}, fy{}, ph{};
    for (int k = 0; k < kWaves; ++k) {
      const double dir = uniform(rng, 0.0, kTwoPi);
      const double f = uniform(rng, 0.6, 1.4) / style.period;
      fx[k] = f * std::cos(dir);
      fy[k] = f * std::sin(dir);
      ph[k] = uniform(rng, 0.0, kTwoPi);
    }
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double s = 0.0;
        for (int k = 0; k < kWaves; ++k) s += std::sin(kTwoPi * (fx[k] * x + fy[k] * y) + ph[k]);
        weight[y * n + x] = std::clamp(0.5 + 0.25 * s / std::sqrt(kWaves / 2.0), 0.0, 1.0);
      }
  }

  Render r;
  r.image = ImageGrid(3, n, n);
  r.foreground = BinaryMask(n, n, 1);
  double cy = n / 2.0, cx = n / 2.0, radius = n;
  if (spec.object) {
    cy += uniform(rng, -2.0, 2.0);
    cx += uniform(rng, -2.0, 2.0);
    radius = n * uniform(rng, 0.32, 0.38);
  }
  const double gain = uniform(rng, -0.03, 0.03);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const bool inside = !spec.object || std::hypot(y + 0.5 - cy, x + 0.5 - cx) <= radius;
      r.foreground.at(y, x) = inside ? 1 : 0;
      for (int c = 0; c < 3; ++c) {
        const double w = weight[y * n + x];
        const double base = inside ? style.low[c] * (1.0 - w) + style.high[c] * w + gain : style.background;
        r.image.at(c, y, x) = std::clamp(base + kPixelNoise * normal(rng), 0.0, 1.0);
      }
    }
  r.placeable = spec.object ? trimap::erode(r.foreground, 2) : r.foreground;
  return r;
}

BinaryMask defect_shape(DefectFamily family, int n, double cy, double cx, Rng& rng) {
  BinaryMask m(n, n);
  if (family == DefectFamily::blob) {
    const double radius = uniform(rng, 3.5, 7.0);
    const double a1 = uniform(rng, 0.0, 0.3), a2 = uniform(rng, 0.0, 0.2);
    const double p1 = uniform(rng, 0.0, kTwoPi), p2 = uniform(rng, 0.0, kTwoPi);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double dy = y - cy, dx = x - cx;
        const double angle = std::atan2(dy, dx);
        const double limit = radius * (1.0 + a1 * std::sin(2 * angle + p1) + a2 * std::sin(3 * angle + p2));
        if (std::hypot(dy, dx) <= limit) m.at(y, x) = 1;
      }
  } else if (family == DefectFamily::scratch) {
    const double length = uniform(rng, 14.0, 28.0), dir = uniform(rng, 0.0, kTwoPi);
    const double bend = uniform(rng, -5.0, 5.0), half_width = uniform(rng, 0.8, 1.3);
    const double ux = std::cos(dir), uy = std::sin(dir);
    const double x0 = cx - ux * length / 2, y0 = cy - uy * length / 2;
    const double x2 = cx + ux * length / 2, y2 = cy + uy * length / 2;
    const double x1 = cx - uy * bend, y1 = cy + ux * bend;
    constexpr int kSamples = 64;
    std::vector<std::pair<double, double>> curve;
    for (int i = 0; i <= kSamples; ++i) {
      const double t = static_cast<double>(i) / kSamples, s = 1.0 - t;
      curve.emplace_back(s * s * y0 + 2 * s * t * y1 + t * t * y2, s * s * x0 + 2 * s * t * x1 + t * t * x2);
    }
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        for (const auto& [py, px] : curve)
          if (std::hypot(y - py, x - px) <= half_width) {
            m.at(y, x) = 1;
            break;
          }
  } else {
    const double radius = uniform(rng, 2.5, 4.5);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        if (std::hypot(y - cy, x - cx) <= radius) m.at(y, x) = 1;
  }
  return m;
}

bool contained(const BinaryMask& m, const BinaryMask& allowed) {
  for (std::size_t i = 0; i < m.data.size(); ++i)
    if (m.data[i] && !allowed.data[i]) return false;
  return true;
}

void apply_defect(DefectFamily family, const BinaryMask& m, ImageGrid& x, Rng& rng) {
  const double strength = family == DefectFamily::blob ? uniform(rng, 0.3, 0.45)
                          : family == DefectFamily::scratch ? uniform(rng, 0.75, 0.9)
                                                            : uniform(rng, 0.9, 1.0);
  const std::size_t plane = x.plane();
  for (std::size_t i = 0; i < plane; ++i) {
    if (!m.data[i]) continue;
    double* px[3] = {&x.data[i], &x.data[plane + i], &x.data[2 * plane + i]};
    switch (family) {
      case DefectFamily::blob:
        for (double* v : px) *v *= strength;
        break;
      case DefectFamily::scratch:
        for (double* v : px) *v += (1.0 - *v) * strength;
        break;
      case DefectFamily::spot:
        *px[0] += (1.0 - *px[0]) * 0.7 * strength;
        *px[1] *= 1.0 - 0.3 * strength;
        *px[2] *= 1.0 - 0.6 * strength;
        break;
    }
  }
}

/// One or two defects placed inside the placeable region; retries the shape on misfit.
BinaryMask draw_defects(const BenchmarkSpec& spec, const Render& r, Rng& rng) {
  const int n = spec.image_size;
  const int count = uniform(rng, 0.0, 1.0) < 0.25 ? 2 : 1;
  BinaryMask all(n, n);
  int placed = 0;
  for (int attempt = 0; attempt < 1000 && placed < count; ++attempt) {
    const BinaryMask m =
        defect_shape(spec.defect, n, uniform(rng, 0.0, n - 1.0), uniform(rng, 0.0, n - 1.0), rng);
    if (m.count() < 4 || !contained(m, r.placeable)) continue;
    for (std::size_t i = 0; i < m.data.size(); ++i) all.data[i] |= m.data[i];
    ++placed;
  }
  ADABLDM_CHECK(placed > 0, FitError, "benchmark: no defect fits inside the foreground");
  return all;
}

}  // namespace

ToyBenchmark make_toy_benchmark(const BenchmarkSpec& spec, Rng& rng) {
  spec.validate();
  ToyBenchmark b;
  b.spec = spec;
  const Style style = draw_style(spec, rng);
  for (int i = 0; i < spec.train_ok; ++i) b.train_ok.push_back(render_clean(spec, style, rng).image);

  auto defective = [&](ImageGrid& image, BinaryMask& mask, ImageGrid* clean) {
    Render r = render_clean(spec, style, rng);
    mask = draw_defects(spec, r, rng);
    if (clean) *clean = r.image;
    apply_defect(spec.defect, mask, r.image, rng);
    image = std::move(r.image);
  };
  b.seed_images.resize(spec.seed_ng);
  b.seed_masks.resize(spec.seed_ng);
  for (int i = 0; i < spec.seed_ng; ++i) defective(b.seed_images[i], b.seed_masks[i], nullptr);

  for (int i = 0; i < spec.test_ok; ++i) {
    b.test_images.push_back(render_clean(spec, style, rng).image);
    b.test_masks.emplace_back(spec.image_size, spec.image_size);
    b.test_clean.push_back(b.test_images.back());
  }
  for (int i = 0; i < spec.test_ng; ++i) {
    ImageGrid image, clean;
    BinaryMask mask;
    defective(image, mask, &clean);
    b.test_images.push_back(std::move(image));
    b.test_masks.push_back(std::move(mask));
    b.test_clean.push_back(std::move(clean));
  }
  return b;
}

// ---------------------------------------------------------------- persistence

std::string spec_to_json(const BenchmarkSpec& s) {
  json j{{"category", s.category},       {"texture", to_string(s.texture)}, {"defect", to_string(s.defect)},
         {"object", s.object},           {"image_size", s.image_size},      {"train_ok", s.train_ok},
         {"seed_ng", s.seed_ng},         {"test_ok", s.test_ok},            {"test_ng", s.test_ng},
         {"contrast_margin", s.contrast_margin}, {"seed", s.seed}};
  return j.dump();
}

BenchmarkSpec spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParameterError(std::string("benchmark spec: ") + e.what());
  }
  ADABLDM_CHECK(j.is_object(), ParameterError, "benchmark spec: expected an object");
  BenchmarkSpec s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "category") s.category = value.get<std::string>();
      else if (key == "texture") s.texture = parse_texture(value.get<std::string>());
      else if (key == "defect") s.defect = parse_defect(value.get<std::string>());
      else if (key == "object") s.object = value.get<bool>();
      else if (key == "image_size") s.image_size = value.get<int>();
      else if (key == "train_ok") s.train_ok = value.get<int>();
      else if (key == "seed_ng") s.seed_ng = value.get<int>();
      else if (key == "test_ok") s.test_ok = value.get<int>();
      else if (key == "test_ng") s.test_ng = value.get<int>();
      else if (key == "contrast_margin") s.contrast_margin = value.get<double>();
      else if (key == "seed") s.seed = value.get<std::uint64_t>();
      else throw ParameterError("benchmark spec: unknown key '" + key + "'");
    }
  } catch (const json::exception& e) {
    throw ParameterError(std::string("benchmark spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

std::string index_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03zu.png", i);
  return buf;
}

std::vector<std::filesystem::path> pngs_in(const std::filesystem::path& dir) {
  ADABLDM_CHECK(std::filesystem::is_directory(dir), StateError, "benchmark: missing directory " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

}  // namespace

std::filesystem::path save_benchmark(const std::filesystem::path& root, const ToyBenchmark& b) {
  namespace fs = std::filesystem;
  const fs::path dir = root / b.spec.category;
  for (const char* sub : {"train/good", "test/good", "test/defect", "ground_truth/defect", "seed/defect",
                          "seed/ground_truth"})
    fs::create_directories(dir / sub);
  for (std::size_t i = 0; i < b.train_ok.size(); ++i) png::write_image(dir / "train/good" / index_name(i), b.train_ok[i]);
  for (std::size_t i = 0; i < b.seed_images.size(); ++i) {
    png::write_image(dir / "seed/defect" / index_name(i), b.seed_images[i]);
    png::write_mask(dir / "seed/ground_truth" / index_name(i), b.seed_masks[i]);
  }
  std::size_t good = 0, bad = 0;
  for (std::size_t i = 0; i < b.test_images.size(); ++i) {
    if (b.test_masks[i].none()) {
      png::write_image(dir / "test/good" / index_name(good++), b.test_images[i]);
    } else {
      png::write_image(dir / "test/defect" / index_name(bad), b.test_images[i]);
      png::write_mask(dir / "ground_truth/defect" / index_name(bad++), b.test_masks[i]);
    }
  }
  std::ofstream(dir / "benchmark.json") << json::parse(spec_to_json(b.spec)).dump(2) << '\n';
  return dir;
}

ToyBenchmark load_benchmark(const std::filesystem::path& dir) {
  std::ifstream is(dir / "benchmark.json");
  ADABLDM_CHECK(is.good(), StateError, "benchmark: no benchmark.json in " + dir.string());
  std::stringstream text;
  text << is.rdbuf();
  ToyBenchmark b;
  b.spec = spec_from_json(text.str());
  for (const auto& f : pngs_in(dir / "train/good")) b.train_ok.push_back(png::read_image(f));
  for (const auto& f : pngs_in(dir / "seed/defect")) {
    b.seed_images.push_back(png::read_image(f));
    b.seed_masks.push_back(png::read_mask(dir / "seed/ground_truth" / f.filename()));
  }
  for (const auto& f : pngs_in(dir / "test/good")) {
    b.test_images.push_back(png::read_image(f));
    b.test_masks.emplace_back(b.test_images.back().height, b.test_images.back().width);
  }
  for (const auto& f : pngs_in(dir / "test/defect")) {
    b.test_images.push_back(png::read_image(f));
    b.test_masks.push_back(png::read_mask(dir / "ground_truth/defect" / f.filename()));
  }
  ADABLDM_CHECK(!b.train_ok.empty() && !b.seed_images.empty(), StateError, "benchmark: incomplete directory");
  return b;
}

// ---------------------------------------------------------------- patch features

void PatchFeatureSet::append(const PatchFeatureSet& other, std::size_t i) {
  ADABLDM_CHECK(dim == 0 || dim == other.dim, ParameterError, "feature set: dimension mismatch");
  dim = other.dim;
  features.insert(features.end(), other.row(i), other.row(i) + dim);
  if (!other.centers.empty()) centers.push_back(other.centers[i]);
  labels.push_back(other.labels[i]);
}

namespace {

constexpr int kRawDim = 25;
// Puts typical defect-vs-normal squared distances near 1/gamma for the default gamma.
constexpr double kFeatureScale = 100.0;

RowMat projection(int feature_dim) {
  Rng rng(derive_seed(0x9a7c4, "projection", static_cast<std::uint64_t>(feature_dim)));
  RowMat r(feature_dim, kRawDim);
  const double s = kFeatureScale / std::sqrt(static_cast<double>(feature_dim));
  for (int i = 0; i < feature_dim; ++i)
    for (int j = 0; j < kRawDim; ++j) r(i, j) = s * normal(rng);
  return r;
}

struct Planes {
  int h = 0, w = 0;
  std::vector<double> gray, gx, gy, lap;
};

Planes derived_planes(const ImageGrid& x) {
  Planes p{x.height, x.width, {}, {}, {}, {}};
  const auto idx = [&](int y, int xx) {
    return static_cast<std::size_t>(std::clamp(y, 0, p.h - 1)) * p.w + std::clamp(xx, 0, p.w - 1);
  };
  p.gray.resize(x.plane());
  for (int y = 0; y < p.h; ++y)
    for (int xx = 0; xx < p.w; ++xx)
      p.gray[idx(y, xx)] = (x.at(0, y, xx) + x.at(1, y, xx) + x.at(2, y, xx)) / 3.0;
  p.gx.resize(x.plane());
  p.gy.resize(x.plane());
  p.lap.resize(x.plane());
  for (int y = 0; y < p.h; ++y)
    for (int xx = 0; xx < p.w; ++xx) {
      const auto g = [&](int dy, int dx) { return p.gray[idx(y + dy, xx + dx)]; };
      p.gx[idx(y, xx)] = std::abs(g(0, 1) - g(0, -1)) / 2.0;
      p.gy[idx(y, xx)] = std::abs(g(1, 0) - g(-1, 0)) / 2.0;
      p.lap[idx(y, xx)] = std::abs(g(1, 0) + g(-1, 0) + g(0, 1) + g(0, -1) - 4.0 * g(0, 0));
    }
  return p;
}

/// Hand-crafted local statistics around (cy, cx) with replicated borders.
std::array<double, kRawDim> raw_descriptor(const ImageGrid& x, const Planes& p, int cy, int cx) {
  const auto clampy = [&](int y) { return std::clamp(y, 0, x.height - 1); };
  const auto clampx = [&](int xx) { return std::clamp(xx, 0, x.width - 1); };
  std::array<double, kRawDim> d{};
  int k = 0;
  std::array<double, 3> inner_mean{};
  for (int r : {2, 4}) {
    std::array<double, 3> sum{}, sq{};
    double gx = 0, gy = 0, lap = 0;
    const double count = (2.0 * r + 1) * (2.0 * r + 1);
    for (int y = cy - r; y <= cy + r; ++y)
      for (int xx = cx - r; xx <= cx + r; ++xx) {
        const int yy = clampy(y), xc = clampx(xx);
        for (int c = 0; c < 3; ++c) {
          const double v = x.at(c, yy, xc);
          sum[c] += v;
          sq[c] += v * v;
        }
        const std::size_t i = static_cast<std::size_t>(yy) * x.width + xc;
        gx += p.gx[i];
        gy += p.gy[i];
        lap += p.lap[i];
      }
    for (int c = 0; c < 3; ++c) {
      const double m = sum[c] / count;
      d[k++] = m;
      d[k++] = std::sqrt(std::max(0.0, sq[c] / count - m * m));
      if (r == 2) inner_mean[c] = m;
    }
    d[k++] = gx / count;
    d[k++] = gy / count;
    d[k++] = lap / count;
  }
  // Deviation of the center from its wider surroundings.
  constexpr int kRing = 8;
  std::array<double, 3> ring{};
  double ring_count = 0;
  for (int y = cy - kRing; y <= cy + kRing; ++y)
    for (int xx = cx - kRing; xx <= cx + kRing; ++xx) {
      if (std::max(std::abs(y - cy), std::abs(xx - cx)) <= 2) continue;
      for (int c = 0; c < 3; ++c) ring[c] += x.at(c, clampy(y), clampx(xx));
      ring_count += 1;
    }
  for (int c = 0; c < 3; ++c) d[k++] = inner_mean[c] - ring[c] / ring_count;
  // Quadrant layout at the outer scale.
  double total = 0;
  std::array<double, 4> quad{};
  for (int y = cy - 4; y <= cy + 4; ++y)
    for (int xx = cx - 4; xx <= cx + 4; ++xx) {
      if (y == cy || xx == cx) continue;
      const double g = p.gray[static_cast<std::size_t>(clampy(y)) * x.width + clampx(xx)];
      quad[(y > cy ? 2 : 0) + (xx > cx ? 1 : 0)] += g / 16.0;
      total += g / 64.0;
    }
  for (double q : quad) d[k++] = q - total;
  return d;
}

}  // namespace

PatchFeatureSet extract_patch_features(const ImageGrid& x, int stride, int feature_dim, const BinaryMask* mask) {
  ADABLDM_CHECK(stride >= 1 && x.height % stride == 0 && x.width % stride == 0, ParameterError,
                "extract_patch_features: stride must divide the image size");
  ADABLDM_CHECK(feature_dim >= 1, ParameterError, "extract_patch_features: feature dimension must be positive");
  ADABLDM_CHECK(x.channels == 3, ParameterError, "extract_patch_features: expected an RGB image");
  ADABLDM_CHECK(!mask || (mask->height == x.height && mask->width == x.width), ParameterError,
                "extract_patch_features: mask not aligned with the image");
  PatchFeatureSet set;
  set.dim = feature_dim;
  set.rows = x.height / stride;
  set.cols = x.width / stride;
  set.stride = stride;
  const int n = set.rows * set.cols;
  const Planes planes = derived_planes(x);
  RowMat raw(n, kRawDim);
  for (int i = 0; i < set.rows; ++i)
    for (int j = 0; j < set.cols; ++j) {
      const int cy = i * stride + stride / 2, cx = j * stride + stride / 2;
      const auto d = raw_descriptor(x, planes, cy, cx);
      for (int k = 0; k < kRawDim; ++k) raw(i * set.cols + j, k) = d[k];
      set.centers.emplace_back(cy, cx);
      set.labels.push_back(mask && mask->at(cy, cx) ? 1 : -1);
    }
  const RowMat f = raw * projection(feature_dim).transpose();
  set.features.assign(f.data(), f.data() + f.size());
  return set;
}

// ---------------------------------------------------------------- SVM

PatchClassifier::PatchClassifier(int dim, double gamma, std::vector<double> support, std::vector<double> coef,
                                 double rho, long iterations)
    : dim_(dim), gamma_(gamma), support_(std::move(support)), coef_(std::move(coef)), rho_(rho),
      iterations_(iterations) {
  norms_.resize(coef_.size());
  for (std::size_t i = 0; i < coef_.size(); ++i) {
    double s = 0.0;
    for (int k = 0; k < dim_; ++k) s += support_[i * dim_ + k] * support_[i * dim_ + k];
    norms_[i] = s;
  }
}

double PatchClassifier::decision(const double* f) const {
  double fn = 0.0;
  for (int k = 0; k < dim_; ++k) fn += f[k] * f[k];
  double s = 0.0;
  for (std::size_t i = 0; i < coef_.size(); ++i) {
    double dot = 0.0;
    for (int k = 0; k < dim_; ++k) dot += support_[i * dim_ + k] * f[k];
    s += coef_[i] * std::exp(-gamma_ * std::max(0.0, norms_[i] + fn - 2.0 * dot));
  }
  return s - rho_;
}

std::vector<double> PatchClassifier::decision(const PatchFeatureSet& set) const {
  ADABLDM_CHECK(set.dim == dim_, ParameterError, "classifier: feature dimension mismatch");
  const std::size_t m = set.size(), nsv = coef_.size();
  std::vector<double> out(m, -rho_);
  if (nsv == 0 || m == 0) return out;
  // Owned Eigen matrices keep the product independent of the callers' buffer alignment.
  const RowMat sv = Eigen::Map<const RowMat>(support_.data(), static_cast<Eigen::Index>(nsv), dim_);
  const RowMat f = Eigen::Map<const RowMat>(set.features.data(), static_cast<Eigen::Index>(m), dim_);
  const RowMat dots = sv * f.transpose();
  const Eigen::VectorXd fn = f.rowwise().squaredNorm();
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < nsv; ++i)
      s += coef_[i] * std::exp(-gamma_ * std::max(0.0, norms_[i] + fn(j) - 2.0 * dots(i, j)));
    out[j] = s - rho_;
  }
  return out;
}

PatchClassifier train_patch_classifier(const PatchFeatureSet& set, double gamma, double C, const SvmOptions& options) {
  const std::size_t n = set.size();
  ADABLDM_CHECK(gamma > 0.0 && C > 0.0, ParameterError, "svm: gamma and C must be positive");
  ADABLDM_CHECK(set.labels.size() == n, ParameterError, "svm: one label per feature vector required");
  bool pos = false, neg = false;
  for (int y : set.labels) {
    ADABLDM_CHECK(y == 1 || y == -1, ParameterError, "svm: labels must be +1 or -1");
    (y > 0 ? pos : neg) = true;
  }
  ADABLDM_CHECK(pos && neg, ParameterError, "svm: both classes must be present");

  const RowMat x = Eigen::Map<const RowMat>(set.features.data(), static_cast<Eigen::Index>(n), set.dim);
  const Eigen::VectorXd norms = x.rowwise().squaredNorm();
  std::vector<std::vector<double>> rows(n);
  // Row i of Q = y_i y_j K(x_i, x_j), computed on first use.
  auto q_row = [&](std::size_t i) -> const std::vector<double>& {
    auto& r = rows[i];
    if (r.empty()) {
      const Eigen::VectorXd dots = x * x.row(static_cast<Eigen::Index>(i)).transpose();
      r.resize(n);
      for (std::size_t j = 0; j < n; ++j)
        r[j] = set.labels[i] * set.labels[j] *
               std::exp(-gamma * std::max(0.0, norms(i) + norms(j) - 2.0 * dots(static_cast<Eigen::Index>(j))));
    }
    return r;
  };
  const std::vector<int>& y = set.labels;
  std::vector<double> alpha(n, 0.0), grad(n, -1.0);
  constexpr double kTau = 1e-12;
  const auto upper = [&](std::size_t t) { return alpha[t] >= C; };
  const auto lower = [&](std::size_t t) { return alpha[t] <= 0.0; };

  long iter = 0;
  for (; iter < options.max_iterations; ++iter) {
    double gmax = -std::numeric_limits<double>::infinity(), gmax2 = gmax;
    std::ptrdiff_t i = -1, j = -1;
    for (std::size_t t = 0; t < n; ++t) {
      if (y[t] == 1 ? !upper(t) : !lower(t)) {
        const double v = -y[t] * grad[t];
        if (v >= gmax) {
          gmax = v;
          i = static_cast<std::ptrdiff_t>(t);
        }
      }
    }
    if (i < 0) break;
    const auto& qi = q_row(static_cast<std::size_t>(i));
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
      if (!(y[t] == 1 ? !lower(t) : !upper(t))) continue;
      const double v = -y[t] * grad[t];
      gmax2 = std::max(gmax2, -v);
      const double diff = gmax - v;
      if (diff > 0) {
        const double a = 2.0 - 2.0 * y[i] * y[t] * qi[t];
        const double obj = -(diff * diff) / (a > 0 ? a : kTau);
        if (obj <= best) {
          best = obj;
          j = static_cast<std::ptrdiff_t>(t);
        }
      }
    }
    if (gmax + gmax2 < options.tolerance || j < 0) break;

    const auto& qj = q_row(static_cast<std::size_t>(j));
    const double ai = alpha[i], aj = alpha[j];
    if (y[i] != y[j]) {
      double quad = 2.0 + 2.0 * qi[j];
      if (quad <= 0) quad = kTau;
      const double delta = (-grad[i] - grad[j]) / quad;
      const double diff = alpha[i] - alpha[j];
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0) {
        if (alpha[j] < 0) {
          alpha[j] = 0;
          alpha[i] = diff;
        }
      } else if (alpha[i] < 0) {
        alpha[i] = 0;
        alpha[j] = -diff;
      }
      if (diff > 0) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = C - diff;
        }
      } else if (alpha[j] > C) {
        alpha[j] = C;
        alpha[i] = C + diff;
      }
    } else {
      double quad = 2.0 - 2.0 * qi[j];
      if (quad <= 0) quad = kTau;
      const double delta = (grad[i] - grad[j]) / quad;
      const double sum = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > C) {
        if (alpha[i] > C) {
          alpha[i] = C;
          alpha[j] = sum - C;
        }
        if (alpha[j] > C) {
          alpha[j] = C;
          alpha[i] = sum - C;
        }
      } else {
        if (alpha[j] < 0) {
          alpha[j] = 0;
          alpha[i] = sum;
        }
        if (alpha[i] < 0) {
          alpha[i] = 0;
          alpha[j] = sum;
        }
      }
    }
    const double di = alpha[i] - ai, dj = alpha[j] - aj;
    for (std::size_t t = 0; t < n; ++t) grad[t] += qi[t] * di + qj[t] * dj;
  }

  double ub = std::numeric_limits<double>::infinity(), lb = -ub, free_sum = 0.0;
  int free_count = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * grad[t];
    if (upper(t)) {
      if (y[t] == -1) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (lower(t)) {
      if (y[t] == 1) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      ++free_count;
      free_sum += yg;
    }
  }
  const double rho = free_count > 0 ? free_sum / free_count : (ub + lb) / 2.0;

  std::vector<double> support, coef;
  for (std::size_t t = 0; t < n; ++t) {
    if (alpha[t] <= 0.0) continue;
    support.insert(support.end(), set.row(t), set.row(t) + set.dim);
    coef.push_back(alpha[t] * y[t]);
  }
  return PatchClassifier(set.dim, gamma, std::move(support), std::move(coef), rho, iter);
}

metrics::ScoreMap upsample_scores(const std::vector<double>& s, int rows, int cols, int stride, int height,
                                  int width) {
  ADABLDM_CHECK(rows >= 1 && cols >= 1 && s.size() == static_cast<std::size_t>(rows) * cols, ParameterError,
                "upsample_scores: score grid does not match its shape");
  metrics::ScoreMap out(height, width);
  const double offset = stride / 2;
  auto axis = [&](int p, int n, int& i0, int& i1, double& w) {
    const double f = std::clamp((p - offset) / stride, 0.0, static_cast<double>(n - 1));
    i0 = static_cast<int>(std::floor(f));
    i1 = std::min(i0 + 1, n - 1);
    w = f - i0;
  };
  for (int y = 0; y < height; ++y) {
    int y0, y1;
    double wy;
    axis(y, rows, y0, y1, wy);
    for (int x = 0; x < width; ++x) {
      int x0, x1;
      double wx;
      axis(x, cols, x0, x1, wx);
      const double top = s[y0 * cols + x0] * (1 - wx) + s[y0 * cols + x1] * wx;
      const double bottom = s[y1 * cols + x0] * (1 - wx) + s[y1 * cols + x1] * wx;
      out.at(y, x) = wy == 0.0 ? top : top * (1 - wy) + bottom * wy;
    }
  }
  return out;
}

metrics::ScoreMap score_image(const PatchClassifier& clf, const ImageGrid& x, int stride, int feature_dim) {
  const PatchFeatureSet f = extract_patch_features(x, stride, feature_dim);
  return upsample_scores(clf.decision(f), f.rows, f.cols, stride, x.height, x.width);
}

// ---------------------------------------------------------------- trials

void TrialConfig::validate() const {
  ADABLDM_CHECK(n_images >= 1 && n_pos >= 1 && n_neg >= 1 && n_trials >= 1, ParameterError,
                "trials: counts must be positive");
  ADABLDM_CHECK(gamma > 0.0 && C > 0.0, ParameterError, "trials: gamma and C must be positive");
  ADABLDM_CHECK(stride >= 1 && feature_dim >= 1 && workers >= 1, ParameterError,
                "trials: stride, feature dimension and workers must be positive");
  ADABLDM_CHECK(k >= 1 && k <= 100, ParameterError, "trials: k must be a percentage");
}

std::string TrialConfig::scaling_json() const {
  json j{{"n_images", n_images},
         {"n_pos", n_pos},
         {"n_neg", n_neg},
         {"n_trials", n_trials},
         {"reference", {{"n_images", 100}, {"n_pos", 5000}, {"n_neg", 5000}, {"n_trials", 10}}},
         {"scale", {{"n_images", n_images / 100.0},
                    {"n_pos", n_pos / 5000.0},
                    {"n_neg", n_neg / 5000.0},
                    {"n_trials", n_trials / 10.0}}}};
  return j.dump();
}

namespace {

/// The first `k` entries of a seeded permutation of [0, n).
std::vector<std::size_t> choose(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  k = std::min(k, n);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = i + static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(n - i - 1)));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(k);
  return idx;
}

std::vector<metrics::CurvePoint> thin_curve(const std::vector<metrics::CurvePoint>& full, std::size_t points) {
  if (full.size() <= points) return full;
  std::vector<metrics::CurvePoint> out;
  for (std::size_t i = 0; i < points; ++i) out.push_back(full[i * (full.size() - 1) / (points - 1)]);
  return out;
}

metrics::MetricScores one_trial(const std::vector<PatchFeatureSet>& test_features,
                                const std::vector<metrics::GroundTruth>& truths, const std::vector<DefectSample>& training,
                                const TrialConfig& cfg, int trial, std::vector<metrics::CurvePoint>* curve) {
  Rng rng(derive_seed(cfg.seed, "trial", static_cast<std::uint64_t>(trial)));
  PatchFeatureSet pool;
  for (std::size_t i : choose(training.size(), cfg.n_images, rng)) {
    const PatchFeatureSet f =
        extract_patch_features(training[i].image, cfg.stride, cfg.feature_dim, &training[i].mask);
    for (std::size_t p = 0; p < f.size(); ++p) pool.append(f, p);
  }
  std::vector<std::size_t> positives, negatives;
  for (std::size_t p = 0; p < pool.size(); ++p) (pool.labels[p] > 0 ? positives : negatives).push_back(p);
  PatchFeatureSet train;
  for (std::size_t p : choose(positives.size(), cfg.n_pos, rng)) train.append(pool, positives[p]);
  for (std::size_t p : choose(negatives.size(), cfg.n_neg, rng)) train.append(pool, negatives[p]);
  const PatchClassifier clf = train_patch_classifier(train, cfg.gamma, cfg.C);

  std::vector<metrics::Sample> samples;
  for (std::size_t i = 0; i < test_features.size(); ++i) {
    const auto& f = test_features[i];
    samples.push_back({upsample_scores(clf.decision(f), f.rows, f.cols, f.stride, truths[i].height(),
                                       truths[i].width()),
                       truths[i]});
  }
  if (curve) *curve = thin_curve(metrics::threshold_sweep(samples), kCurvePoints);
  return metrics::evaluate(samples, cfg.k);
}

}  // namespace

metrics::MetricsReport run_trials(const ToyBenchmark& bench, const std::vector<DefectSample>& training,
                                  const TrialConfig& cfg, std::vector<metrics::CurvePoint>* curve) {
  cfg.validate();
  ADABLDM_CHECK(!training.empty(), ParameterError, "run_trials: empty training set");
  ADABLDM_CHECK(!bench.test_images.empty() && bench.test_images.size() == bench.test_masks.size(), ParameterError,
                "run_trials: benchmark has no aligned test set");
  std::vector<PatchFeatureSet> test_features;
  std::vector<metrics::GroundTruth> truths;
  for (std::size_t i = 0; i < bench.test_images.size(); ++i) {
    test_features.push_back(extract_patch_features(bench.test_images[i], cfg.stride, cfg.feature_dim));
    truths.emplace_back(bench.test_masks[i]);
  }
  std::vector<metrics::MetricScores> scores(cfg.n_trials);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto work = [&](int worker) {
    for (int t = worker; t < cfg.n_trials; t += cfg.workers) {
      try {
        scores[t] = one_trial(test_features, truths, training, cfg, t, t == 0 ? curve : nullptr);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (cfg.workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < std::min(cfg.workers, cfg.n_trials); ++w) pool.emplace_back(work, w);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return metrics::aggregate(std::move(scores), cfg.k);
}

// ---------------------------------------------------------------- baselines

namespace {

DefectSample package(const ToyBenchmark& bench, ImageGrid image, BinaryMask mask, std::string source,
                     std::uint64_t seed) {
  BinaryMask fg = trimap::estimate_foreground(image, bench.foreground_kind(), {.all_ones_fallback = true});
  for (std::size_t i = 0; i < fg.data.size(); ++i) fg.data[i] |= mask.data[i];
  DefectSample s;
  s.trimap = trimap::build_trimap(fg, mask);
  s.image = std::move(image);
  s.mask = std::move(mask);
  s.prompt = {0, 1, false};
  s.source_id = std::move(source);
  s.seed = seed;
  return s;
}

}  // namespace

std::vector<DefectSample> genuine_samples(const ToyBenchmark& bench) {
  std::vector<DefectSample> out;
  for (std::size_t i = 0; i < bench.seed_images.size(); ++i)
    out.push_back(package(bench, bench.seed_images[i], bench.seed_masks[i], "seed/" + index_name(i), i));
  return out;
}

std::vector<DefectSample> cut_paste_samples(const ToyBenchmark& bench, int count, Rng& rng) {
  ADABLDM_CHECK(count >= 0, ParameterError, "cut_paste: negative count");
  ADABLDM_CHECK(!bench.train_ok.empty() && !bench.seed_images.empty(), ParameterError,
                "cut_paste: needs defect-free images and seeds");
  std::vector<DefectSample> out;
  for (int n = 0; n < count; ++n) {
    for (int attempt = 0; attempt < 100; ++attempt) {
      const std::size_t ok = uniform_int(rng, 0, static_cast<int>(bench.train_ok.size()) - 1);
      const std::size_t sd = uniform_int(rng, 0, static_cast<int>(bench.seed_images.size()) - 1);
      const BinaryMask& sm = bench.seed_masks[sd];
      int y0 = sm.height, y1 = -1, x0 = sm.width, x1 = -1;
      for (int y = 0; y < sm.height; ++y)
        for (int x = 0; x < sm.width; ++x)
          if (sm.at(y, x)) {
            y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
          }
      if (y1 < 0) continue;
      const int h = y1 - y0 + 1, w = x1 - x0 + 1;
      const int k = uniform_int(rng, 0, 7);
      const bool swap = k % 2 == 1;
      const int th = swap ? w : h, tw = swap ? h : w;
      const auto& fg_source = bench.train_ok[ok];
      const BinaryMask fg =
          trimap::estimate_foreground(fg_source, bench.foreground_kind(), {.all_ones_fallback = true});
      if (th > fg.height || tw > fg.width) continue;
      const int oy = uniform_int(rng, 0, fg.height - th), ox = uniform_int(rng, 0, fg.width - tw);
      // Maps crop coordinates to the transformed crop.
      auto place = [&](int y, int x) {
        if (k >= 4) x = w - 1 - x;
        int cy = y, cx = x, ch = h, cw = w;
        for (int r = 0; r < k % 4; ++r) {
          const int ny = cx, nx = ch - 1 - cy;
          cy = ny, cx = nx;
          std::swap(ch, cw);
        }
        return std::pair{oy + cy, ox + cx};
      };
      bool fits = true;
      for (int y = 0; y < h && fits; ++y)
        for (int x = 0; x < w && fits; ++x)
          if (sm.at(y0 + y, x0 + x)) {
            const auto [py, px] = place(y, x);
            fits = fg.at(py, px) != 0;
          }
      if (!fits) continue;
      ImageGrid image = fg_source;
      BinaryMask mask(fg.height, fg.width);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          if (sm.at(y0 + y, x0 + x)) {
            const auto [py, px] = place(y, x);
            mask.at(py, px) = 1;
            for (int c = 0; c < 3; ++c) image.at(c, py, px) = bench.seed_images[sd].at(c, y0 + y, x0 + x);
          }
      out.push_back(package(bench, std::move(image), std::move(mask), "train/good/" + index_name(ok), n));
      break;
    }
  }
  return out;
}

Comparison run_comparison(const ToyBenchmark& bench, const std::vector<DefectSample>& generated,
                          const TrialConfig& cfg, int cut_paste_count) {
  Comparison c;
  c.category = bench.spec.category;
  c.config = cfg;
  Rng rng(derive_seed(cfg.seed, "cut_paste"));
  c.genuine = run_trials(bench, genuine_samples(bench), cfg, &c.curves[0]);
  c.cut_paste = run_trials(bench, cut_paste_samples(bench, cut_paste_count, rng), cfg, &c.curves[1]);
  c.generated = run_trials(bench, generated, cfg, &c.curves[2]);
  return c;
}

std::string Comparison::to_json(int indent) const {
  json j{{"category", category},
         {"protocol", json::parse(config.scaling_json())},
         {"gamma", config.gamma},
         {"C", config.C},
         {"stride", config.stride},
         {"feature_dim", config.feature_dim},
         {"seed", config.seed},
         {"genuine", json::parse(genuine.to_json(-1))},
         {"cut_paste", json::parse(cut_paste.to_json(-1))},
         {"adabldm", json::parse(generated.to_json(-1))}};
  const char* names[3] = {"genuine", "cut_paste", "adabldm"};
  for (int m = 0; m < 3; ++m) {
    json c{{"fpr", json::array()}, {"recall", json::array()}, {"precision", json::array()},
           {"instance_recall", json::array()}};
    for (const auto& p : curves[m]) {
      c["fpr"].push_back(p.fpr);
      c["recall"].push_back(p.recall);
      c["precision"].push_back(p.precision);
      c["instance_recall"].push_back(p.instance_recall);
    }
    j["curves"][names[m]] = std::move(c);
  }
  return j.dump(indent);
}

std::string comparison_table(const std::vector<Comparison>& rows) {
  auto cell = [](const metrics::MetricScores& m) {
    char buf[96];
    std::snprintf(buf, sizeof buf, "%.2f/%.2f/%.2f/%.2f/%.2f", 100 * m.pixel_auc, 100 * m.pro, 100 * m.ap,
                  100 * m.iap, 100 * m.iap_at_k);
    return std::string(buf);
  };
  const int k = rows.empty() ? metrics::kDefaultRecallPercent : rows.front().config.k;
  std::ostringstream os;
  os << "Pixel-AUC/PRO/AP/IAP/IAP" << k << " (percent, mean over trials)\n";
  os << "| Category | Genuine | Cut-paste | AdaBLDM |\n|---|---|---|---|\n";
  metrics::MetricScores sum[3];
  auto add = [](metrics::MetricScores& a, const metrics::MetricScores& b) {
    a.pixel_auc += b.pixel_auc, a.pro += b.pro, a.ap += b.ap, a.iap += b.iap, a.iap_at_k += b.iap_at_k;
  };
  for (const auto& r : rows) {
    os << "| " << r.category << " | " << cell(r.genuine.mean) << " | " << cell(r.cut_paste.mean) << " | "
       << cell(r.generated.mean) << " |\n";
    add(sum[0], r.genuine.mean);
    add(sum[1], r.cut_paste.mean);
    add(sum[2], r.generated.mean);
  }
  if (!rows.empty()) {
    const double n = static_cast<double>(rows.size());
    for (auto& s : sum) s = {s.pixel_auc / n, s.pro / n, s.ap / n, s.iap / n, s.iap_at_k / n};
    os << "| Average | " << cell(sum[0]) << " | " << cell(sum[1]) << " | " << cell(sum[2]) << " |\n";
  }
  return os.str();
}

}  // namespace adabldm::harness

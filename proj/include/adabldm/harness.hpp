#pragma once

// Evaluation loop: procedural toy benchmarks, patch descriptors, an RBF
// kernel SVM patch classifier and multi-trial scoring of training sets.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "adabldm/metrics.hpp"
#include "adabldm/pipeline.hpp"

namespace adabldm::harness {

using pipeline::DefectSample;

// ---------------------------------------------------------------- toy benchmark

enum class TextureFamily { stripes, noise };
enum class DefectFamily { blob, scratch, spot };

std::string to_string(TextureFamily t);
std::string to_string(DefectFamily d);
TextureFamily parse_texture(const std::string& s);
DefectFamily parse_defect(const std::string& s);

struct BenchmarkSpec {
  std::string category = "stripes_blob";
  TextureFamily texture = TextureFamily::stripes;
  DefectFamily defect = DefectFamily::blob;
  /// Textured disk on a flat background instead of a full-frame texture.
  bool object = false;
  int image_size = 64;
  int train_ok = 60;
  int seed_ng = 10;
  int test_ok = 20;
  int test_ng = 30;
  /// Minimum per-pixel change (max over channels) a defect applies to the clean render.
  double contrast_margin = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ToyBenchmark {
  BenchmarkSpec spec;
  std::vector<ImageGrid> train_ok;
  std::vector<ImageGrid> seed_images;
  std::vector<BinaryMask> seed_masks;
  /// Good images first, then defective ones; good images carry empty masks.
  std::vector<ImageGrid> test_images;
  std::vector<BinaryMask> test_masks;
  /// Defect-free render behind each test image. Not persisted.
  std::vector<ImageGrid> test_clean;

  trimap::ForegroundKind foreground_kind() const {
    return spec.object ? trimap::ForegroundKind::object : trimap::ForegroundKind::texture;
  }
};

ToyBenchmark make_toy_benchmark(const BenchmarkSpec& spec, Rng& rng);

/// MVTec-style layout under `root/<category>`; returns the category directory.
std::filesystem::path save_benchmark(const std::filesystem::path& root, const ToyBenchmark& bench);
/// Reads a category directory written by save_benchmark. Throws StateError when missing.
ToyBenchmark load_benchmark(const std::filesystem::path& category_dir);

std::string spec_to_json(const BenchmarkSpec& spec);
BenchmarkSpec spec_from_json(const std::string& json);

// ---------------------------------------------------------------- patch features

inline constexpr int kDefaultStride = 4;
inline constexpr int kDefaultFeatureDim = 128;
inline constexpr double kDefaultGamma = 1e-4;
inline constexpr double kDefaultC = 1.0;

/// Row-major feature matrix with optional patch centers and labels (+1 defect, -1 normal).
struct PatchFeatureSet {
  int dim = 0;
  int rows = 0;  // patch grid, 0 for pooled sets
  int cols = 0;
  int stride = 0;
  std::vector<double> features;
  std::vector<std::pair<int, int>> centers;
  std::vector<int> labels;

  std::size_t size() const { return dim == 0 ? 0 : features.size() / static_cast<std::size_t>(dim); }
  const double* row(std::size_t i) const { return features.data() + i * static_cast<std::size_t>(dim); }
  void append(const PatchFeatureSet& other, std::size_t i);
};

/// Patch centers at (i*stride + stride/2, j*stride + stride/2). Labels come
/// from `mask` at the centers when given, otherwise all -1.
PatchFeatureSet extract_patch_features(const ImageGrid& x, int stride = kDefaultStride,
                                       int feature_dim = kDefaultFeatureDim, const BinaryMask* mask = nullptr);

// ---------------------------------------------------------------- classifier

struct SvmOptions {
  double tolerance = 1e-3;
  long max_iterations = 10'000'000;
};

class PatchClassifier {
 public:
  PatchClassifier() = default;
  PatchClassifier(int dim, double gamma, std::vector<double> support, std::vector<double> coef, double rho,
                  long iterations);

  /// Signed distance-like score; positive means defect.
  double decision(const double* feature) const;
  std::vector<double> decision(const PatchFeatureSet& set) const;

  int dim() const { return dim_; }
  std::size_t support_count() const { return coef_.size(); }
  /// Support vectors (n_sv x dim) and their alpha_i * y_i.
  const std::vector<double>& support_vectors() const { return support_; }
  const std::vector<double>& coefficients() const { return coef_; }
  double rho() const { return rho_; }
  long iterations() const { return iterations_; }

 private:
  int dim_ = 0;
  double gamma_ = 0.0;
  std::vector<double> support_;  // n_sv x dim
  std::vector<double> norms_;
  std::vector<double> coef_;     // alpha_i * y_i
  double rho_ = 0.0;
  long iterations_ = 0;
};

/// Soft-margin C-SVM with an RBF kernel, solved by SMO with second-order working-set selection.
PatchClassifier train_patch_classifier(const PatchFeatureSet& set, double gamma = kDefaultGamma, double C = kDefaultC,
                                       const SvmOptions& options = {});

/// Bilinear interpolation of a patch-score grid whose samples sit at the patch centers.
metrics::ScoreMap upsample_scores(const std::vector<double>& patch_scores, int rows, int cols, int stride, int height,
                                  int width);
metrics::ScoreMap score_image(const PatchClassifier& clf, const ImageGrid& x, int stride = kDefaultStride,
                              int feature_dim = kDefaultFeatureDim);

// ---------------------------------------------------------------- trials

struct TrialConfig {
  int n_images = 20;
  int n_pos = 500;
  int n_neg = 500;
  int n_trials = 5;
  double gamma = kDefaultGamma;
  double C = kDefaultC;
  int stride = kDefaultStride;
  int feature_dim = kDefaultFeatureDim;
  int k = metrics::kDefaultRecallPercent;
  std::uint64_t seed = 0;
  int workers = 1;

  void validate() const;
  /// Ratio of these counts to the full-scale protocol (100 images, 5000+5000 patches, 10 trials).
  std::string scaling_json() const;
};

inline constexpr std::size_t kCurvePoints = 200;

/// Per-trial scores; trial t draws from derive_seed(cfg.seed, "trial", t).
/// `curve` receives the first trial's threshold sweep thinned to kCurvePoints.
metrics::MetricsReport run_trials(const ToyBenchmark& bench, const std::vector<DefectSample>& training,
                                  const TrialConfig& cfg, std::vector<metrics::CurvePoint>* curve = nullptr);

/// The genuine defective seeds as training samples.
std::vector<DefectSample> genuine_samples(const ToyBenchmark& bench);

/// Seed defect crops pasted at random positions onto defect-free training images.
std::vector<DefectSample> cut_paste_samples(const ToyBenchmark& bench, int count, Rng& rng);

struct Comparison {
  std::string category;
  metrics::MetricsReport genuine;
  metrics::MetricsReport cut_paste;
  metrics::MetricsReport generated;
  /// First-trial sweeps for genuine, cut-paste and generated.
  std::vector<metrics::CurvePoint> curves[3];
  TrialConfig config;

  std::string to_json(int indent = 2) const;
};

/// Scores the generated set together with the genuine-only and cut-paste baselines.
Comparison run_comparison(const ToyBenchmark& bench, const std::vector<DefectSample>& generated,
                          const TrialConfig& cfg, int cut_paste_count);

/// One row per category plus an average row; cells are
/// Pixel-AUC/PRO/AP/IAP/IAP@k in percent with two decimals.
std::string comparison_table(const std::vector<Comparison>& rows);

}  // namespace adabldm::harness

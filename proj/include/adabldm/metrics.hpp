#pragma once

// Pixel- and instance-level anomaly localization metrics. Every metric works on
// a list of (score map, ground truth) pairs so connected components stay per
// image; single-image overloads wrap the list form.

#include <string>
#include <vector>

#include "adabldm/image.hpp"

namespace adabldm::metrics {

inline constexpr double kDefaultFprLimit = 0.3;
inline constexpr int kDefaultRecallPercent = 90;
inline constexpr int kConnectivity = 4;
/// A component counts as detected once at least this fraction of its pixels is at or above the threshold.
inline constexpr double kInstanceCoverage = 0.5;

/// Real-valued anomaly scores, higher is more anomalous.
struct ScoreMap {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  ScoreMap() = default;
  ScoreMap(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}
  double& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }
};

/// Binary labels with their cached 4-connected components.
class GroundTruth {
 public:
  GroundTruth() = default;
  explicit GroundTruth(BinaryMask mask);

  const BinaryMask& mask() const { return mask_; }
  int height() const { return mask_.height; }
  int width() const { return mask_.width; }
  /// Pixel indices (row-major) of each component.
  const std::vector<std::vector<int>>& components() const { return components_; }
  /// Component id per pixel, -1 for negatives.
  const std::vector<int>& component_of() const { return component_of_; }

 private:
  BinaryMask mask_;
  std::vector<std::vector<int>> components_;
  std::vector<int> component_of_;
};

struct Sample {
  ScoreMap scores;
  GroundTruth truth;
};

double pixel_auc(const std::vector<Sample>& samples);
double pro(const std::vector<Sample>& samples, double fpr_limit = kDefaultFprLimit);
double average_precision(const std::vector<Sample>& samples);
double iap(const std::vector<Sample>& samples);
/// Pixel precision at the strictest threshold whose instance recall reaches k percent; 0 if never reached.
double iap_at_k(const std::vector<Sample>& samples, int k = kDefaultRecallPercent);

double pixel_auc(const ScoreMap& s, const GroundTruth& g);
double pro(const ScoreMap& s, const GroundTruth& g, double fpr_limit = kDefaultFprLimit);
double average_precision(const ScoreMap& s, const GroundTruth& g);
double iap(const ScoreMap& s, const GroundTruth& g);
double iap_at_k(const ScoreMap& s, const GroundTruth& g, int k = kDefaultRecallPercent);

/// One operating point per distinct score value, strictest first.
struct CurvePoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double recall = 0.0;           // pixel recall
  double precision = 0.0;        // pixel precision
  double instance_recall = 0.0;
  double region_overlap = 0.0;   // mean per-component overlap
};
std::vector<CurvePoint> threshold_sweep(const std::vector<Sample>& samples);

struct MetricScores {
  double pixel_auc = 0.0;
  double pro = 0.0;
  double ap = 0.0;
  double iap = 0.0;
  double iap_at_k = 0.0;
};

/// All five metrics from a single sweep.
MetricScores evaluate(const std::vector<Sample>& samples, int k = kDefaultRecallPercent,
                      double fpr_limit = kDefaultFprLimit);

struct MetricsReport {
  std::vector<MetricScores> trials;
  MetricScores mean;
  MetricScores stddev;  // sample standard deviation, 0 for a single trial
  int k = kDefaultRecallPercent;
  double fpr_limit = kDefaultFprLimit;
  int connectivity = kConnectivity;
  double instance_coverage = kInstanceCoverage;

  int n_trials() const { return static_cast<int>(trials.size()); }
  std::string to_json(int indent = 2) const;
};

/// Mean and stddev over trials; independent of trial order.
MetricsReport aggregate(std::vector<MetricScores> trials, int k = kDefaultRecallPercent,
                        double fpr_limit = kDefaultFprLimit);

}  // namespace adabldm::metrics

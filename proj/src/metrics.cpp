#include "adabldm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "adabldm/errors.hpp"
#include "adabldm/trimap.hpp"

namespace adabldm::metrics {

GroundTruth::GroundTruth(BinaryMask mask) : mask_(std::move(mask)) {
  int n = 0;
  const auto labels = trimap::label_components(mask_, &n);
  components_.assign(n, {});
  component_of_.assign(labels.size(), -1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 0) continue;
    components_[labels[i] - 1].push_back(static_cast<int>(i));
    component_of_[i] = labels[i] - 1;
  }
}

namespace {

struct Pixel {
  double score;
  int component;  // global id, -1 for negatives
  bool positive;
};

struct Flattened {
  std::vector<Pixel> pixels;  // sorted by descending score
  std::vector<int> component_sizes;
  long positives = 0;
  long negatives = 0;
};

Flattened flatten(const std::vector<Sample>& samples) {
  ADABLDM_CHECK(!samples.empty(), ParameterError, "metrics: no samples");
  Flattened f;
  for (const auto& s : samples) {
    ADABLDM_CHECK(s.scores.height == s.truth.height() && s.scores.width == s.truth.width() &&
                      s.scores.data.size() == s.truth.mask().data.size(),
                  ParameterError, "metrics: score map and ground truth differ in shape");
    const int offset = static_cast<int>(f.component_sizes.size());
    for (const auto& c : s.truth.components()) f.component_sizes.push_back(static_cast<int>(c.size()));
    const auto& comp = s.truth.component_of();
    for (std::size_t i = 0; i < s.scores.data.size(); ++i) {
      const double v = s.scores.data[i];
      ADABLDM_CHECK(std::isfinite(v), ParameterError, "metrics: non-finite score");
      const bool pos = s.truth.mask().data[i] != 0;
      f.pixels.push_back({v, pos ? comp[i] + offset : -1, pos});
      (pos ? f.positives : f.negatives) += 1;
    }
  }
  std::stable_sort(f.pixels.begin(), f.pixels.end(),
                   [](const Pixel& a, const Pixel& b) { return a.score > b.score; });
  return f;
}

std::vector<CurvePoint> sweep(const Flattened& f) {
  std::vector<CurvePoint> curve;
  const int ncomp = static_cast<int>(f.component_sizes.size());
  std::vector<int> covered(ncomp, 0);
  long tp = 0, fp = 0;
  int detected = 0;
  for (std::size_t i = 0; i < f.pixels.size();) {
    const double tau = f.pixels[i].score;
    for (; i < f.pixels.size() && f.pixels[i].score == tau; ++i) {
      const Pixel& p = f.pixels[i];
      if (!p.positive) {
        ++fp;
        continue;
      }
      ++tp;
      const int c = p.component;
      const int before = covered[c]++;
      const int size = f.component_sizes[c];
      if (before * 2 < size && covered[c] * 2 >= size) ++detected;
    }
    CurvePoint pt;
    pt.threshold = tau;
    pt.fpr = f.negatives ? static_cast<double>(fp) / f.negatives : 0.0;
    pt.recall = f.positives ? static_cast<double>(tp) / f.positives : 0.0;
    pt.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    pt.instance_recall = ncomp ? static_cast<double>(detected) / ncomp : 0.0;
    double exact = 0.0;
    if (ncomp) {
      for (int c = 0; c < ncomp; ++c) exact += static_cast<double>(covered[c]) / f.component_sizes[c];
      exact /= ncomp;
    }
    pt.region_overlap = exact;
    curve.push_back(pt);
  }
  return curve;
}

double auc_from(const Flattened& f) {
  if (f.positives == 0 || f.negatives == 0) throw UndefinedMetricError("pixel_auc: ground truth has a single class");
  const double n = static_cast<double>(f.pixels.size());
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < f.pixels.size();) {
    std::size_t j = i;
    long pos = 0;
    for (; j < f.pixels.size() && f.pixels[j].score == f.pixels[i].score; ++j) pos += f.pixels[j].positive;
    // Descending positions [i, j) hold ascending ranks n-j+1 .. n-i.
    const double midrank = (2.0 * n - static_cast<double>(i) - static_cast<double>(j) + 1.0) / 2.0;
    rank_sum += midrank * static_cast<double>(pos);
    i = j;
  }
  const double p = static_cast<double>(f.positives), q = static_cast<double>(f.negatives);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * q);
}

double pro_from(const Flattened& f, const std::vector<CurvePoint>& curve, double fpr_limit) {
  ADABLDM_CHECK(fpr_limit > 0.0 && fpr_limit <= 1.0, ParameterError, "pro: fpr_limit must be in (0,1]");
  if (f.component_sizes.empty()) throw UndefinedMetricError("pro: ground truth has no anomaly region");
  if (f.negatives == 0) throw UndefinedMetricError("pro: ground truth has no negative pixel");
  double area = 0.0, f0 = 0.0, p0 = 0.0;
  for (const auto& pt : curve) {
    const double f1 = pt.fpr, p1 = pt.region_overlap;
    if (f1 <= fpr_limit) {
      area += (f1 - f0) * (p0 + p1) / 2.0;
    } else {
      const double at = p0 + (p1 - p0) * (fpr_limit - f0) / (f1 - f0);
      area += (fpr_limit - f0) * (p0 + at) / 2.0;
      break;
    }
    f0 = f1;
    p0 = p1;
  }
  return area / fpr_limit;
}

double ap_from(const Flattened& f, const std::vector<CurvePoint>& curve) {
  if (f.positives == 0) throw UndefinedMetricError("average_precision: ground truth has no positive pixel");
  double ap = 0.0, prev = 0.0;
  for (const auto& pt : curve) {
    ap += (pt.recall - prev) * pt.precision;
    prev = pt.recall;
  }
  return ap;
}

double iap_from(const Flattened& f, const std::vector<CurvePoint>& curve) {
  if (f.component_sizes.empty()) throw UndefinedMetricError("iap: ground truth has no anomaly region");
  double area = 0.0, prev = 0.0;
  for (const auto& pt : curve) {
    area += (pt.instance_recall - prev) * pt.precision;
    prev = pt.instance_recall;
  }
  return area;
}

double iap_at_k_from(const Flattened& f, const std::vector<CurvePoint>& curve, int k) {
  ADABLDM_CHECK(k >= 0 && k <= 100, ParameterError, "iap_at_k: k must be a percentage");
  if (f.component_sizes.empty()) throw UndefinedMetricError("iap_at_k: ground truth has no anomaly region");
  const double ncomp = static_cast<double>(f.component_sizes.size());
  for (const auto& pt : curve) {
    // instance_recall * ncomp is an exact integer count.
    if (std::lround(pt.instance_recall * ncomp) * 100 >= static_cast<long>(k) * static_cast<long>(ncomp)) {
      return pt.precision;
    }
  }
  return 0.0;
}

std::vector<Sample> single(const ScoreMap& s, const GroundTruth& g) { return {Sample{s, g}}; }

}  // namespace

std::vector<CurvePoint> threshold_sweep(const std::vector<Sample>& samples) { return sweep(flatten(samples)); }

double pixel_auc(const std::vector<Sample>& samples) { return auc_from(flatten(samples)); }

double pro(const std::vector<Sample>& samples, double fpr_limit) {
  const auto f = flatten(samples);
  return pro_from(f, sweep(f), fpr_limit);
}

double average_precision(const std::vector<Sample>& samples) {
  const auto f = flatten(samples);
  return ap_from(f, sweep(f));
}

double iap(const std::vector<Sample>& samples) {
  const auto f = flatten(samples);
  return iap_from(f, sweep(f));
}

double iap_at_k(const std::vector<Sample>& samples, int k) {
  const auto f = flatten(samples);
  return iap_at_k_from(f, sweep(f), k);
}

double pixel_auc(const ScoreMap& s, const GroundTruth& g) { return pixel_auc(single(s, g)); }
double pro(const ScoreMap& s, const GroundTruth& g, double fpr_limit) { return pro(single(s, g), fpr_limit); }
double average_precision(const ScoreMap& s, const GroundTruth& g) { return average_precision(single(s, g)); }
double iap(const ScoreMap& s, const GroundTruth& g) { return iap(single(s, g)); }
double iap_at_k(const ScoreMap& s, const GroundTruth& g, int k) { return iap_at_k(single(s, g), k); }

MetricScores evaluate(const std::vector<Sample>& samples, int k, double fpr_limit) {
  const auto f = flatten(samples);
  const auto curve = sweep(f);
  return {auc_from(f), pro_from(f, curve, fpr_limit), ap_from(f, curve), iap_from(f, curve),
          iap_at_k_from(f, curve, k)};
}

namespace {

// Sorting before summation makes the result independent of trial order.
std::pair<double, double> mean_std(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += x;
  const double mean = sum / static_cast<double>(v.size());
  std::vector<double> dev;
  for (double x : v) dev.push_back((x - mean) * (x - mean));
  std::sort(dev.begin(), dev.end());
  double ss = 0.0;
  for (double d : dev) ss += d;
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {mean, sd};
}

}  // namespace

MetricsReport aggregate(std::vector<MetricScores> trials, int k, double fpr_limit) {
  ADABLDM_CHECK(!trials.empty(), ParameterError, "aggregate: no trials");
  MetricsReport r;
  r.k = k;
  r.fpr_limit = fpr_limit;
  auto field = [&](double MetricScores::*m) {
    std::vector<double> v;
    for (const auto& t : trials) v.push_back(t.*m);
    const auto [mean, sd] = mean_std(std::move(v));
    r.mean.*m = mean;
    r.stddev.*m = sd;
  };
  for (auto m : {&MetricScores::pixel_auc, &MetricScores::pro, &MetricScores::ap, &MetricScores::iap,
                 &MetricScores::iap_at_k})
    field(m);
  r.trials = std::move(trials);
  return r;
}

std::string MetricsReport::to_json(int indent) const {
  using nlohmann::json;
  auto scores = [](const MetricScores& s) {
    return json{{"pixel_auc", s.pixel_auc}, {"pro", s.pro}, {"ap", s.ap}, {"iap", s.iap}, {"iap_at_k", s.iap_at_k}};
  };
  json j{{"k", k},
         {"fpr_limit", fpr_limit},
         {"connectivity", connectivity},
         {"instance_coverage", instance_coverage},
         {"n_trials", n_trials()},
         {"mean", scores(mean)},
         {"stddev", scores(stddev)},
         {"trials", json::array()}};
  for (const auto& t : trials) j["trials"].push_back(scores(t));
  return j.dump(indent);
}

}  // namespace adabldm::metrics

#pragma once

// Post-training open-set inference over frozen embeddings: family centroids,
// distance thresholds, the centroid-distance detector, the probability
// threshold baseline and the evaluation metrics.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mdenet {

using Embeddings = std::vector<std::vector<double>>;

struct CentroidTable {
  std::vector<std::vector<double>> centroids;
  std::vector<std::size_t> counts;
  std::size_t families() const { return centroids.size(); }
};

enum class ThresholdMode { global, per_family };

std::string to_string(ThresholdMode mode);
ThresholdMode threshold_mode_from_string(const std::string& s);

struct ThresholdTable {
  double delta_global = 0.0;
  std::vector<double> delta_per_family;
  ThresholdMode mode = ThresholdMode::per_family;

  double threshold(std::size_t family) const {
    return mode == ThresholdMode::global ? delta_global : delta_per_family.at(family);
  }
};

struct DetectionResult {
  bool known = false;
  int family = -1;  // set only when known
  double distance = 0.0;
  int tentative_family = 0;
};

double l2_distance(std::span<const double> a, std::span<const double> b);

CentroidTable compute_centroids(const Embeddings& embeddings, std::span<const int> labels,
                                std::size_t families,
                                const std::vector<std::string>& family_names = {});
ThresholdTable compute_thresholds(const Embeddings& embeddings, std::span<const int> labels,
                                  const CentroidTable& centroids,
                                  ThresholdMode mode = ThresholdMode::per_family);

// Known(k) iff ||z - c_k|| <= threshold(k), k = argmax(probs), lowest id on ties.
DetectionResult detect(std::span<const double> z, std::span<const double> probs,
                       const CentroidTable& centroids, const ThresholdTable& thresholds);
// Unknown iff max_k probs_k <= delta_p.
DetectionResult detect_probability_baseline(std::span<const double> probs, double delta_p);

double cls_accuracy(std::span<const int> predictions, std::span<const int> labels);

struct DetectionMetrics {
  double tpr = 0.0;
  double tnr = 0.0;
  double det_acc = 0.0;
};

// Positive = verdict Known on a known-family sample; negative = verdict
// Unknown on an unknown-family sample.
DetectionMetrics det_accuracy(std::span<const DetectionResult> known_results,
                              std::span<const DetectionResult> unknown_results);
DetectionMetrics det_accuracy(const std::vector<bool>& known_verdicts_on_known,
                              const std::vector<bool>& known_verdicts_on_unknown);

// Row = predicted family, column = ground truth.
using ConfusionMatrix = std::vector<std::vector<long long>>;
ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels,
                                 std::size_t families);
std::string confusion_csv(const ConfusionMatrix& m, const std::vector<std::string>& family_names);

nlohmann::json to_json(const CentroidTable& t);
nlohmann::json to_json(const ThresholdTable& t);
CentroidTable centroids_from_json(const nlohmann::json& j);
ThresholdTable thresholds_from_json(const nlohmann::json& j);

}  // namespace mdenet

#include "mdenet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mdenet/errors.hpp"
#include "mdenet/fusion.hpp"

namespace mdenet {

using nlohmann::json;

std::string to_string(ThresholdMode mode) {
  return mode == ThresholdMode::global ? "global" : "per_family";
}

ThresholdMode threshold_mode_from_string(const std::string& s) {
  if (s == "global") return ThresholdMode::global;
  if (s == "per_family") return ThresholdMode::per_family;
  throw ConfigError("unknown threshold mode '" + s + "' (expected global or per_family)");
}

double l2_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("l2_distance: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

CentroidTable compute_centroids(const Embeddings& embeddings, std::span<const int> labels,
                                std::size_t families, const std::vector<std::string>& family_names) {
  if (embeddings.size() != labels.size()) throw InputError("compute_centroids: label count mismatch");
  const auto d = embeddings.empty() ? 0 : embeddings.front().size();
  CentroidTable t;
  t.centroids.assign(families, std::vector<double>(d, 0.0));
  t.counts.assign(families, 0);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const auto f = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || f >= families) throw InputError("compute_centroids: label out of range");
    if (embeddings[i].size() != d) throw ShapeError("compute_centroids: ragged embeddings");
    for (std::size_t j = 0; j < d; ++j) t.centroids[f][j] += embeddings[i][j];
    ++t.counts[f];
  }
  for (std::size_t f = 0; f < families; ++f) {
    if (t.counts[f] == 0) {
      const auto name = f < family_names.size() ? family_names[f] : "id " + std::to_string(f);
      throw InputError("compute_centroids: family '" + name + "' has no training embedding");
    }
    for (auto& v : t.centroids[f]) v /= static_cast<double>(t.counts[f]);
  }
  return t;
}

ThresholdTable compute_thresholds(const Embeddings& embeddings, std::span<const int> labels,
                                  const CentroidTable& centroids, ThresholdMode mode) {
  if (embeddings.size() != labels.size()) throw InputError("compute_thresholds: label count mismatch");
  ThresholdTable t;
  t.mode = mode;
  t.delta_per_family.assign(centroids.families(), 0.0);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const auto f = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || f >= centroids.families()) throw InputError("compute_thresholds: bad label");
    t.delta_per_family[f] = std::max(t.delta_per_family[f], l2_distance(embeddings[i], centroids.centroids[f]));
  }
  for (double d : t.delta_per_family) t.delta_global = std::max(t.delta_global, d);
  return t;
}

DetectionResult detect(std::span<const double> z, std::span<const double> probs,
                       const CentroidTable& centroids, const ThresholdTable& thresholds) {
  if (probs.size() != centroids.families()) throw ShapeError("detect: probability width mismatch");
  DetectionResult r;
  const auto k = argmax(probs);
  r.tentative_family = static_cast<int>(k);
  r.distance = l2_distance(z, centroids.centroids[k]);
  r.known = r.distance <= thresholds.threshold(k);
  r.family = r.known ? r.tentative_family : -1;
  return r;
}

DetectionResult detect_probability_baseline(std::span<const double> probs, double delta_p) {
  if (probs.empty()) throw InputError("detect_probability_baseline: empty probabilities");
  DetectionResult r;
  const auto k = argmax(probs);
  r.tentative_family = static_cast<int>(k);
  r.known = probs[k] > delta_p;
  r.family = r.known ? r.tentative_family : -1;
  return r;
}

double cls_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw InputError("cls_accuracy: length mismatch");
  if (labels.empty()) throw InputError("cls_accuracy: undefined on an empty set");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += predictions[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

DetectionMetrics det_accuracy(const std::vector<bool>& known_on_known,
                              const std::vector<bool>& known_on_unknown) {
  if (known_on_known.empty() || known_on_unknown.empty()) {
    throw InputError("det_accuracy: undefined without both known and unknown samples");
  }
  const auto tp = std::count(known_on_known.begin(), known_on_known.end(), true);
  const auto tn = std::count(known_on_unknown.begin(), known_on_unknown.end(), false);
  DetectionMetrics m;
  m.tpr = static_cast<double>(tp) / static_cast<double>(known_on_known.size());
  m.tnr = static_cast<double>(tn) / static_cast<double>(known_on_unknown.size());
  m.det_acc = (m.tpr + m.tnr) / 2.0;
  return m;
}

DetectionMetrics det_accuracy(std::span<const DetectionResult> known_results,
                              std::span<const DetectionResult> unknown_results) {
  std::vector<bool> a, b;
  for (const auto& r : known_results) a.push_back(r.known);
  for (const auto& r : unknown_results) b.push_back(r.known);
  return det_accuracy(a, b);
}

ConfusionMatrix confusion_matrix(std::span<const int> predictions, std::span<const int> labels,
                                 std::size_t families) {
  if (predictions.size() != labels.size()) throw InputError("confusion_matrix: length mismatch");
  ConfusionMatrix m(families, std::vector<long long>(families, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto p = static_cast<std::size_t>(predictions[i]), t = static_cast<std::size_t>(labels[i]);
    if (predictions[i] < 0 || labels[i] < 0 || p >= families || t >= families) {
      throw InputError("confusion_matrix: family id out of range");
    }
    ++m[p][t];
  }
  return m;
}

std::string confusion_csv(const ConfusionMatrix& m, const std::vector<std::string>& names) {
  std::ostringstream os;
  os << "predicted\\truth";
  for (std::size_t j = 0; j < m.size(); ++j) os << ',' << (j < names.size() ? names[j] : std::to_string(j));
  os << '\n';
  for (std::size_t i = 0; i < m.size(); ++i) {
    os << (i < names.size() ? names[i] : std::to_string(i));
    for (auto v : m[i]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

json to_json(const CentroidTable& t) { return json{{"centroids", t.centroids}, {"counts", t.counts}}; }

json to_json(const ThresholdTable& t) {
  return json{{"delta", t.delta_global}, {"delta_per_family", t.delta_per_family}, {"mode", to_string(t.mode)}};
}

CentroidTable centroids_from_json(const json& j) {
  CentroidTable t;
  t.centroids = j.at("centroids").get<std::vector<std::vector<double>>>();
  t.counts = j.at("counts").get<std::vector<std::size_t>>();
  return t;
}

ThresholdTable thresholds_from_json(const json& j) {
  ThresholdTable t;
  t.delta_global = j.at("delta").get<double>();
  t.delta_per_family = j.at("delta_per_family").get<std::vector<double>>();
  t.mode = threshold_mode_from_string(j.at("mode").get<std::string>());
  return t;
}

}  // namespace mdenet

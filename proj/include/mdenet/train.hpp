#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdenet/data.hpp"
#include "mdenet/detector.hpp"
#include "mdenet/model.hpp"

namespace mdenet {

struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 32;
  std::size_t epochs = 30;
  double alpha = 0.3;
  double beta = 0.5;
  double lambda = 10.0;
  double norm_cap = 10.0;
  std::optional<double> disc_margin;  // literal triplet term when unset
  std::uint64_t seed = 0;
  ThresholdMode threshold_mode = ThresholdMode::per_family;
  Modalities modalities = Modalities::both;

  // Data handling.
  int known_families = 15;
  double train_fraction = 0.8;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t max_length = 64;
  int min_count = 1;

  // Architecture.
  NumericEncoderConfig numeric;
  TextualEncoderConfig textual;
  std::size_t fusion_hidden = 1024;
  std::size_t embedding_dim = 1024;  // d_z
  std::size_t sub_dim = 128;         // d_sub

  // Held-out Cls/Det accuracy after every epoch (forward passes only).
  bool track_metrics = true;

  void validate() const;
  LossWeights weights() const { return {alpha, beta}; }
  ModelConfig model_config(std::size_t vocab_size) const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);
// FNV-1a over the canonical JSON form, as 16 hex digits.
std::string config_hash(const TrainConfig& c);

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double cls = 0.0;
  double disc = 0.0;
  double excl = 0.0;
  double total = 0.0;
  double rho = 0.0;
  double sub_norm = 0.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double mean_total = 0.0;
  std::optional<double> cls_acc;
  std::optional<double> det_acc;
};

struct TrainHistory {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

struct TrainedModel {
  Model model;
  Featurizer featurizer;
  TrainConfig config;
  std::vector<std::string> family_names;
  std::optional<CentroidTable> centroids;
  std::optional<ThresholdTable> thresholds;
};

struct TrainResult {
  TrainedModel trained;
  TrainHistory history;
};

// Called after every optimizer step; return false to stop early.
using StepCallback = std::function<bool(const StepRecord&)>;

TrainResult train(const TrainConfig& config, const DatasetSplit& split,
                  const StepCallback& on_step = {});

struct BaselineSweep {
  double best_delta_p = 0.0;
  DetectionMetrics best;
  std::vector<std::pair<double, double>> known_rate;  // (delta_p, fraction of known verdicts)
};

struct EvalReport {
  double cls_acc = 0.0;
  std::optional<DetectionMetrics> detection;
  ThresholdMode mode = ThresholdMode::per_family;
  ThresholdTable thresholds;
  CentroidTable centroids;
  ConfusionMatrix confusion;
  std::optional<BaselineSweep> baseline;
  std::vector<std::string> family_names;

  nlohmann::json metrics_json() const;
  std::string confusion_csv() const;
};

// Freezes the model, fits centroids/thresholds on train_known, classifies
// test_known and runs detection on test_known and test_unknown. The tables
// are stored on the trained model.
EvalReport evaluate(TrainedModel& trained, const DatasetSplit& split);

// Probability-threshold baseline over delta_p = 0.01 .. 0.99.
BaselineSweep sweep_probability_baseline(const Embeddings& known_probs, const Embeddings& unknown_probs);

struct GridCell {
  double alpha = 0.0;
  double beta = 0.0;
  double cls_acc = 0.0;
  double det_acc = 0.0;
  double mean = 0.0;
};

struct GridResult {
  std::vector<GridCell> cells;
  std::string csv() const;
  // Three 8x8 panels (cls, det, mean); row = alpha, column = beta; null where inadmissible.
  nlohmann::json panels() const;
};

// All (alpha, beta) on the 0.1 grid with alpha, beta, 1 - alpha - beta >= 0.1.
std::vector<std::pair<double, double>> admissible_weight_pairs();

GridResult grid_search(const TrainConfig& base, const DatasetSplit& split, std::size_t epochs_per_cell,
                       const std::function<void(const GridCell&)>& on_cell = {});

struct AblationRow {
  Modalities modalities = Modalities::both;
  double cls_acc = 0.0;
  std::optional<DetectionMetrics> detection;
};

std::vector<AblationRow> ablate(const TrainConfig& config, const DatasetSplit& split);
std::string ablation_csv(const std::vector<AblationRow>& rows);

std::string loss_csv(const TrainHistory& history);

// Writes metrics.json, loss.csv, confusion.csv and history.json under dir.
std::vector<std::string> emit_report(const TrainHistory& history, const EvalReport& report,
                                     const std::string& dir);

}  // namespace mdenet

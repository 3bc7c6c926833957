#pragma once

// Dataset model: Ember-style records, image/sentence construction,
// known/unknown splits and a synthetic generator for desk-scale runs.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdenet/rng.hpp"

namespace mdenet {

struct FamilyLabel {
  int id = 0;
  std::string name;
  bool operator==(const FamilyLabel&) const = default;
};

struct MalwareRecord {
  FamilyLabel family;
  std::vector<double> numeric;
  // Absent for single-modality datasets; present but possibly empty otherwise.
  std::optional<std::vector<std::string>> tokens;
  bool operator==(const MalwareRecord&) const = default;
};

struct Dataset {
  std::vector<std::string> family_names;  // index == dense family id
  std::vector<MalwareRecord> records;

  std::size_t family_count() const { return family_names.size(); }
  std::size_t feature_count() const { return records.empty() ? 0 : records.front().numeric.size(); }
  bool has_tokens() const;
};

struct LoadSchema {
  std::string family = "family";
  std::string numeric = "numeric";
  std::string tokens = "tokens";
  // Optional integer field; when every record carries it, dense ids follow
  // ascending declared id instead of first appearance.
  std::string family_id = "family_id";
};

Dataset load_jsonl(const std::string& path, const LoadSchema& schema = {});
Dataset parse_jsonl(std::istream& in, const LoadSchema& schema = {});
void write_jsonl(const Dataset& ds, const std::string& path, const LoadSchema& schema = {});
std::string to_jsonl(const Dataset& ds, const LoadSchema& schema = {});

// ---- numeric modality ------------------------------------------------------

struct MalwareImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // row-major, every value in [0, 1]
};

struct NormalizationStats {
  std::vector<double> min;
  std::vector<double> max;
};

// Per-feature min/max over the given records (pass train_known only).
NormalizationStats compute_stats(std::span<const MalwareRecord> records);

// Min-max scale with the given stats (degenerate feature -> 0.5), clamp to
// [0, 1], truncate or zero-pad to H*W and reshape row-major.
MalwareImage make_image(std::span<const double> numeric, std::size_t height, std::size_t width,
                        const NormalizationStats& stats);

// ---- textual modality ------------------------------------------------------

struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  std::map<std::string, int> ids;

  int size() const { return static_cast<int>(ids.size()) + 2; }
  int lookup(const std::string& token) const;
  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  bool operator==(const Vocabulary&) const = default;
};

Vocabulary build_vocab(std::span<const MalwareRecord> records, int min_count);

struct MalwareSentence {
  std::vector<int> token_ids;  // length L_max
  int pad_id = Vocabulary::kPad;
  int unk_id = Vocabulary::kUnk;
  int vocab_size = 2;
  std::size_t true_length = 0;
};

MalwareSentence tokenize(std::span<const std::string> tokens, const Vocabulary& vocab,
                         std::size_t max_length);

// ---- splits ----------------------------------------------------------------

struct DatasetSplit {
  std::vector<MalwareRecord> train_known;
  std::vector<MalwareRecord> test_known;
  std::vector<MalwareRecord> test_unknown;
  // Indices into the source dataset, ascending within each partition.
  std::vector<std::size_t> train_index;
  std::vector<std::size_t> test_known_index;
  std::vector<std::size_t> test_unknown_index;
  std::vector<std::string> family_names;
  int known_families = 0;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
};

DatasetSplit split_known_unknown(const Dataset& ds, int known_families, double train_fraction,
                                 std::uint64_t seed);

// Manifest: {"seed", "train_fraction", "known_families", "train_known": [...], ...}.
nlohmann::json split_manifest(const DatasetSplit& split);
DatasetSplit split_from_manifest(const Dataset& ds, const nlohmann::json& manifest);

// ---- synthetic data --------------------------------------------------------

struct SyntheticSpec {
  int known_families = 5;
  int unknown_families = 2;
  int samples_per_family = 200;
  int features = 64;
  double cluster_separation = 8.0;
  double modality_agreement = 0.5;
  int max_length = 16;
  int vocab_size = 128;
  double noise = 1.0;
  int signature_length = 8;
  int tokens_per_sample = 12;
};

void validate(const SyntheticSpec& spec);
nlohmann::json to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

// Known means sit on scaled orthonormal directions at pairwise distance
// cluster_separation; unknown means sit at >= 2x separation from every known
// mean. Numeric noise is isotropic Gaussian with std `noise`.
Dataset gen_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

// ---- model-ready inputs ----------------------------------------------------

struct PreparedSet {
  std::vector<MalwareImage> images;
  std::vector<MalwareSentence> sentences;
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

// Fitted on train_known; turns records into images and sentences.
struct Featurizer {
  NormalizationStats stats;
  Vocabulary vocab;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t max_length = 64;

  static Featurizer fit(std::span<const MalwareRecord> train_known, std::size_t height,
                        std::size_t width, std::size_t max_length, int min_count = 1);
  PreparedSet prepare(std::span<const MalwareRecord> records) const;
  nlohmann::json to_json() const;
  static Featurizer from_json(const nlohmann::json& j);
};

}  // namespace mdenet

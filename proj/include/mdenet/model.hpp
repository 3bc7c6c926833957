#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mdenet/detector.hpp"
#include "mdenet/dual_embedding.hpp"
#include "mdenet/fusion.hpp"
#include "mdenet/numeric_encoder.hpp"
#include "mdenet/textual_encoder.hpp"

namespace mdenet {

enum class Modalities { image, sentence, both };

std::string to_string(Modalities m);
Modalities modalities_from_string(const std::string& s);
inline bool uses_image(Modalities m) { return m != Modalities::sentence; }
inline bool uses_sentence(Modalities m) { return m != Modalities::image; }

struct ModelConfig {
  Modalities modalities = Modalities::both;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t max_length = 64;
  std::size_t vocab_size = 2;
  std::size_t known_families = 2;
  NumericEncoderConfig numeric;
  TextualEncoderConfig textual;
  std::size_t fusion_hidden = 1024;
  std::size_t embedding_dim = 1024;
  std::size_t sub_dim = 128;
  double lambda = 10.0;
  double norm_cap = 10.0;

  FusionConfig fusion_config() const {
    return {numeric.output_dim(), textual.output_dim, fusion_hidden, embedding_dim};
  }
};

// E(x, s) followed by C(z), plus the training-only sphere state. Encoders
// for unused modalities are never constructed.
struct Model {
  ModelConfig config;
  std::optional<NumericEncoder> numeric;
  std::optional<TextualEncoder> textual;
  Fusion fusion;
  Classifier classifier;
  SphereState sphere;

  static Model make(const ModelConfig& config, std::uint64_t seed);

  Var embed(std::span<const MalwareImage> images, std::span<const MalwareSentence> sentences,
            bool training);
  Var embed(const PreparedSet& set, std::span<const std::size_t> rows, bool training);

  // Every trainable tensor and buffer, keyed by layer path.
  ParamRegistry registry();
};

// Frozen-model forward pass in eval mode, batched.
struct Inference {
  Embeddings z;
  Embeddings probs;
  std::vector<int> predictions;
};
Inference infer(Model& model, const PreparedSet& set, std::size_t batch_size = 64);

DetectionResult detect(Model& model, const MalwareImage& image, const MalwareSentence& sentence,
                       const CentroidTable& centroids, const ThresholdTable& thresholds);
DetectionResult detect_probability_baseline(Model& model, const MalwareImage& image,
                                            const MalwareSentence& sentence, double delta_p);

// Bias-corrected first/second moment optimizer.
class Adam {
 public:
  Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);
  void step();
  void zero_grad();
  long steps() const { return t_; }

 private:
  std::vector<Var> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace mdenet

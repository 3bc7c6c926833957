#include "mdenet/model.hpp"

#include <cmath>

#include "mdenet/errors.hpp"

namespace mdenet {

std::string to_string(Modalities m) {
  switch (m) {
    case Modalities::image: return "image";
    case Modalities::sentence: return "sentence";
    case Modalities::both: return "both";
  }
  return "both";
}

Modalities modalities_from_string(const std::string& s) {
  if (s == "image") return Modalities::image;
  if (s == "sentence") return Modalities::sentence;
  if (s == "both") return Modalities::both;
  throw ConfigError("unknown modalities '" + s + "' (expected image, sentence or both)");
}

Model Model::make(const ModelConfig& config, std::uint64_t seed) {
  Rng rng(seed);
  Model m;
  m.config = config;
  if (uses_image(config.modalities)) {
    m.numeric = NumericEncoder::make(config.numeric, config.height, config.width, rng);
  }
  if (uses_sentence(config.modalities)) {
    m.textual = TextualEncoder::make(config.textual, config.vocab_size, config.max_length, rng);
  }
  m.fusion = Fusion::make(config.fusion_config(), rng);
  m.classifier = Classifier::make(config.embedding_dim, config.known_families, rng);
  m.sphere = SphereState::make(config.embedding_dim, config.sub_dim, config.lambda, config.norm_cap, rng);
  return m;
}

Var Model::embed(std::span<const MalwareImage> images, std::span<const MalwareSentence> sentences,
                 bool training) {
  Var z_num, z_tex;
  if (numeric) z_num = numeric->encode(images_to_tensor(images), training);
  if (textual) z_tex = textual->encode(sentences).z;
  return fusion.fuse(z_num, z_tex);
}

Var Model::embed(const PreparedSet& set, std::span<const std::size_t> rows, bool training) {
  std::vector<MalwareImage> images;
  std::vector<MalwareSentence> sentences;
  if (numeric) images.reserve(rows.size());
  if (textual) sentences.reserve(rows.size());
  for (auto r : rows) {
    if (numeric) images.push_back(set.images.at(r));
    if (textual) sentences.push_back(set.sentences.at(r));
  }
  return embed(images, sentences, training);
}

ParamRegistry Model::registry() {
  ParamRegistry reg;
  if (numeric) numeric->register_params(reg, "numeric");
  if (textual) textual->register_params(reg, "textual");
  fusion.register_params(reg, "fusion");
  classifier.register_params(reg, "classifier");
  sphere.register_params(reg, "sphere");
  return reg;
}

Inference infer(Model& model, const PreparedSet& set, std::size_t batch_size) {
  Inference out;
  const auto k = model.classifier.families();
  for (std::size_t start = 0; start < set.size(); start += batch_size) {
    const auto end = std::min(set.size(), start + batch_size);
    std::vector<std::size_t> rows(end - start);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = start + i;
    Var z = model.embed(set, rows, /*training=*/false);
    Var p = model.classifier.classify(z);
    const auto d = z->shape[1];
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.z.emplace_back(z->value.begin() + static_cast<long>(i * d),
                         z->value.begin() + static_cast<long>((i + 1) * d));
      out.probs.emplace_back(p->value.begin() + static_cast<long>(i * k),
                             p->value.begin() + static_cast<long>((i + 1) * k));
      out.predictions.push_back(static_cast<int>(argmax(out.probs.back())));
    }
  }
  return out;
}

namespace {

std::pair<std::vector<double>, std::vector<double>> forward_one(Model& model, const MalwareImage& image,
                                                                const MalwareSentence& sentence) {
  Var z = model.embed(std::span<const MalwareImage>(&image, 1),
                      std::span<const MalwareSentence>(&sentence, 1), /*training=*/false);
  Var p = model.classifier.classify(z);
  return {z->value, p->value};
}

}  // namespace

DetectionResult detect(Model& model, const MalwareImage& image, const MalwareSentence& sentence,
                       const CentroidTable& centroids, const ThresholdTable& thresholds) {
  auto [z, p] = forward_one(model, image, sentence);
  return detect(z, p, centroids, thresholds);
}

DetectionResult detect_probability_baseline(Model& model, const MalwareImage& image,
                                            const MalwareSentence& sentence, double delta_p) {
  if (!(delta_p > 0.0 && delta_p < 1.0)) throw ConfigError("delta_p must lie in (0, 1)");
  auto [z, p] = forward_one(model, image, sentence);
  return detect_probability_baseline(p, delta_p);
}

Adam::Adam(std::vector<Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p->size(), 0.0);
    v_.emplace_back(p->size(), 0.0);
  }
}

void Adam::zero_grad() { mdenet::zero_grad(params_); }

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    if (p.grad.empty()) continue;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      p.value[j] -= lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
  }
}

}  // namespace mdenet

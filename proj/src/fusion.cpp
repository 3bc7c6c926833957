#include "mdenet/fusion.hpp"

#include "mdenet/errors.hpp"

namespace mdenet {

Fusion Fusion::make(const FusionConfig& config, Rng& rng) {
  Fusion f;
  f.config = config;
  f.fc1 = Linear::make(config.numeric_dim + config.textual_dim, config.hidden_dim, rng);
  f.fc2 = Linear::make(config.hidden_dim, config.embedding_dim, rng);
  return f;
}

Var Fusion::fuse(const Var& z_num, const Var& z_tex) const {
  if (!z_num && !z_tex) throw InputError("fuse: both modalities absent");
  const auto n = z_num ? z_num->shape[0] : z_tex->shape[0];
  Var num = z_num ? z_num : zeros({n, config.numeric_dim});
  Var tex = z_tex ? z_tex : zeros({n, config.textual_dim});
  if (num->shape != Shape{n, config.numeric_dim} || tex->shape != Shape{n, config.textual_dim}) {
    throw ShapeError("fuse: got " + shape_str(num->shape) + " and " + shape_str(tex->shape));
  }
  return fc2(relu(fc1(concat_cols(num, tex))));
}

void Fusion::register_params(ParamRegistry& reg, const std::string& prefix) const {
  fc1.register_params(reg, prefix + ".fc1");
  fc2.register_params(reg, prefix + ".fc2");
}

Classifier Classifier::make(std::size_t embedding_dim, std::size_t families, Rng& rng) {
  if (families < 1) throw ConfigError("classifier: need at least one family");
  return {Linear::make(embedding_dim, families, rng)};
}

void Classifier::register_params(ParamRegistry& reg, const std::string& prefix) const {
  fc.register_params(reg, prefix + ".fc");
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace mdenet

#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mdenet/layers.hpp"

namespace mdenet {

struct FusionConfig {
  std::size_t numeric_dim = 1024;
  std::size_t textual_dim = 1024;
  std::size_t hidden_dim = 1024;
  std::size_t embedding_dim = 1024;  // d_z
};

// Two fully connected layers with a ReLU in between: [z_num, z_tex] -> z.
struct Fusion {
  FusionConfig config;
  Linear fc1;
  Linear fc2;

  static Fusion make(const FusionConfig& config, Rng& rng);
  // Either input may be null (absent modality) and is replaced by zeros; both
  // null is an input error.
  Var fuse(const Var& z_num, const Var& z_tex) const;
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// One fully connected layer followed by softmax.
struct Classifier {
  Linear fc;
  static Classifier make(std::size_t embedding_dim, std::size_t families, Rng& rng);
  Var logits(const Var& z) const { return fc(z); }
  Var classify(const Var& z) const { return softmax_rows(fc(z)); }
  std::size_t families() const { return fc.out_features(); }
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// Lowest index wins ties.
std::size_t argmax(std::span<const double> values);

}  // namespace mdenet

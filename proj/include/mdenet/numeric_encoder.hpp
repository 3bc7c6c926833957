#pragma once

// Two-branch encoder over malware images. The global branch aggregates every
// spatial position with Gaussian-similarity weights (a non-local operator);
// the local branch is a pointwise convolution. Both feed one weight-shared,
// pooling-free convolution stack and are projected to fixed-width vectors.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mdenet/data.hpp"
#include "mdenet/layers.hpp"

namespace mdenet {

struct ConvLayerSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
  bool relu = true;
  bool batchnorm = true;

  void validate() const;
  std::size_t output_size(std::size_t input) const;
};

struct NumericEncoderConfig {
  std::size_t key_channels = 128;    // T_omega width
  std::size_t value_channels = 64;   // T_mu width
  std::size_t local_channels = 64;
  std::vector<ConvLayerSpec> stack = default_stack(64, {64, 128, 256, 512});
  std::size_t branch_dim = 512;

  // Kernels 5,5,5,3; strides 1,2,2,2; paddings 2,2,2,1; ReLU + BatchNorm.
  static std::vector<ConvLayerSpec> default_stack(std::size_t in_channels,
                                                  const std::vector<std::size_t>& widths);
  void validate() const;
  std::size_t output_dim() const { return 2 * branch_dim; }
};

// exp(a . b).
double gaussian_similarity(std::span<const double> a, std::span<const double> b);

// [N, 1, H, W] constant tensor from equally sized images.
Var images_to_tensor(std::span<const MalwareImage> images);

struct NumericEncoder {
  NumericEncoderConfig config;
  std::size_t height = 0;
  std::size_t width = 0;
  Conv2d t_omega;
  Conv2d t_mu;
  Conv2d local_in;
  std::vector<Conv2d> stack_conv;
  std::vector<BatchNorm2d> stack_bn;
  Linear proj_global;
  Linear proj_local;

  static NumericEncoder make(const NumericEncoderConfig& config, std::size_t height,
                             std::size_t width, Rng& rng);

  // [N, 1, H, W] -> [N, value_channels, H, W].
  Var global_receptive(const Var& x) const;
  // [N, 1, H, W] -> [N, local_channels, H, W].
  Var local_receptive(const Var& x) const;
  // Batch statistics when training, running statistics otherwise.
  Var shared_stack(const Var& features, bool training);
  // [N, 1, H, W] -> [N, 2 * branch_dim].
  Var encode(const Var& x, bool training);

  // Softmax similarity weights of the global branch for one image, [P x P]
  // row-major with P = H * W.
  std::vector<double> attention_weights(const MalwareImage& image) const;

  // Ordered layer kinds of the whole encoder graph ("conv1x1", "nonlocal",
  // "conv5x5/s2", "batchnorm", "relu", "linear", ...).
  std::vector<std::string> layer_kinds() const;
  std::size_t flattened_size() const;
  void register_params(ParamRegistry& reg, const std::string& prefix);
};

}  // namespace mdenet

#include "mdenet/numeric_encoder.hpp"

#include <algorithm>
#include <cmath>

#include "mdenet/errors.hpp"

namespace mdenet {

void ConvLayerSpec::validate() const {
  if (kernel != 1 && kernel != 3 && kernel != 5) {
    throw ConfigError("conv layer: kernel must be 1, 3 or 5, got " + std::to_string(kernel));
  }
  if (stride != 1 && stride != 2) {
    throw ConfigError("conv layer: stride must be 1 or 2, got " + std::to_string(stride));
  }
  if (padding < 0 || in_channels == 0 || out_channels == 0) {
    throw ConfigError("conv layer: invalid padding or channel count");
  }
}

std::size_t ConvLayerSpec::output_size(std::size_t input) const {
  const long span = static_cast<long>(input) + 2L * padding - kernel;
  if (span < 0) {
    throw ShapeError("conv layer: spatial size " + std::to_string(input) + " too small for kernel " +
                     std::to_string(kernel));
  }
  return static_cast<std::size_t>(span / stride + 1);
}

std::vector<ConvLayerSpec> NumericEncoderConfig::default_stack(
    std::size_t in_channels, const std::vector<std::size_t>& widths) {
  static constexpr int kKernel[] = {5, 5, 5, 3};
  static constexpr int kStride[] = {1, 2, 2, 2};
  static constexpr int kPad[] = {2, 2, 2, 1};
  if (widths.size() != 4) throw ConfigError("shared stack needs exactly 4 widths");
  std::vector<ConvLayerSpec> out;
  std::size_t in = in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    out.push_back({in, widths[i], kKernel[i], kStride[i], kPad[i], true, true});
    in = widths[i];
  }
  return out;
}

void NumericEncoderConfig::validate() const {
  if (key_channels == 0 || value_channels == 0 || branch_dim == 0) {
    throw ConfigError("numeric encoder: zero-width layer");
  }
  if (local_channels != value_channels) {
    throw ConfigError("numeric encoder: both branches share one stack, so local and value "
                      "channel counts must match");
  }
  if (stack.empty()) throw ConfigError("numeric encoder: empty shared stack");
  std::size_t in = value_channels;
  for (const auto& layer : stack) {
    layer.validate();
    if (layer.in_channels != in) throw ConfigError("numeric encoder: stack channels do not chain");
    in = layer.out_channels;
  }
}

double gaussian_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("gaussian_similarity: length mismatch");
  double dot = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * b[i];
  return std::exp(dot);
}

Var images_to_tensor(std::span<const MalwareImage> images) {
  if (images.empty()) throw InputError("images_to_tensor: empty batch");
  const auto h = images.front().height, w = images.front().width;
  std::vector<double> data;
  data.reserve(images.size() * h * w);
  for (const auto& img : images) {
    if (img.height != h || img.width != w || img.pixels.size() != h * w) {
      throw ShapeError("images_to_tensor: images differ in size");
    }
    data.insert(data.end(), img.pixels.begin(), img.pixels.end());
  }
  return constant({images.size(), 1, h, w}, std::move(data));
}

NumericEncoder NumericEncoder::make(const NumericEncoderConfig& config, std::size_t height,
                                    std::size_t width, Rng& rng) {
  config.validate();
  NumericEncoder enc;
  enc.config = config;
  enc.height = height;
  enc.width = width;
  enc.t_omega = Conv2d::make(1, config.key_channels, 1, 1, 0, rng);
  enc.t_mu = Conv2d::make(1, config.value_channels, 1, 1, 0, rng);
  enc.local_in = Conv2d::make(1, config.local_channels, 1, 1, 0, rng);
  for (const auto& spec : config.stack) {
    enc.stack_conv.push_back(
        Conv2d::make(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding, rng));
    enc.stack_bn.push_back(BatchNorm2d::make(spec.out_channels));
  }
  const auto flat = enc.flattened_size();
  enc.proj_global = Linear::make(flat, config.branch_dim, rng);
  enc.proj_local = Linear::make(flat, config.branch_dim, rng);
  return enc;
}

std::size_t NumericEncoder::flattened_size() const {
  std::size_t h = height, w = width;
  for (const auto& spec : config.stack) {
    h = spec.output_size(h);
    w = spec.output_size(w);
  }
  return config.stack.back().out_channels * h * w;
}

Var NumericEncoder::global_receptive(const Var& x) const {
  return non_local(t_omega(x), t_mu(x));
}

Var NumericEncoder::local_receptive(const Var& x) const { return local_in(x); }

Var NumericEncoder::shared_stack(const Var& features, bool training) {
  if (features->shape.size() != 4 || features->shape[1] != config.stack.front().in_channels) {
    throw ShapeError("shared_stack: expected [N, " + std::to_string(config.stack.front().in_channels) +
                     ", H, W], got " + shape_str(features->shape));
  }
  Var h = features;
  for (std::size_t i = 0; i < stack_conv.size(); ++i) {
    h = stack_conv[i](h);
    if (config.stack[i].batchnorm) h = stack_bn[i].forward(h, training);
    if (config.stack[i].relu) h = relu(h);
  }
  return h;
}

Var NumericEncoder::encode(const Var& x, bool training) {
  if (x->shape.size() != 4 || x->shape[1] != 1 || x->shape[2] != height || x->shape[3] != width) {
    throw ShapeError("encode_numeric: expected [N, 1, " + std::to_string(height) + ", " +
                     std::to_string(width) + "], got " + shape_str(x->shape));
  }
  const auto n = x->shape[0];
  // One pass through the shared stack for both branches keeps the batch
  // statistics of training and the running statistics of inference aligned.
  Var both = concat_rows(global_receptive(x), local_receptive(x));
  Var deep = shared_stack(both, training);
  Var flat = reshape(deep, {2 * n, deep->size() / (2 * n)});
  Var zg = relu(proj_global(slice_rows(flat, 0, n)));
  Var zl = relu(proj_local(slice_rows(flat, n, 2 * n)));
  return concat_cols(zg, zl);
}

std::vector<double> NumericEncoder::attention_weights(const MalwareImage& image) const {
  Var x = images_to_tensor(std::span<const MalwareImage>(&image, 1));
  Var key = t_omega(x);
  const auto ck = key->shape[1], p = key->shape[2] * key->shape[3];
  std::vector<double> w(p * p);
  for (std::size_t i = 0; i < p; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < p; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < ck; ++c) dot += key->value[c * p + i] * key->value[c * p + j];
      w[i * p + j] = dot;
      mx = std::max(mx, dot);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < p; ++j) total += (w[i * p + j] = std::exp(w[i * p + j] - mx));
    for (std::size_t j = 0; j < p; ++j) w[i * p + j] /= total;
  }
  return w;
}

std::vector<std::string> NumericEncoder::layer_kinds() const {
  std::vector<std::string> kinds{"conv1x1", "conv1x1", "nonlocal", "conv1x1"};
  for (const auto& spec : config.stack) {
    kinds.push_back("conv" + std::to_string(spec.kernel) + "x" + std::to_string(spec.kernel) + "/s" +
                    std::to_string(spec.stride));
    if (spec.batchnorm) kinds.emplace_back("batchnorm");
    if (spec.relu) kinds.emplace_back("relu");
  }
  kinds.insert(kinds.end(), {"linear", "relu", "linear", "relu", "concat"});
  return kinds;
}

void NumericEncoder::register_params(ParamRegistry& reg, const std::string& prefix) {
  t_omega.register_params(reg, prefix + ".global.t_omega");
  t_mu.register_params(reg, prefix + ".global.t_mu");
  local_in.register_params(reg, prefix + ".local.conv");
  for (std::size_t i = 0; i < stack_conv.size(); ++i) {
    const auto p = prefix + ".stack." + std::to_string(i);
    stack_conv[i].register_params(reg, p + ".conv");
    stack_bn[i].register_params(reg, p + ".bn");
  }
  proj_global.register_params(reg, prefix + ".proj_global");
  proj_local.register_params(reg, prefix + ".proj_local");
}

}  // namespace mdenet

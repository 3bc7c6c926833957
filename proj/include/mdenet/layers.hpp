#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "mdenet/autograd.hpp"
#include "mdenet/rng.hpp"

namespace mdenet {

// Flat view of every trainable tensor and persistent buffer in a model,
// keyed by a dotted layer path ("numeric.stack.0.conv.weight").
struct ParamRegistry {
  struct Buffer {
    std::string name;
    Shape shape;
    std::vector<double>* data;
  };
  std::vector<std::pair<std::string, Var>> params;
  std::vector<Buffer> buffers;

  void add(std::string name, const Var& v) { params.emplace_back(std::move(name), v); }
  void add_buffer(std::string name, Shape shape, std::vector<double>* data) {
    buffers.push_back({std::move(name), std::move(shape), data});
  }
  std::vector<Var> vars() const;
  std::size_t parameter_count() const;
};

// U(-bound, bound) with bound = 1/sqrt(fan_in).
std::vector<double> fan_in_uniform(std::size_t count, std::size_t fan_in, Rng& rng);

struct Linear {
  Var weight;  // [in, out]
  Var bias;    // [out], may be null
  static Linear make(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  Var operator()(const Var& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight->shape[0]; }
  std::size_t out_features() const { return weight->shape[1]; }
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct Conv2d {
  Var weight;  // [out, in, k, k]
  Var bias;    // [out]
  int stride = 1;
  int padding = 0;
  static Conv2d make(std::size_t in, std::size_t out, int kernel, int stride, int padding, Rng& rng);
  Var operator()(const Var& x) const { return conv2d(x, weight, bias, stride, padding); }
  std::size_t out_channels() const { return weight->shape[0]; }
  int kernel() const { return static_cast<int>(weight->shape[2]); }
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

struct BatchNorm2d {
  Var gamma;
  Var beta;
  BatchNormStats stats;
  static BatchNorm2d make(std::size_t channels);
  Var forward(const Var& x, bool training) { return batch_norm2d(x, gamma, beta, stats, training); }
  void register_params(ParamRegistry& reg, const std::string& prefix);
};

struct LayerNormParams {
  Var gamma;
  Var beta;
  static LayerNormParams make(std::size_t dim);
  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

}  // namespace mdenet

#include "mdenet/layers.hpp"

#include <cmath>

namespace mdenet {

std::vector<Var> ParamRegistry::vars() const {
  std::vector<Var> out;
  out.reserve(params.size());
  for (const auto& [name, v] : params) out.push_back(v);
  return out;
}

std::size_t ParamRegistry::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, v] : params) n += v->size();
  return n;
}

std::vector<double> fan_in_uniform(std::size_t count, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in == 0 ? 1 : fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> out(count);
  for (auto& v : out) v = dist(rng);
  return out;
}

Linear Linear::make(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  Linear l;
  l.weight = parameter({in, out}, fan_in_uniform(in * out, in, rng));
  if (with_bias) l.bias = parameter({out}, fan_in_uniform(out, in, rng));
  return l;
}

void Linear::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".weight", weight);
  if (bias) reg.add(prefix + ".bias", bias);
}

Conv2d Conv2d::make(std::size_t in, std::size_t out, int kernel, int stride, int padding, Rng& rng) {
  Conv2d c;
  const auto k = static_cast<std::size_t>(kernel);
  const auto fan_in = in * k * k;
  c.weight = parameter({out, in, k, k}, fan_in_uniform(out * fan_in, fan_in, rng));
  c.bias = parameter({out}, fan_in_uniform(out, fan_in, rng));
  c.stride = stride;
  c.padding = padding;
  return c;
}

void Conv2d::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".weight", weight);
  reg.add(prefix + ".bias", bias);
}

BatchNorm2d BatchNorm2d::make(std::size_t channels) {
  BatchNorm2d bn;
  bn.gamma = parameter({channels}, std::vector<double>(channels, 1.0));
  bn.beta = parameter({channels}, std::vector<double>(channels, 0.0));
  bn.stats.running_mean.assign(channels, 0.0);
  bn.stats.running_var.assign(channels, 1.0);
  return bn;
}

void BatchNorm2d::register_params(ParamRegistry& reg, const std::string& prefix) {
  reg.add(prefix + ".gamma", gamma);
  reg.add(prefix + ".beta", beta);
  const Shape shape{stats.running_mean.size()};
  reg.add_buffer(prefix + ".running_mean", shape, &stats.running_mean);
  reg.add_buffer(prefix + ".running_var", shape, &stats.running_var);
}

LayerNormParams LayerNormParams::make(std::size_t dim) {
  return {parameter({dim}, std::vector<double>(dim, 1.0)),
          parameter({dim}, std::vector<double>(dim, 0.0))};
}

void LayerNormParams::register_params(ParamRegistry& reg, const std::string& prefix) const {
  reg.add(prefix + ".gamma", gamma);
  reg.add(prefix + ".beta", beta);
}

}  // namespace mdenet

#pragma once

// Training-only regularizers: a triplet term that pulls same-family
// embeddings together and pushes other families away, and an enclosing-sphere
// term on a linear sub-space projection with a trainable radius.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mdenet/layers.hpp"

namespace mdenet {

// Indices into the training set.
struct Triplet {
  std::size_t anchor = 0;
  std::size_t positive = 0;
  std::size_t negative = 0;
};

class TripletSampler {
 public:
  TripletSampler(std::span<const int> labels, std::vector<std::string> family_names = {});

  // Positive: uniform over the anchor's family minus the anchor. Negative:
  // uniform over every sample of every other family.
  Triplet sample(std::size_t anchor, Rng& rng) const;
  std::vector<Triplet> sample(std::span<const std::size_t> anchors, Rng& rng) const;

 private:
  std::vector<int> labels_;
  std::vector<std::vector<std::size_t>> members_;  // per family id
  std::vector<std::string> names_;
};

struct LossWeights {
  double alpha = 0.3;
  double beta = 0.5;

  // alpha, beta, 1 - alpha - beta all >= 0.1 (up to 1e-9 slack).
  void validate() const;
  double excl_weight() const { return 1.0 - alpha - beta; }
};

struct SphereState {
  Linear sub;  // d_z -> d_sub, no bias
  Var rho;     // single value, kept >= 0
  double lambda = 10.0;
  double norm_cap = 10.0;

  static SphereState make(std::size_t embedding_dim, std::size_t sub_dim, double lambda,
                          double norm_cap, Rng& rng);
  double radius() const { return rho->value[0]; }
  double projection_norm() const;
  // Median of ||Sub(z_i)|| over the rows of z.
  void init_radius(const Var& z);
  // rho >= 0 and ||Theta_Sub|| <= norm_cap, applied after every optimizer step.
  void project();
  void register_params(ParamRegistry& reg, const std::string& prefix) const;
};

// sum_i (||z_i - z+_i|| - ||z_i - z-_i||), or with a margin
// sum_i max(0, m + ||z_i - z+_i|| - ||z_i - z-_i||).
Var disc_loss(const Var& z, const Var& z_pos, const Var& z_neg,
              std::optional<double> margin = std::nullopt);

// sum_i max(||Sub(z_i)|| - rho, 0) + rho - lambda * ||Theta_Sub||.
Var excl_loss(const Var& z, const SphereState& sphere);

Var total_loss(const Var& cls, const Var& disc, const Var& excl, const LossWeights& w);
double total_loss(double cls, double disc, double excl, const LossWeights& w);

}  // namespace mdenet

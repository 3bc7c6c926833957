#include "mdenet/dual_embedding.hpp"

#include <algorithm>
#include <cmath>

#include "mdenet/errors.hpp"

namespace mdenet {

TripletSampler::TripletSampler(std::span<const int> labels, std::vector<std::string> family_names)
    : labels_(labels.begin(), labels.end()), names_(std::move(family_names)) {
  for (std::size_t i = 0; i < labels_.size(); ++i) {
    if (labels_[i] < 0) throw TripletError("negative family id in training labels");
    const auto f = static_cast<std::size_t>(labels_[i]);
    if (members_.size() <= f) members_.resize(f + 1);
    members_[f].push_back(i);
  }
  const auto populated = std::count_if(members_.begin(), members_.end(),
                                       [](const auto& m) { return !m.empty(); });
  if (populated < 2) throw TripletError("triplet sampling needs at least two known families");
}

Triplet TripletSampler::sample(std::size_t anchor, Rng& rng) const {
  if (anchor >= labels_.size()) throw TripletError("anchor index out of range");
  const auto fam = static_cast<std::size_t>(labels_[anchor]);
  const auto& own = members_[fam];
  if (own.size() < 2) {
    const auto name = fam < names_.size() ? names_[fam] : "id " + std::to_string(fam);
    throw TripletError("family '" + name + "' has a single training sample; no positive exists");
  }
  Triplet t{anchor, 0, 0};
  std::uniform_int_distribution<std::size_t> pos(0, own.size() - 2);
  const auto anchor_rank = static_cast<std::size_t>(
      std::lower_bound(own.begin(), own.end(), anchor) - own.begin());
  auto r = pos(rng);
  if (r >= anchor_rank) ++r;
  t.positive = own[r];

  std::uniform_int_distribution<std::size_t> neg(0, labels_.size() - own.size() - 1);
  auto k = neg(rng);
  for (std::size_t f = 0; f < members_.size(); ++f) {
    if (f == fam) continue;
    if (k < members_[f].size()) {
      t.negative = members_[f][k];
      break;
    }
    k -= members_[f].size();
  }
  return t;
}

std::vector<Triplet> TripletSampler::sample(std::span<const std::size_t> anchors, Rng& rng) const {
  std::vector<Triplet> out;
  out.reserve(anchors.size());
  for (auto a : anchors) out.push_back(sample(a, rng));
  return out;
}

void LossWeights::validate() const {
  constexpr double kMin = 0.1 - 1e-9;
  if (!(alpha >= kMin && beta >= kMin && excl_weight() >= kMin)) {
    throw ConfigError("loss weights: alpha, beta and 1 - alpha - beta must each be >= 0.1 (got " +
                      std::to_string(alpha) + ", " + std::to_string(beta) + ")");
  }
}

SphereState SphereState::make(std::size_t embedding_dim, std::size_t sub_dim, double lambda,
                              double norm_cap, Rng& rng) {
  if (!(lambda > 0.0)) throw ConfigError("sphere: lambda must be positive");
  if (sub_dim == 0) throw ConfigError("sphere: sub-space dimension must be positive");
  SphereState s;
  s.sub = Linear::make(embedding_dim, sub_dim, rng, /*with_bias=*/false);
  s.rho = parameter({1}, {1.0});
  s.lambda = lambda;
  s.norm_cap = norm_cap;
  s.project();
  return s;
}

double SphereState::projection_norm() const {
  double s = 0.0;
  for (double v : sub.weight->value) s += v * v;
  return std::sqrt(s);
}

void SphereState::init_radius(const Var& z) {
  Var norms = row_norm(sub(z));
  std::vector<double> v = norms->value;
  if (v.empty()) return;
  std::sort(v.begin(), v.end());
  const auto n = v.size();
  rho->value[0] = n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

void SphereState::project() {
  rho->value[0] = std::max(rho->value[0], 0.0);
  const double norm = projection_norm();
  if (norm_cap > 0.0 && norm > norm_cap) {
    for (auto& v : sub.weight->value) v *= norm_cap / norm;
  }
}

void SphereState::register_params(ParamRegistry& reg, const std::string& prefix) const {
  sub.register_params(reg, prefix + ".sub");
  reg.add(prefix + ".rho", rho);
}

Var disc_loss(const Var& z, const Var& z_pos, const Var& z_neg, std::optional<double> margin) {
  Var pos = row_distance(z, z_pos);
  Var neg = row_distance(z, z_neg);
  Var diff = sub(pos, neg);
  if (!margin) return sum(diff);
  Var shifted = add(diff, constant(diff->shape, std::vector<double>(diff->size(), *margin)));
  return sum(relu(shifted));
}

Var excl_loss(const Var& z, const SphereState& sphere) {
  Var norms = row_norm(sphere.sub(z));
  Var hinge = hinge_sum(norms, sphere.rho);
  Var rho = reshape(sphere.rho, {});
  return sub(add(hinge, rho), scale(frobenius_norm(sphere.sub.weight), sphere.lambda));
}

Var total_loss(const Var& cls, const Var& disc, const Var& excl, const LossWeights& w) {
  w.validate();
  return add(add(scale(cls, w.alpha), scale(disc, w.beta)), scale(excl, w.excl_weight()));
}

double total_loss(double cls, double disc, double excl, const LossWeights& w) {
  w.validate();
  return w.alpha * cls + w.beta * disc + w.excl_weight() * excl;
}

}  // namespace mdenet

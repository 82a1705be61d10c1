#pragma once

#include <span>
#include <vector>

#include "lsemvae/nets.hpp"

namespace lsemvae {

inline constexpr double kMixtureVarFloor = 1e-8;

/// Graph-level two-level fusion result. `experts` holds the lead experts
/// followed by the product-of-experts expert.
struct FusionVars {
  std::vector<ExpertVars> experts;
  Var logits;
  Var weights;
  ExpertVars joint;
  Var z;
};

/// Precision-weighted product of Gaussian experts.
template <typename T>
ExpertVars poe_fuse(Tape<T>& tape, std::span<const ExpertVars> experts);

template <typename T>
Var gate_weights(Tape<T>& tape, Var logits);

/// Moment-matched mixture with one scalar weight per expert, applied to every
/// latent dimension. Variance is floored at kMixtureVarFloor.
template <typename T>
ExpertVars moe_fuse(Tape<T>& tape, std::span<const ExpertVars> experts, Var weights);

/// z = mu + sqrt(var) * eps, with eps a constant so gradients reach only mu and var.
template <typename T>
Var reparameterize(Tape<T>& tape, const ExpertVars& joint, const Tensor<T>& eps);

/// Level 1 PoE over the present leads, level 2 gated MoE over leads + PoE.
/// `eps` null gives z = mu (deterministic features).
template <typename T>
FusionVars hime_forward(ParamBinder<T>& p, std::span<const ExpertVars> lead_experts, const Tensor<T>* eps);

// ------------------------------------------------------------- value level

struct FusionOutput {
  std::vector<GaussianExpert> experts;
  std::vector<double> weights;
  GaussianExpert joint;
  std::vector<double> z;
};

GaussianExpert poe_fuse(std::span<const GaussianExpert> experts);
std::vector<double> gate_weights(std::span<const double> logits);
/// Throws DomainError when weights leave the simplex by more than 1e-6.
GaussianExpert moe_fuse(std::span<const GaussianExpert> experts, std::span<const double> weights);
std::vector<double> reparameterize(const GaussianExpert& joint, std::span<const double> eps);
std::vector<double> reparameterize(const GaussianExpert& joint, CounterRng& rng);
FusionOutput hime_forward(const ParamStore<double>& gate_params, std::span<const GaussianExpert> lead_experts,
                          CounterRng& rng);

}  // namespace lsemvae

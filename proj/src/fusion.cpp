#include "lsemvae/fusion.hpp"

#include <cmath>

namespace lsemvae {

template <typename T>
ExpertVars poe_fuse(Tape<T>& t, std::span<const ExpertVars> experts) {
  if (experts.empty()) throw ShapeError("product of experts needs at least one expert");
  const Var ones = t.constant(Tensor<T>(t.shape(experts[0].var), T(1)));
  Var precision_sum, weighted_sum;
  for (std::size_t m = 0; m < experts.size(); ++m) {
    Var precision = t.div(ones, experts[m].var);
    Var weighted = t.mul(experts[m].mu, precision);
    precision_sum = m == 0 ? precision : t.add(precision_sum, precision);
    weighted_sum = m == 0 ? weighted : t.add(weighted_sum, weighted);
  }
  return {t.div(weighted_sum, precision_sum), t.div(ones, precision_sum)};
}

template <typename T>
Var gate_weights(Tape<T>& t, Var logits) {
  return t.softmax(logits);
}

template <typename T>
ExpertVars moe_fuse(Tape<T>& t, std::span<const ExpertVars> experts, Var weights) {
  if (experts.empty() || t.size(weights) != experts.size()) {
    throw ShapeError("mixture needs one weight per expert");
  }
  Var mean, second;
  for (std::size_t k = 0; k < experts.size(); ++k) {
    Var w = t.slice(weights, k, 1);
    Var m = t.scale(experts[k].mu, w);
    Var s = t.scale(t.add(experts[k].var, t.square(experts[k].mu)), w);
    mean = k == 0 ? m : t.add(mean, m);
    second = k == 0 ? s : t.add(second, s);
  }
  Var var = t.sub(second, t.square(mean));
  var = t.clamp(var, static_cast<T>(kMixtureVarFloor), std::numeric_limits<T>::max());
  return {mean, var};
}

template <typename T>
Var reparameterize(Tape<T>& t, const ExpertVars& joint, const Tensor<T>& eps) {
  if (eps.size() != t.size(joint.mu)) throw ShapeError("noise length does not match latent dimension");
  Var e = t.constant(Tensor<T>(t.shape(joint.mu), eps.data));
  return t.add(joint.mu, t.mul(t.sqrt(joint.var), e));
}

template <typename T>
FusionVars hime_forward(ParamBinder<T>& p, std::span<const ExpertVars> lead_experts, const Tensor<T>* eps) {
  if (lead_experts.empty()) throw ShapeError("fusion needs at least one lead expert");
  auto& t = p.tape();
  FusionVars out;
  out.experts.assign(lead_experts.begin(), lead_experts.end());
  out.experts.push_back(poe_fuse(t, lead_experts));
  std::vector<Var> mus;
  for (const auto& e : out.experts) mus.push_back(e.mu);
  out.logits = gating_forward(p, std::span<const Var>(mus));
  out.weights = gate_weights(t, out.logits);
  out.joint = moe_fuse(t, std::span<const ExpertVars>(out.experts), out.weights);
  out.z = eps ? reparameterize(t, out.joint, *eps) : out.joint.mu;
  return out;
}

#define LSEMVAE_INSTANTIATE(T)                                                                   \
  template ExpertVars poe_fuse<T>(Tape<T>&, std::span<const ExpertVars>);                         \
  template Var gate_weights<T>(Tape<T>&, Var);                                                    \
  template ExpertVars moe_fuse<T>(Tape<T>&, std::span<const ExpertVars>, Var);                    \
  template Var reparameterize<T>(Tape<T>&, const ExpertVars&, const Tensor<T>&);                  \
  template FusionVars hime_forward<T>(ParamBinder<T>&, std::span<const ExpertVars>, const Tensor<T>*);

LSEMVAE_INSTANTIATE(float)
LSEMVAE_INSTANTIATE(double)
#undef LSEMVAE_INSTANTIATE

// ---------------------------------------------------------------- value level

namespace {

std::vector<ExpertVars> to_vars(Tape<double>& t, std::span<const GaussianExpert> experts) {
  std::vector<ExpertVars> out;
  for (const auto& e : experts) {
    e.validate();
    if (e.dim() != experts[0].dim()) throw ShapeError("experts differ in latent dimension");
    out.push_back({t.constant(Tensor<double>::vector(e.mu)), t.constant(Tensor<double>::vector(e.var))});
  }
  return out;
}

GaussianExpert read(const Tape<double>& t, const ExpertVars& e) {
  return {t.value(e.mu).data, t.value(e.var).data};
}

}  // namespace

GaussianExpert poe_fuse(std::span<const GaussianExpert> experts) {
  Tape<double> t;
  auto vars = to_vars(t, experts);
  return read(t, poe_fuse(t, std::span<const ExpertVars>(vars)));
}

std::vector<double> gate_weights(std::span<const double> logits) {
  for (double g : logits) {
    if (!std::isfinite(g)) throw DomainError("gate logits must be finite");
  }
  Tape<double> t;
  return t.value(gate_weights(t, t.constant(Tensor<double>::vector({logits.begin(), logits.end()})))).data;
}

GaussianExpert moe_fuse(std::span<const GaussianExpert> experts, std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= -1e-6)) throw DomainError("mixture weight below zero");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-6) throw DomainError("mixture weights sum to " + std::to_string(total));
  Tape<double> t;
  auto vars = to_vars(t, experts);
  Var w = t.constant(Tensor<double>::vector({weights.begin(), weights.end()}));
  return read(t, moe_fuse(t, std::span<const ExpertVars>(vars), w));
}

std::vector<double> reparameterize(const GaussianExpert& joint, std::span<const double> eps) {
  joint.validate();
  Tape<double> t;
  ExpertVars j{t.constant(Tensor<double>::vector(joint.mu)), t.constant(Tensor<double>::vector(joint.var))};
  return t.value(reparameterize(t, j, Tensor<double>::vector({eps.begin(), eps.end()}))).data;
}

std::vector<double> reparameterize(const GaussianExpert& joint, CounterRng& rng) {
  std::vector<double> eps(joint.dim());
  for (auto& e : eps) e = rng.normal();
  return reparameterize(joint, eps);
}

FusionOutput hime_forward(const ParamStore<double>& gate_params, std::span<const GaussianExpert> lead_experts,
                          CounterRng& rng) {
  Tape<double> t;
  ParamBinder<double> p(t, gate_params);
  auto vars = to_vars(t, lead_experts);
  Tensor<double> eps(Shape{lead_experts.front().dim()});
  for (auto& e : eps.data) e = rng.normal();
  auto f = hime_forward(p, std::span<const ExpertVars>(vars), &eps);
  FusionOutput out;
  for (const auto& e : f.experts) out.experts.push_back(read(t, e));
  out.weights = t.value(f.weights).data;
  out.joint = read(t, f.joint);
  out.z = t.value(f.z).data;
  return out;
}

}  // namespace lsemvae

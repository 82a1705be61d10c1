#include "lsemvae/objectives.hpp"

#include <cmath>

namespace lsemvae {

void LossWeights::validate(std::size_t num_leads) const {
  if (lambda.size() != num_leads) {
    throw SpecError("expected " + std::to_string(num_leads) + " lead weights, got " + std::to_string(lambda.size()));
  }
  for (double l : lambda) {
    if (!(l > 0.0)) throw SpecError("lead weights must be positive");
  }
  if (!(beta >= 0.0 && beta <= 1.0)) throw SpecError("beta must lie in [0, 1]");
  if (!(gamma > 0.0)) throw SpecError("gamma must be positive");
}

std::vector<double> LossWeights::for_leads(const std::vector<std::string>& leads) {
  std::vector<double> out;
  for (const auto& lead : leads) {
    double w = 1.0;
    for (std::size_t i = 0; i < kTwelveLeads.size(); ++i) {
      if (kTwelveLeads[i] == lead) w = kTwelveLeadWeights[i];
    }
    out.push_back(w);
  }
  return out;
}

template <typename T>
Var weighted_mse(Tape<T>& t, std::span<const Var> recon, std::span<const Var> target, std::span<const double> lambda) {
  if (recon.size() != target.size() || recon.size() != lambda.size() || recon.empty()) {
    throw ShapeError("weighted_mse needs one reconstruction, target and weight per lead");
  }
  Var total;
  for (std::size_t m = 0; m < recon.size(); ++m) {
    Var term = t.mul_scalar(t.mean(t.square(t.sub(recon[m], target[m]))), static_cast<T>(lambda[m]));
    total = m == 0 ? term : t.add(total, term);
  }
  return total;
}

template <typename T>
Var kl_standard_normal(Tape<T>& t, const ExpertVars& joint) {
  Var inner = t.sub(t.add(t.square(joint.mu), joint.var), t.log(joint.var));
  return t.mul_scalar(t.sum(t.add_scalar(inner, T(-1))), T(0.5));
}

template <typename T>
Var lra_loss(Tape<T>& t, std::span<const Var> mus, Var joint_mu, double gamma) {
  if (mus.empty()) throw ShapeError("alignment loss needs at least one expert");
  Var total;
  for (std::size_t k = 0; k < mus.size(); ++k) {
    Var term = t.sum(t.square(t.sub(mus[k], joint_mu)));
    total = k == 0 ? term : t.add(total, term);
  }
  return t.mul_scalar(total, static_cast<T>(gamma / static_cast<double>(mus.size())));
}

template <typename T>
Var total_pretrain_loss(Tape<T>& t, Var mse, Var kl, Var lra, double beta) {
  return t.add(t.add(mse, t.mul_scalar(kl, static_cast<T>(beta))), lra);
}

template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= t.size(logits)) {
    throw DomainError("label " + std::to_string(label) + " outside the class range");
  }
  return t.sub(t.logsumexp(logits), t.slice(logits, static_cast<std::size_t>(label), 1));
}

#define LSEMVAE_INSTANTIATE(T)                                                                          \
  template Var weighted_mse<T>(Tape<T>&, std::span<const Var>, std::span<const Var>, std::span<const double>); \
  template Var kl_standard_normal<T>(Tape<T>&, const ExpertVars&);                                     \
  template Var lra_loss<T>(Tape<T>&, std::span<const Var>, Var, double);                                 \
  template Var total_pretrain_loss<T>(Tape<T>&, Var, Var, Var, double);                                  \
  template Var cross_entropy<T>(Tape<T>&, Var, int);

LSEMVAE_INSTANTIATE(float)
LSEMVAE_INSTANTIATE(double)
#undef LSEMVAE_INSTANTIATE

double weighted_mse(const std::vector<std::vector<double>>& recon, const std::vector<std::vector<double>>& target,
                    std::span<const double> lambda) {
  Tape<double> t;
  std::vector<Var> r, x;
  for (std::size_t m = 0; m < recon.size(); ++m) {
    r.push_back(t.constant(Tensor<double>::vector(recon[m])));
    x.push_back(t.constant(Tensor<double>::vector(m < target.size() ? target[m] : std::vector<double>{})));
  }
  if (target.size() != recon.size()) throw ShapeError("weighted_mse lead count mismatch");
  return t.value(weighted_mse(t, std::span<const Var>(r), std::span<const Var>(x), lambda))[0];
}

double kl_standard_normal(const GaussianExpert& joint) {
  joint.validate();
  Tape<double> t;
  ExpertVars j{t.constant(Tensor<double>::vector(joint.mu)), t.constant(Tensor<double>::vector(joint.var))};
  return t.value(kl_standard_normal(t, j))[0];
}

double lra_loss(const std::vector<std::vector<double>>& mus, std::span<const double> joint_mu, double gamma) {
  Tape<double> t;
  std::vector<Var> m;
  for (const auto& v : mus) m.push_back(t.constant(Tensor<double>::vector(v)));
  Var j = t.constant(Tensor<double>::vector({joint_mu.begin(), joint_mu.end()}));
  return t.value(lra_loss(t, std::span<const Var>(m), j, gamma))[0];
}

double total_pretrain_loss(double mse, double kl, double lra, double beta) { return mse + beta * kl + lra; }

double cross_entropy(std::span<const double> logits, int label) {
  for (double v : logits) {
    if (!std::isfinite(v)) throw DomainError("logits must be finite");
  }
  Tape<double> t;
  Var l = t.constant(Tensor<double>::vector({logits.begin(), logits.end()}));
  return t.value(cross_entropy(t, l, label))[0];
}

double cross_entropy(const std::vector<std::vector<double>>& logits, std::span<const int> labels) {
  if (logits.size() != labels.size() || logits.empty()) throw ShapeError("one label per logit row required");
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) acc += cross_entropy(logits[i], labels[i]);
  return acc / static_cast<double>(logits.size());
}

}  // namespace lsemvae

#pragma once

#include <span>
#include <string>
#include <vector>

#include "lsemvae/fusion.hpp"
#include "lsemvae/record.hpp"

namespace lsemvae {

/// Per-lead reconstruction weights tuned for the kTwelveLeads order.
inline const std::vector<double> kTwelveLeadWeights = {5, 10, 1, 5, 1, 1, 1, 10, 5, 1, 1, 5};

struct LossWeights {
  std::vector<double> lambda = kTwelveLeadWeights;
  double beta = 0.0;
  double gamma = 0.1;

  void validate(std::size_t num_leads) const;
  /// Weight for `lead`: the tuned value for standard lead names, else 1.
  static std::vector<double> for_leads(const std::vector<std::string>& leads);
};

// Graph builders operate on one sample; batch means are taken by the caller.

/// sum_m lambda_m * mean_t (recon_m - target_m)^2
template <typename T>
Var weighted_mse(Tape<T>& t, std::span<const Var> recon, std::span<const Var> target,
                 std::span<const double> lambda);

/// sum over dims of 0.5 (mu^2 + var - ln var - 1)
template <typename T>
Var kl_standard_normal(Tape<T>& t, const ExpertVars& joint);

/// gamma / K * sum_k ||mu_k - joint_mu||^2 with K = number of experts.
template <typename T>
Var lra_loss(Tape<T>& t, std::span<const Var> mus, Var joint_mu, double gamma);

template <typename T>
Var total_pretrain_loss(Tape<T>& t, Var mse, Var kl, Var lra, double beta);

/// -log softmax(logits)[label] via log-sum-exp.
template <typename T>
Var cross_entropy(Tape<T>& t, Var logits, int label);

// Value-level forms.
double weighted_mse(const std::vector<std::vector<double>>& recon, const std::vector<std::vector<double>>& target,
                    std::span<const double> lambda);
double kl_standard_normal(const GaussianExpert& joint);
double lra_loss(const std::vector<std::vector<double>>& mus, std::span<const double> joint_mu, double gamma);
double total_pretrain_loss(double mse, double kl, double lra, double beta);
double cross_entropy(std::span<const double> logits, int label);
/// Mean over a batch of (logits, label) pairs.
double cross_entropy(const std::vector<std::vector<double>>& logits, std::span<const int> labels);

}  // namespace lsemvae

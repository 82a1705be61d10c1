#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lsemvae/objectives.hpp"
#include "lsemvae/record.hpp"

namespace lsemvae {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  std::size_t latent_dim = 256;
  /// Per-lead reconstruction weights; empty selects LossWeights::for_leads.
  std::vector<double> lambda;
  double gamma = 0.1;
  /// Fraction of the run over which beta ramps linearly from 0 to 1.
  double beta_ramp_fraction = 0.5;
  double grad_clip = 100.0;
  /// Share of records held out for validation; 0 trains on everything.
  double holdout_fraction = 0.0;
  std::uint64_t seed = 0;
  /// Written after every epoch when set, so a diverged run keeps its last good state.
  std::filesystem::path checkpoint_path;

  void validate() const;
};

/// min(1, epoch / ceil(total_epochs * ramp_fraction)) for 0-based epochs.
double beta_schedule(std::size_t epoch, std::size_t total_epochs, double ramp_fraction = 0.5);

struct AdamWConfig {
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct OptimizerState {
  ParamStore<T> m;
  ParamStore<T> v;
  std::uint64_t step = 0;
};

/// p <- p - lr * wd * p, then the bias-corrected Adam update. Parameters
/// absent from `grads` are left untouched and get no state.
template <typename T>
void adamw_step(ParamStore<T>& params, const ParamStore<T>& grads, OptimizerState<T>& state,
                const AdamWConfig& config);

/// Rescales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before.
template <typename T>
double clip_grad_norm(ParamStore<T>& grads, double max_norm);

/// Lead signals of `record` in the order of `leads`, each as a [1, L] tensor.
template <typename T>
std::vector<Tensor<T>> lead_inputs(const EcgRecord& record, const std::vector<std::string>& leads);

template <typename T>
struct PretrainTerms {
  Var mse;
  Var kl;
  Var lra;
  Var total;
  FusionVars fusion;
};

/// One sample: encode every lead, fuse, decode once from z and compare the
/// shared reconstruction against every lead. `eps` null decodes from the mean.
template <typename T>
PretrainTerms<T> build_pretrain_loss(ParamBinder<T>& p, const std::vector<std::string>& leads,
                                     std::span<const Var> inputs, const LossWeights& weights, const Tensor<T>* eps);

struct EpochLog {
  std::size_t epoch = 0;
  double mse = 0.0;
  double kl = 0.0;
  double lra = 0.0;
  double beta = 0.0;
  double total = 0.0;
  std::optional<double> holdout_total;
};

std::string format_epoch_log(const std::vector<EpochLog>& log);

struct PretrainResult {
  ModelConfig model;
  ParamStore<float> params;
  std::vector<EpochLog> log;
  std::size_t optimizer_steps = 0;

  Checkpoint checkpoint() const;
};

using EpochCallback = std::function<void(const EpochLog&, const ParamStore<float>&)>;

/// Throws CorpusError on inconsistent leads or lengths and DivergenceError on a
/// non-finite loss.
PretrainResult pretrain(const std::vector<EcgRecord>& corpus, const TrainConfig& config,
                        const EpochCallback& on_epoch = nullptr);

/// Checks that all records share lead names (same order) and a length that is
/// a multiple of 8; returns them.
std::pair<std::vector<std::string>, std::size_t> corpus_layout(const std::vector<EcgRecord>& corpus);

struct LatentRow {
  std::string record_id;
  std::string expert_id;
  std::vector<double> mu;
};

/// Per record: one row per lead encoder, then "PoE" and "MoE".
std::vector<LatentRow> export_latents(const ModelConfig& model, const ParamStore<float>& params,
                                      const std::vector<EcgRecord>& corpus);
std::string format_latents(const std::vector<LatentRow>& rows, std::size_t latent_dim);

}  // namespace lsemvae

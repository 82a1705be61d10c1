#include "lsemvae/train.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace lsemvae {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
  if (latent_dim < 1) throw ConfigError("latent_dim must be >= 1");
  if (!(gamma > 0.0)) throw ConfigError("gamma must be positive");
  if (!(beta_ramp_fraction > 0.0 && beta_ramp_fraction <= 1.0)) throw ConfigError("beta_ramp_fraction must lie in (0, 1]");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw ConfigError("holdout_fraction must lie in [0, 1)");
}

double beta_schedule(std::size_t epoch, std::size_t total_epochs, double ramp_fraction) {
  if (total_epochs == 0) throw ContractError("beta schedule needs at least one epoch");
  const double ramp = std::ceil(static_cast<double>(total_epochs) * ramp_fraction);
  if (ramp <= 0.0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch) / ramp);
}

template <typename T>
void adamw_step(ParamStore<T>& params, const ParamStore<T>& grads, OptimizerState<T>& state,
                const AdamWConfig& c) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (const auto& [name, g] : grads.tensors) {
    auto& p = params.at(name);
    if (p.shape != g.shape) throw ShapeError("gradient shape differs for " + name);
    if (!state.m.contains(name)) {
      state.m.add(name, Tensor<T>(g.shape));
      state.v.add(name, Tensor<T>(g.shape));
    }
    auto& m = state.m.at(name).data;
    auto& v = state.v.at(name).data;
    for (std::size_t i = 0; i < p.size(); ++i) {
      double pi = static_cast<double>(p[i]);
      pi -= c.learning_rate * c.weight_decay * pi;
      const double gi = static_cast<double>(g[i]);
      const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      pi -= c.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + c.eps);
      p[i] = static_cast<T>(pi);
    }
  }
}

template <typename T>
double clip_grad_norm(ParamStore<T>& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads.tensors) {
    for (T v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && std::isfinite(norm)) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto& [name, g] : grads.tensors) {
      for (T& v : g.data) v *= scale;
    }
  }
  return norm;
}

template <typename T>
std::vector<Tensor<T>> lead_inputs(const EcgRecord& record, const std::vector<std::string>& leads) {
  std::vector<Tensor<T>> out;
  out.reserve(leads.size());
  for (const auto& lead : leads) {
    const auto idx = record.lead_index(lead);
    if (!idx) throw LeadNotFound("record '" + record.record_id + "' has no lead " + lead);
    const auto sig = record.lead(*idx);
    out.emplace_back(Shape{1, record.length}, std::vector<T>(sig.begin(), sig.end()));
  }
  return out;
}

template <typename T>
PretrainTerms<T> build_pretrain_loss(ParamBinder<T>& p, const std::vector<std::string>& leads,
                                     std::span<const Var> inputs, const LossWeights& weights, const Tensor<T>* eps) {
  if (inputs.size() != leads.size()) throw ShapeError("one input per lead is required");
  weights.validate(leads.size());
  auto& t = p.tape();
  std::vector<ExpertVars> experts;
  experts.reserve(leads.size());
  for (std::size_t m = 0; m < leads.size(); ++m) experts.push_back(encoder_forward(p, leads[m], inputs[m]));

  PretrainTerms<T> out;
  out.fusion = hime_forward(p, std::span<const ExpertVars>(experts), eps);
  const std::size_t length = t.size(inputs[0]);
  const Var recon = decoder_forward(p, out.fusion.z, length);
  std::vector<Var> recons(leads.size(), recon);
  std::vector<Var> targets;
  for (Var x : inputs) targets.push_back(t.reshape(x, Shape{length}));
  out.mse = weighted_mse(t, std::span<const Var>(recons), std::span<const Var>(targets),
                         std::span<const double>(weights.lambda));
  out.kl = kl_standard_normal(t, out.fusion.joint);
  std::vector<Var> mus;
  for (const auto& e : out.fusion.experts) mus.push_back(e.mu);
  out.lra = lra_loss(t, std::span<const Var>(mus), out.fusion.joint.mu, weights.gamma);
  out.total = total_pretrain_loss(t, out.mse, out.kl, out.lra, weights.beta);
  return out;
}

std::string format_epoch_log(const std::vector<EpochLog>& log) {
  const bool holdout = !log.empty() && log.front().holdout_total.has_value();
  std::ostringstream out;
  out << std::setprecision(9);
  out << "epoch\tmse\tkl\tlra\tbeta\ttotal" << (holdout ? "\tholdout_total" : "") << '\n';
  for (const auto& e : log) {
    out << e.epoch << '\t' << e.mse << '\t' << e.kl << '\t' << e.lra << '\t' << e.beta << '\t' << e.total;
    if (holdout) out << '\t' << e.holdout_total.value_or(NAN);
    out << '\n';
  }
  return out.str();
}

Checkpoint PretrainResult::checkpoint() const {
  Checkpoint c;
  c.metadata = model.to_metadata();
  c.metadata["kind"] = "pretrain";
  c.metadata["train.epochs_completed"] = std::to_string(log.size());
  c.metadata["train.optimizer_steps"] = std::to_string(optimizer_steps);
  c.params = params;
  return c;
}

std::pair<std::vector<std::string>, std::size_t> corpus_layout(const std::vector<EcgRecord>& corpus) {
  if (corpus.empty()) throw CorpusError("corpus is empty");
  const auto& first = corpus.front();
  for (const auto& r : corpus) {
    try {
      r.validate();
    } catch (const SpecError& e) {
      throw CorpusError(e.what());
    }
    if (r.lead_names != first.lead_names) {
      throw CorpusError("record '" + r.record_id + "' has a different lead set than '" + first.record_id + "'");
    }
    if (r.length != first.length) {
      throw CorpusError("record '" + r.record_id + "' has length " + std::to_string(r.length) + ", expected " +
                        std::to_string(first.length));
    }
  }
  if (first.length % 8 != 0) throw CorpusError("record length must be a multiple of 8");
  return {first.lead_names, first.length};
}

namespace {

struct SampleTerms {
  double mse, kl, lra, total;
};

// Forward (and backward when grads is set) for one record.
SampleTerms run_sample(const ParamStore<float>& params, ParamStore<float>* grads, const std::vector<std::string>& leads,
                       const EcgRecord& record, const LossWeights& weights, const Tensor<float>* eps,
                       double loss_scale) {
  Tape<float> tape;
  ParamBinder<float> binder(tape, params, grads);
  std::vector<Var> inputs;
  for (auto& x : lead_inputs<float>(record, leads)) inputs.push_back(tape.constant(std::move(x)));
  const auto terms = build_pretrain_loss(binder, leads, std::span<const Var>(inputs), weights, eps);
  SampleTerms out{tape.value(terms.mse)[0], tape.value(terms.kl)[0], tape.value(terms.lra)[0],
                  tape.value(terms.total)[0]};
  if (!std::isfinite(out.total)) {
    throw DivergenceError("non-finite loss on record '" + record.record_id + "'");
  }
  if (grads) tape.backward(tape.mul_scalar(terms.total, static_cast<float>(loss_scale)));
  return out;
}

}  // namespace

PretrainResult pretrain(const std::vector<EcgRecord>& corpus, const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  const auto [leads, length] = corpus_layout(corpus);

  PretrainResult result;
  result.model.leads = leads;
  result.model.encoder.input_length = length;
  result.model.encoder.latent_dim = config.latent_dim;
  result.model.with_decoder = true;
  result.model.with_classifier = false;
  result.params = init_params<float>(result.model, config.seed);

  LossWeights weights;
  weights.lambda = config.lambda.empty() ? LossWeights::for_leads(leads) : config.lambda;
  weights.gamma = config.gamma;
  weights.validate(leads.size());

  const CounterRng root(config.seed);
  std::vector<std::size_t> train_idx(corpus.size()), holdout_idx;
  for (std::size_t i = 0; i < corpus.size(); ++i) train_idx[i] = i;
  if (config.holdout_fraction > 0.0 && corpus.size() >= 2) {
    CounterRng split = root.fork(3);
    split.shuffle(train_idx);
    auto n_hold = static_cast<std::size_t>(std::llround(config.holdout_fraction * static_cast<double>(corpus.size())));
    n_hold = std::clamp<std::size_t>(n_hold, 1, corpus.size() - 1);
    holdout_idx.assign(train_idx.begin(), train_idx.begin() + static_cast<std::ptrdiff_t>(n_hold));
    train_idx.erase(train_idx.begin(), train_idx.begin() + static_cast<std::ptrdiff_t>(n_hold));
    std::sort(holdout_idx.begin(), holdout_idx.end());
    std::sort(train_idx.begin(), train_idx.end());
  }

  OptimizerState<float> opt;
  const AdamWConfig adam{config.learning_rate, config.weight_decay};
  ParamStore<float> grads = result.params.zeros_like();
  const std::size_t d = config.latent_dim;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    weights.beta = beta_schedule(epoch, config.epochs, config.beta_ramp_fraction);
    std::vector<std::size_t> order = train_idx;
    CounterRng shuffle = root.fork(1).fork(epoch);
    shuffle.shuffle(order);
    const CounterRng eps_epoch = root.fork(2).fork(epoch);

    EpochLog log;
    log.epoch = epoch + 1;
    log.beta = weights.beta;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      grads.fill_zero();
      const double scale = 1.0 / static_cast<double>(end - start);
      // Samples are visited in ascending corpus index so accumulation order is fixed.
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      std::sort(batch.begin(), batch.end());
      for (std::size_t idx : batch) {
        CounterRng eps_rng = eps_epoch.fork(idx);
        Tensor<float> eps(Shape{d});
        for (auto& e : eps.data) e = static_cast<float>(eps_rng.normal());
        const auto terms = run_sample(result.params, &grads, leads, corpus[idx], weights, &eps, scale);
        log.mse += terms.mse;
        log.kl += terms.kl;
        log.lra += terms.lra;
        log.total += terms.total;
      }
      const double norm = clip_grad_norm(grads, config.grad_clip);
      if (!std::isfinite(norm)) throw DivergenceError("non-finite gradient norm in epoch " + std::to_string(epoch + 1));
      adamw_step(result.params, grads, opt, adam);
      ++result.optimizer_steps;
    }
    const double n = static_cast<double>(order.size());
    log.mse /= n;
    log.kl /= n;
    log.lra /= n;
    log.total /= n;
    if (!holdout_idx.empty()) {
      double total = 0.0;
      for (std::size_t idx : holdout_idx) {
        total += run_sample(result.params, nullptr, leads, corpus[idx], weights, nullptr, 1.0).total;
      }
      log.holdout_total = total / static_cast<double>(holdout_idx.size());
    }
    result.log.push_back(log);
    if (!config.checkpoint_path.empty()) save_checkpoint(result.checkpoint(), config.checkpoint_path);
    if (on_epoch) on_epoch(log, result.params);
  }
  return result;
}

std::vector<LatentRow> export_latents(const ModelConfig& model, const ParamStore<float>& params,
                                      const std::vector<EcgRecord>& corpus) {
  std::vector<LatentRow> rows;
  for (const auto& record : corpus) {
    Tape<float> tape;
    ParamBinder<float> binder(tape, params);
    std::vector<ExpertVars> experts;
    const auto inputs = lead_inputs<float>(record, model.leads);
    for (std::size_t m = 0; m < model.leads.size(); ++m) {
      experts.push_back(encoder_forward(binder, model.leads[m], tape.constant(inputs[m])));
    }
    const auto fusion = hime_forward(binder, std::span<const ExpertVars>(experts), static_cast<const Tensor<float>*>(nullptr));
    auto row = [&](const std::string& id, Var mu) {
      const auto& v = tape.value(mu).data;
      rows.push_back({record.record_id, id, std::vector<double>(v.begin(), v.end())});
    };
    for (std::size_t m = 0; m < model.leads.size(); ++m) row(model.leads[m], fusion.experts[m].mu);
    row("PoE", fusion.experts.back().mu);
    row("MoE", fusion.joint.mu);
  }
  return rows;
}

std::string format_latents(const std::vector<LatentRow>& rows, std::size_t latent_dim) {
  std::ostringstream out;
  out << std::setprecision(9);
  out << "record_id\texpert_id";
  for (std::size_t i = 0; i < latent_dim; ++i) out << "\tmu_" << i;
  out << '\n';
  for (const auto& r : rows) {
    out << r.record_id << '\t' << r.expert_id;
    for (double v : r.mu) out << '\t' << v;
    out << '\n';
  }
  return out.str();
}

#define LSEMVAE_INSTANTIATE(T)                                                                                  \
  template void adamw_step<T>(ParamStore<T>&, const ParamStore<T>&, OptimizerState<T>&, const AdamWConfig&); \
  template double clip_grad_norm<T>(ParamStore<T>&, double);                                                 \
  template std::vector<Tensor<T>> lead_inputs<T>(const EcgRecord&, const std::vector<std::string>&);          \
  template PretrainTerms<T> build_pretrain_loss<T>(ParamBinder<T>&, const std::vector<std::string>&,           \
                                                   std::span<const Var>, const LossWeights&, const Tensor<T>*);

LSEMVAE_INSTANTIATE(float)
LSEMVAE_INSTANTIATE(double)
#undef LSEMVAE_INSTANTIATE

}  // namespace lsemvae

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "lsemvae/nets.hpp"
#include "lsemvae/record.hpp"

namespace lsemvae {

inline const std::vector<std::string> kLimbLeads = {"I", "II", "III", "aVR", "aVL", "aVF"};

/// Resolves "limb6", "bipolar3", "augmented3", "all12" or a comma list.
std::vector<std::string> resolve_leads(const std::string& spec);

struct FinetuneConfig {
  std::vector<std::string> lead_subset = kLimbLeads;
  std::size_t epochs = 50;
  std::size_t batch_size = 32;
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  std::size_t fc_size = 128;
  double dropout = 0.5;
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  bool unfreeze_gate = false;
  bool unfreeze_encoders = false;

  void validate() const;
};

/// Encoders + gate (+ classifier) without the decoder. Parameters in
/// `frozen` get no gradient and no optimizer state.
struct FinetuneModel {
  ModelConfig config;
  ParamStore<float> params;
  std::set<std::string> frozen;

  std::set<std::string> trainable() const;
  Checkpoint checkpoint() const;
  static FinetuneModel from_checkpoint(const Checkpoint& ckpt);
};

/// Keeps the requested encoders and the gate from a pretrained store, drops
/// the decoder and attaches a freshly initialized classifier.
FinetuneModel build_finetune_model(const ModelConfig& pretrained_config, const ParamStore<float>& pretrained,
                                   const FinetuneConfig& config);

/// Encoders, fusion on the means and the classifier; returns the logits.
/// `dropout_rng` null evaluates without dropout.
template <typename T>
Var classify_forward(ParamBinder<T>& p, const std::vector<std::string>& leads, std::span<const Var> inputs,
                     double dropout, CounterRng* dropout_rng);

/// Deterministic fused mean (classifier input) for one record.
std::vector<float> joint_features(const FinetuneModel& model, const EcgRecord& record);

// ------------------------------------------------------------------ metrics

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Throws UndefinedMetric if a class is absent.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct Confusion {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
};
Confusion confusion(std::span<const int> predicted, std::span<const int> labels);
/// Zero when any marginal is empty.
double mcc(const Confusion& c);
double accuracy(const Confusion& c);

/// Stratified fold id per sample. Throws StratificationError when a class has
/// fewer than `folds` members and DomainError on labels outside {0, 1}.
std::vector<std::size_t> kfold_split(std::span<const int> labels, std::size_t folds, std::uint64_t seed);

struct PawpResult {
  double pawp = 0.0;
  bool elevated = false;
};
/// Wedge pressure estimate from left atrial volume (mL) and LV mass (g);
/// elevated iff strictly above 15 mmHg.
PawpResult pawp_from_cmr(double lav_ml, double lvm_g);

struct Prediction {
  std::string record_id;
  std::size_t fold = 0;
  int label = 0;
  /// Logit margin of class 1 over class 0.
  double score = 0.0;
  int predicted = 0;
  std::optional<std::string> group;
};

struct FoldMetrics {
  std::size_t fold = 0;
  std::size_t n = 0;
  double accuracy = 0.0;
  double auroc = 0.0;
  double mcc = 0.0;
};

struct GroupMetrics {
  std::string group;
  std::size_t n = 0;
  /// Unset when the group holds a single class.
  std::optional<FoldMetrics> metrics;
};

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // population
};

struct MetricReport {
  std::vector<FoldMetrics> folds;
  MetricSummary accuracy, auroc, mcc;
  std::vector<GroupMetrics> groups;
};

/// Throws UndefinedMetric on a single-class set.
FoldMetrics score_predictions(std::span<const Prediction> preds, std::size_t fold = 0);
MetricReport summarize_folds(std::vector<FoldMetrics> folds);
/// "overall" first, then one entry per group tag (untagged records under "-").
std::vector<GroupMetrics> subgroup_report(std::span<const Prediction> preds);

std::string format_metric_report(const MetricReport& report);
std::string format_group_report(const std::vector<GroupMetrics>& groups);
std::string format_predictions(std::span<const Prediction> preds);
std::vector<Prediction> parse_predictions(const std::string& text);

struct FinetuneResult {
  /// One trained model per fold; fold k was validated on predictions with fold == k.
  std::vector<FinetuneModel> fold_models;
  std::vector<Prediction> predictions;
  MetricReport report;
  std::string frozen_digest;
};

/// Stratified k-fold training of the classifier. Records must carry labels.
FinetuneResult finetune(const FinetuneModel& model, const std::vector<EcgRecord>& corpus,
                        const FinetuneConfig& config);

/// Eval-mode predictions of one model on a labelled corpus (fold 0).
std::vector<Prediction> predict(const FinetuneModel& model, const std::vector<EcgRecord>& corpus);

// ------------------------------------------------------------------- labels

struct LabelEntry {
  std::string record_id;
  int label = 0;
  std::optional<std::string> group;
};

/// Tab-separated: record_id, label, optional group; first line is a header.
std::vector<LabelEntry> read_labels(const std::filesystem::path& path);
void write_labels(const std::vector<LabelEntry>& labels, const std::filesystem::path& path);
/// Throws CorpusError if a record has no entry.
void apply_labels(std::vector<EcgRecord>& corpus, const std::vector<LabelEntry>& labels);

}  // namespace lsemvae

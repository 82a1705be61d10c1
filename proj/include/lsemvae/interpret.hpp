#pragma once

#include <array>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lsemvae/finetune.hpp"

namespace lsemvae {

inline constexpr double kDefaultTau = 0.75;
inline constexpr std::size_t kDefaultIgSteps = 64;

/// Scalar function of a flat input vector, built on a tape.
using Scorer = std::function<Var(Tape<double>&, Var input)>;

/// Midpoint Riemann sum of the input gradient along the straight path from
/// `baseline` to `x`, times (x - baseline).
std::vector<double> integrated_gradients(const Scorer& f, std::span<const double> x,
                                         std::span<const double> baseline, std::size_t steps);

struct IgResult {
  int target = 0;
  /// Target logit at the input and at the baseline.
  double f_input = 0.0;
  double f_baseline = 0.0;
  /// One attribution vector per model lead.
  std::vector<std::vector<double>> alpha;

  double total() const;
};

/// Attributions of the target logit (the predicted class when unset) of an
/// eval-mode model. A null baseline is the all-zero record.
IgResult integrated_gradients(const FinetuneModel& model, const EcgRecord& record, std::optional<int> target = {},
                              const EcgRecord* baseline = nullptr, std::size_t steps = kDefaultIgSteps);

/// Min-max normalization; a constant vector maps to all zeros.
std::vector<double> normalize_attribution(std::span<const double> alpha);
std::vector<std::size_t> salient_points(std::span<const double> alpha, double tau = kDefaultTau);

/// Percentage of samples whose normalized attribution reaches tau.
double igar_lead(std::span<const double> alpha, double tau = kDefaultTau);

/// Share (%) of the salient points falling in each wave's windows, ordered
/// P..T; nullopt when there are no salient points.
std::optional<std::array<double, 5>> igar_wave(std::span<const double> alpha, const LeadSegments& segments,
                                               double tau = kDefaultTau);

struct RecordIgar {
  std::string record_id;
  std::vector<std::string> leads;
  std::vector<double> lead_pct;
  /// Unset when the lead has no salient points or could not be delineated.
  std::vector<std::optional<std::array<double, 5>>> wave_pct;
};

RecordIgar record_igar(const FinetuneModel& model, const EcgRecord& record, double tau = kDefaultTau,
                       std::size_t steps = kDefaultIgSteps);

/// Each record is scored by the fold model that validated it.
std::vector<RecordIgar> fold_igar(const std::vector<FinetuneModel>& fold_models,
                                  std::span<const Prediction> predictions, const std::vector<EcgRecord>& corpus,
                                  double tau = kDefaultTau, std::size_t steps = kDefaultIgSteps);

struct IgarRow {
  std::string lead;
  /// "all" for the lead-level row, else the wave name.
  std::string wave;
  double mean = 0.0;
  double std = 0.0;
  /// Records contributing; undefined wave entries are skipped.
  std::size_t n = 0;
};

/// Lead order follows the first record.
std::vector<IgarRow> igar_report(std::span<const RecordIgar> records);
std::string format_igar_report(const std::vector<IgarRow>& rows);

}  // namespace lsemvae

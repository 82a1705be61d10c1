#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lsemvae/record.hpp"

namespace lsemvae {

/// Per-wave amplitudes in millivolts, ordered P, Q, R, S, T.
using WaveAmplitudes = std::array<double, 5>;

/// Typical amplitudes for a standard lead name; unknown names get lead II's.
WaveAmplitudes default_lead_amplitudes(const std::string& lead);

/// Class-1 records get `magnitude` added to the chosen wave of the chosen
/// lead, in the direction of that wave's sign (so S deepens, R grows).
struct ClassEffect {
  std::string lead = "II";
  Wave wave = Wave::S;
  double magnitude = 0.0;
};

struct SynthSpec {
  std::string record_id = "synth";
  double duration_s = 10.0;
  double sample_rate_hz = 500.0;
  double heart_rate_bpm = 60.0;
  std::vector<std::string> lead_names = kTwelveLeads;
  /// One row per lead; empty means default_lead_amplitudes.
  std::vector<WaveAmplitudes> lead_amplitudes;
  double noise_std = 0.0;
  /// Relative per-record, per-lead, per-wave amplitude spread.
  double amplitude_jitter = 0.0;
  /// Peak amplitude of a slow sinusoidal baseline drift.
  double baseline_wander = 0.0;
  ClassEffect class_effect;
  std::optional<int> label;
  std::optional<std::string> group_tag;
  std::uint64_t seed = 0;

  std::size_t length() const;
  /// Throws SpecError on out-of-range fields.
  void validate() const;
};

struct SynthResult {
  EcgRecord record;
  /// Generator ground truth; beats with a wave outside the record are omitted.
  WaveSegments truth;
};

/// Each beat is a sum of five Gaussian bumps placed around R peaks at
/// (i + 0.5) * RR seconds.
SynthResult synthesize_record(const SynthSpec& spec);

/// A labelled corpus of synthetic records with balanced classes.
struct CorpusSpec {
  std::size_t count = 200;
  std::vector<std::string> leads = kTwelveLeads;
  std::size_t length = 512;
  double sample_rate_hz = 128.0;
  double heart_rate_bpm = 60.0;
  /// Each record's rate is drawn uniformly within +/- this many bpm.
  double heart_rate_spread = 0.0;
  double noise_std = 0.02;
  double amplitude_jitter = 0.1;
  double baseline_wander = 0.05;
  ClassEffect class_effect{"II", Wave::S, 0.5};
  double positive_fraction = 0.5;
  /// Group tags assigned round-robin after shuffling; empty leaves them unset.
  std::vector<std::string> groups = {"F", "M"};
  std::uint64_t seed = 0;
};

/// Record ids are "rec0000", "rec0001", ...
std::vector<SynthResult> synthesize_corpus(const CorpusSpec& spec);

/// Standard deviations of the P, Q, R, S, T bumps in seconds at RR >= 1 s;
/// P and T scale with sqrt(RR) below that.
inline constexpr WaveAmplitudes kWaveWidthsS = {0.025, 0.010, 0.012, 0.010, 0.040};

}  // namespace lsemvae

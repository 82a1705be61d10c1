#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "lsemvae/record.hpp"

namespace lsemvae {

/// Linear interpolation across interior NaN runs; leading and trailing runs
/// hold the nearest valid sample. Throws NotInterpolatable with < 2 valid samples.
std::vector<double> interpolate_missing(std::span<const double> signal);

/// One second-order section, a0 normalized to 1.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

inline constexpr double kBandLowHz = 0.5;
inline constexpr double kBandHighHz = 40.0;

/// 4th-order Butterworth high-pass at kBandLowHz cascaded with a 4th-order
/// Butterworth low-pass at kBandHighHz, as four bilinear-transform biquads.
std::vector<Biquad> design_bandpass(double sample_rate_hz);

/// Zero-phase (forward-backward) bandpass with odd-extension padding and
/// steady-state initial conditions. Needs rate > 80 Hz and at least 32 samples.
std::vector<double> bandpass_filter(std::span<const double> signal, double sample_rate_hz);

/// Population z-score. A constant input yields zeros and sets *constant.
std::vector<double> zscore(std::span<const double> signal, bool* constant = nullptr);

/// interpolate -> bandpass -> z-score. Lead names with a constant result are
/// appended to `constant_leads` when given.
std::vector<double> preprocess_signal(std::span<const float> signal, double sample_rate_hz, bool* constant = nullptr);
EcgRecord preprocess_record(const EcgRecord& record, std::vector<std::string>* constant_leads = nullptr);

}  // namespace lsemvae

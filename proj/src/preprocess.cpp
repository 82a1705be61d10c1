#include "lsemvae/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lsemvae {

std::vector<double> interpolate_missing(std::span<const double> signal) {
  std::vector<std::size_t> valid;
  for (std::size_t i = 0; i < signal.size(); ++i) {
    if (!std::isnan(signal[i])) valid.push_back(i);
  }
  if (valid.size() < 2) throw NotInterpolatable("need at least two valid samples, found " + std::to_string(valid.size()));
  std::vector<double> out(signal.begin(), signal.end());
  for (std::size_t i = 0; i < valid.front(); ++i) out[i] = signal[valid.front()];
  for (std::size_t i = valid.back() + 1; i < out.size(); ++i) out[i] = signal[valid.back()];
  for (std::size_t k = 0; k + 1 < valid.size(); ++k) {
    const std::size_t a = valid[k], b = valid[k + 1];
    if (b == a + 1) continue;
    const double ya = signal[a], yb = signal[b];
    for (std::size_t i = a + 1; i < b; ++i) {
      const double f = static_cast<double>(i - a) / static_cast<double>(b - a);
      out[i] = ya + f * (yb - ya);
    }
  }
  return out;
}

namespace {

// Butterworth pole-pair quality factors for a 4th-order prototype.
const std::array<double, 2> kButter4Q = {1.0 / (2.0 * std::cos(std::numbers::pi / 8.0)),
                                         1.0 / (2.0 * std::cos(3.0 * std::numbers::pi / 8.0))};

Biquad lowpass(double k, double q) {
  const double norm = 1.0 / (1.0 + k / q + k * k);
  const double b0 = k * k * norm;
  return {b0, 2.0 * b0, b0, 2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm};
}

Biquad highpass(double k, double q) {
  const double norm = 1.0 / (1.0 + k / q + k * k);
  return {norm, -2.0 * norm, norm, 2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm};
}

// Transposed direct form II state after an infinitely long unit step.
std::array<double, 2> step_state(const Biquad& s) {
  const double gain = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  const double z2 = s.b2 - s.a2 * gain;
  const double z1 = s.b1 - s.a1 * gain + z2;
  return {z1, z2};
}

void run_cascade(const std::vector<Biquad>& sos, std::vector<double>& x) {
  // Initial states scaled so the cascade starts in steady state for x[0].
  double dc_scale = x.front();
  for (const auto& s : sos) {
    auto z = step_state(s);
    double z1 = z[0] * dc_scale, z2 = z[1] * dc_scale;
    for (double& v : x) {
      const double in = v;
      const double y = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * y + z2;
      z2 = s.b2 * in - s.a2 * y;
      v = y;
    }
    dc_scale *= (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
  }
}

}  // namespace

std::vector<Biquad> design_bandpass(double sample_rate_hz) {
  if (!(sample_rate_hz > 2.0 * kBandHighHz)) {
    throw FilterConfigError("sample rate " + std::to_string(sample_rate_hz) + " Hz leaves no room for a " +
                            std::to_string(kBandHighHz) + " Hz cutoff");
  }
  const double k_hp = std::tan(std::numbers::pi * kBandLowHz / sample_rate_hz);
  const double k_lp = std::tan(std::numbers::pi * kBandHighHz / sample_rate_hz);
  return {highpass(k_hp, kButter4Q[0]), highpass(k_hp, kButter4Q[1]), lowpass(k_lp, kButter4Q[0]),
          lowpass(k_lp, kButter4Q[1])};
}

std::vector<double> bandpass_filter(std::span<const double> signal, double sample_rate_hz) {
  const auto sos = design_bandpass(sample_rate_hz);
  const std::size_t pad = 3 * (2 * sos.size() + 1);
  const std::size_t n = signal.size();
  if (n < 32) throw FilterConfigError("bandpass needs at least 32 samples, got " + std::to_string(n));

  // Odd extension about both end points.
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(2.0 * signal[0] - signal[i]);
  ext.insert(ext.end(), signal.begin(), signal.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(2.0 * signal[n - 1] - signal[n - 1 - i]);

  run_cascade(sos, ext);
  std::reverse(ext.begin(), ext.end());
  run_cascade(sos, ext);
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

std::vector<double> zscore(std::span<const double> signal, bool* constant) {
  if (signal.size() < 2) throw SpecError("z-score needs at least two samples");
  const double n = static_cast<double>(signal.size());
  double mean = 0.0;
  for (double v : signal) mean += v;
  mean /= n;
  double ss = 0.0;
  for (double v : signal) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / n);
  std::vector<double> out(signal.size(), 0.0);
  const bool flat = !(sd > 1e-12 * std::max(1.0, std::abs(mean)));
  if (constant) *constant = flat;
  if (flat) return out;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (signal[i] - mean) / sd;
  // A second centering pass removes the rounding residue of the first.
  double resid = 0.0;
  for (double v : out) resid += v;
  resid /= n;
  for (double& v : out) v -= resid;
  return out;
}

std::vector<double> preprocess_signal(std::span<const float> signal, double sample_rate_hz, bool* constant) {
  std::vector<double> x(signal.begin(), signal.end());
  x = interpolate_missing(x);
  x = bandpass_filter(x, sample_rate_hz);
  return zscore(x, constant);
}

EcgRecord preprocess_record(const EcgRecord& record, std::vector<std::string>* constant_leads) {
  record.validate();
  EcgRecord out = record;
  for (std::size_t m = 0; m < record.num_leads(); ++m) {
    bool flat = false;
    std::vector<double> x;
    try {
      x = preprocess_signal(record.lead(m), record.sample_rate_hz, &flat);
    } catch (const NotInterpolatable& e) {
      throw NotInterpolatable("record '" + record.record_id + "' lead " + record.lead_names[m] + ": " + e.what());
    }
    if (flat && constant_leads) constant_leads->push_back(record.lead_names[m]);
    auto dst = out.lead(m);
    for (std::size_t i = 0; i < x.size(); ++i) dst[i] = static_cast<float>(x[i]);
  }
  return out;
}

}  // namespace lsemvae

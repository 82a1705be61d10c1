#include "lsemvae/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>

#include "lsemvae/rng.hpp"

namespace lsemvae {

WaveAmplitudes default_lead_amplitudes(const std::string& lead) {
  static const std::map<std::string, WaveAmplitudes> table = {
      {"I", {0.10, -0.05, 0.80, -0.10, 0.25}},   {"II", {0.15, -0.08, 1.20, -0.20, 0.35}},
      {"III", {0.05, -0.05, 0.50, -0.15, 0.12}}, {"aVR", {-0.12, 0.05, -0.90, 0.10, -0.28}},
      {"aVL", {0.05, -0.04, 0.40, -0.08, 0.10}}, {"aVF", {0.10, -0.06, 0.85, -0.18, 0.24}},
      {"V1", {0.08, -0.02, 0.60, -0.30, 0.10}},  {"V2", {0.10, -0.05, 0.80, -0.40, 0.30}},
      {"V3", {0.10, -0.06, 1.00, -0.30, 0.35}},  {"V4", {0.10, -0.08, 1.30, -0.25, 0.35}},
      {"V5", {0.10, -0.08, 1.10, -0.15, 0.30}},  {"V6", {0.08, -0.06, 0.90, -0.10, 0.25}},
  };
  auto it = table.find(lead);
  return it == table.end() ? table.at("II") : it->second;
}

std::size_t SynthSpec::length() const { return static_cast<std::size_t>(std::llround(duration_s * sample_rate_hz)); }

void SynthSpec::validate() const {
  if (!(duration_s > 0.0) || !(sample_rate_hz > 0.0)) throw SpecError("duration and sample rate must be positive");
  const double n = duration_s * sample_rate_hz;
  const auto len = length();
  if (std::abs(n - static_cast<double>(len)) > 1e-6 || len == 0 || len % 8 != 0) {
    throw SpecError("duration x rate must be a whole multiple of 8 samples, got " + std::to_string(n));
  }
  if (!(heart_rate_bpm >= 30.0 && heart_rate_bpm <= 200.0)) {
    throw SpecError("heart rate " + std::to_string(heart_rate_bpm) + " bpm outside [30, 200]");
  }
  if (lead_names.empty()) throw SpecError("at least one lead is required");
  if (!lead_amplitudes.empty() && lead_amplitudes.size() != lead_names.size()) {
    throw SpecError("amplitude matrix needs one row per lead");
  }
  if (!(noise_std >= 0.0) || !(amplitude_jitter >= 0.0) || !(baseline_wander >= 0.0)) {
    throw SpecError("noise, jitter and wander must be non-negative");
  }
  if (!std::isfinite(class_effect.magnitude)) throw SpecError("class effect must be finite");
}

SynthResult synthesize_record(const SynthSpec& spec) {
  spec.validate();
  const std::size_t len = spec.length();
  const double fs = spec.sample_rate_hz;
  const double rr = 60.0 / spec.heart_rate_bpm;
  const double s = std::sqrt(std::min(rr, 1.0));
  const WaveAmplitudes offsets = {-0.2 * s, -0.035, 0.0, 0.040, 0.3 * s};
  const auto num_beats = static_cast<std::size_t>(std::llround(spec.duration_s / rr));

  const CounterRng root(spec.seed);
  CounterRng jitter_rng = root.fork(1);
  CounterRng wander_rng = root.fork(2);

  SynthResult out;
  EcgRecord& rec = out.record;
  rec.record_id = spec.record_id;
  rec.sample_rate_hz = fs;
  rec.lead_names = spec.lead_names;
  rec.length = len;
  rec.samples.assign(len * spec.lead_names.size(), 0.0f);
  rec.label = spec.label;
  rec.group_tag = spec.group_tag;

  const bool effect_on = spec.label.value_or(0) == 1 && spec.class_effect.magnitude != 0.0;
  std::vector<double> x(len);
  for (std::size_t m = 0; m < spec.lead_names.size(); ++m) {
    const std::string& lead = spec.lead_names[m];
    WaveAmplitudes amp = spec.lead_amplitudes.empty() ? default_lead_amplitudes(lead) : spec.lead_amplitudes[m];
    for (double& a : amp) a *= 1.0 + spec.amplitude_jitter * jitter_rng.normal();
    if (effect_on && lead == spec.class_effect.lead) {
      double& a = amp[static_cast<int>(spec.class_effect.wave)];
      a += a < 0.0 ? -spec.class_effect.magnitude : spec.class_effect.magnitude;
    }
    const double wander_hz = 0.15 + 0.2 * wander_rng.uniform();
    const double wander_phase = 2.0 * std::numbers::pi * wander_rng.uniform();

    std::fill(x.begin(), x.end(), 0.0);
    for (std::size_t b = 0; b < num_beats; ++b) {
      const double r_time = (static_cast<double>(b) + 0.5) * rr;
      for (int w = 0; w < 5; ++w) {
        const double center = (r_time + offsets[w]) * fs;
        // P and T narrow with the cycle so neighbouring beats stay apart at high rates.
        const double sigma = kWaveWidthsS[w] * (w == 0 || w == 4 ? s : 1.0) * fs;
        // Bumps are negligible beyond 6 sigma.
        const double reach = 6.0 * sigma;
        const auto lo = static_cast<std::ptrdiff_t>(std::max(0.0, std::ceil(center - reach)));
        const auto hi = static_cast<std::ptrdiff_t>(std::min(static_cast<double>(len) - 1.0, std::floor(center + reach)));
        for (std::ptrdiff_t i = lo; i <= hi; ++i) {
          const double u = (static_cast<double>(i) - center) / sigma;
          x[static_cast<std::size_t>(i)] += amp[w] * std::exp(-0.5 * u * u);
        }
      }
    }
    if (spec.baseline_wander > 0.0) {
      for (std::size_t i = 0; i < len; ++i) {
        x[i] += spec.baseline_wander *
                std::sin(2.0 * std::numbers::pi * wander_hz * static_cast<double>(i) / fs + wander_phase);
      }
    }
    if (spec.noise_std > 0.0) {
      CounterRng noise_rng = root.fork(100 + m);
      for (double& v : x) v += spec.noise_std * noise_rng.normal();
    }
    auto dst = rec.lead(m);
    for (std::size_t i = 0; i < len; ++i) dst[i] = static_cast<float>(x[i]);
  }

  std::vector<std::array<std::size_t, 5>> centers;
  for (std::size_t b = 0; b < num_beats; ++b) {
    const double r_time = (static_cast<double>(b) + 0.5) * rr;
    std::array<std::size_t, 5> c{};
    bool inside = true;
    for (int w = 0; w < 5; ++w) {
      const double idx = std::round((r_time + offsets[w]) * fs);
      if (idx < 0.0 || idx > static_cast<double>(len) - 1.0) inside = false;
      c[w] = inside ? static_cast<std::size_t>(idx) : 0;
    }
    if (inside) centers.push_back(c);
  }
  const auto half = static_cast<std::size_t>(std::llround(0.040 * fs));
  const auto beats = windows_from_centers(centers, half, len);
  out.truth.record_id = spec.record_id;
  for (const auto& lead : spec.lead_names) out.truth.leads.push_back({lead, beats});
  return out;
}

std::vector<SynthResult> synthesize_corpus(const CorpusSpec& spec) {
  if (!(spec.positive_fraction >= 0.0 && spec.positive_fraction <= 1.0)) {
    throw SpecError("positive fraction must lie in [0, 1]");
  }
  const CounterRng root(spec.seed);
  std::vector<std::size_t> order(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) order[i] = i;
  CounterRng label_rng = root.fork(1);
  label_rng.shuffle(order);
  const auto positives = static_cast<std::size_t>(std::llround(spec.positive_fraction * static_cast<double>(spec.count)));
  std::vector<int> labels(spec.count, 0);
  std::vector<std::size_t> group_of(spec.count, 0);
  for (std::size_t k = 0; k < spec.count; ++k) {
    labels[order[k]] = k < positives ? 1 : 0;
    if (!spec.groups.empty()) group_of[order[k]] = k % spec.groups.size();
  }
  CounterRng rate_rng = root.fork(2);

  std::vector<SynthResult> out;
  out.reserve(spec.count);
  for (std::size_t i = 0; i < spec.count; ++i) {
    SynthSpec s;
    char id[32];
    std::snprintf(id, sizeof id, "rec%04zu", i);
    s.record_id = id;
    s.sample_rate_hz = spec.sample_rate_hz;
    s.duration_s = static_cast<double>(spec.length) / spec.sample_rate_hz;
    s.heart_rate_bpm = spec.heart_rate_bpm + spec.heart_rate_spread * (2.0 * rate_rng.uniform() - 1.0);
    s.lead_names = spec.leads;
    s.noise_std = spec.noise_std;
    s.amplitude_jitter = spec.amplitude_jitter;
    s.baseline_wander = spec.baseline_wander;
    s.class_effect = spec.class_effect;
    s.label = labels[i];
    if (!spec.groups.empty()) s.group_tag = spec.groups[group_of[i]];
    s.seed = root.fork(1000 + i).next_u64();
    out.push_back(synthesize_record(s));
  }
  return out;
}

}  // namespace lsemvae

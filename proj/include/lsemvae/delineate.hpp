#pragma once

#include <span>
#include <vector>

#include "lsemvae/record.hpp"

namespace lsemvae {

/// R-peak candidates from a squared-derivative energy envelope with an
/// adaptive threshold of half the centered 2 s rolling maximum and a 200 ms
/// refractory period. Returns sample indices of the polarity-corrected R
/// extremum, ascending. `polarity` receives +1 or -1 when non-null.
std::vector<std::size_t> detect_r_peaks(std::span<const double> signal, double sample_rate_hz,
                                        int* polarity = nullptr);

/// Per-lead P/Q/R/S/T windows (+/-40 ms, clipped so neighbours never
/// overlap). Beats where any wave cannot be placed are dropped.
/// Throws DelineationFailure when a lead yields no complete beat.
WaveSegments delineate(const EcgRecord& record);

}  // namespace lsemvae

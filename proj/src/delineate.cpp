#include "lsemvae/delineate.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

namespace lsemvae {

namespace {

std::size_t samples_for(double seconds, double fs) {
  return static_cast<std::size_t>(std::max(1.0, std::round(seconds * fs)));
}

// Centered sliding maximum via a monotone deque.
std::vector<double> rolling_max(const std::vector<double>& x, std::size_t half) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  std::deque<std::size_t> q;
  std::size_t next = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t hi = std::min(n - 1, i + half);
    for (; next <= hi; ++next) {
      while (!q.empty() && x[q.back()] <= x[next]) q.pop_back();
      q.push_back(next);
    }
    const std::size_t lo = i >= half ? i - half : 0;
    while (q.front() < lo) q.pop_front();
    out[i] = x[q.front()];
  }
  return out;
}

std::vector<double> energy_envelope(std::span<const double> x, double fs) {
  const std::size_t n = x.size();
  std::vector<double> e(n, 0.0);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double d = 0.5 * (x[i + 1] - x[i - 1]);
    e[i] = d * d;
  }
  // Moving-window integration, centered so the envelope peak sits on the QRS.
  const std::size_t half = samples_for(0.040, fs);
  std::vector<double> prefix(n + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] + e[i];
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(n, i + half + 1);
    out[i] = (prefix[hi] - prefix[lo]) / static_cast<double>(2 * half + 1);
  }
  return out;
}

std::size_t argmax(const std::vector<double>& y, std::size_t lo, std::size_t hi) {
  std::size_t best = lo;
  for (std::size_t i = lo + 1; i <= hi; ++i) {
    if (y[i] > y[best]) best = i;
  }
  return best;
}

std::size_t argmin(const std::vector<double>& y, std::size_t lo, std::size_t hi) {
  std::size_t best = lo;
  for (std::size_t i = lo + 1; i <= hi; ++i) {
    if (y[i] < y[best]) best = i;
  }
  return best;
}

}  // namespace

std::vector<std::size_t> detect_r_peaks(std::span<const double> signal, double fs, int* polarity) {
  const std::size_t n = signal.size();
  if (n < 3 || !(fs > 0.0)) return {};
  const auto env = energy_envelope(signal, fs);
  const double global = *std::max_element(env.begin(), env.end());
  if (!(global > 0.0) || !std::isfinite(global)) return {};
  const auto local = rolling_max(env, samples_for(1.0, fs));

  std::vector<std::size_t> cand;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    if (env[i] >= env[i - 1] && env[i] > env[i + 1] && env[i] >= 0.5 * local[i] && env[i] >= 0.1 * global) {
      cand.push_back(i);
    }
  }
  // Strongest candidates claim their refractory neighbourhood first.
  const std::size_t refractory = samples_for(0.200, fs);
  std::vector<std::size_t> order(cand.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return env[cand[a]] > env[cand[b]]; });
  std::vector<std::size_t> kept;
  for (std::size_t k : order) {
    const std::size_t c = cand[k];
    bool clear = true;
    for (std::size_t q : kept) {
      if ((c > q ? c - q : q - c) < refractory) clear = false;
    }
    if (clear) kept.push_back(c);
  }
  std::sort(kept.begin(), kept.end());
  if (kept.empty()) return {};

  const std::size_t reach = samples_for(0.060, fs);
  int votes = 0;
  for (std::size_t c : kept) {
    const std::size_t lo = c >= reach ? c - reach : 0, hi = std::min(n - 1, c + reach);
    const auto [mn, mx] = std::minmax_element(signal.begin() + static_cast<std::ptrdiff_t>(lo),
                                              signal.begin() + static_cast<std::ptrdiff_t>(hi) + 1);
    votes += *mx >= -*mn ? 1 : -1;
  }
  const int sign = votes >= 0 ? 1 : -1;
  if (polarity) *polarity = sign;

  std::vector<double> y(signal.begin(), signal.end());
  if (sign < 0) {
    for (double& v : y) v = -v;
  }
  std::vector<std::size_t> peaks;
  for (std::size_t c : kept) {
    const std::size_t lo = c >= reach ? c - reach : 0, hi = std::min(n - 1, c + reach);
    const std::size_t r = argmax(y, lo, hi);
    if (peaks.empty() || r >= peaks.back() + refractory) peaks.push_back(r);
  }
  return peaks;
}

WaveSegments delineate(const EcgRecord& record) {
  record.validate();
  const double fs = record.sample_rate_hz;
  const std::size_t n = record.length;
  const std::size_t qs_reach = samples_for(0.060, fs);
  const std::size_t half = samples_for(0.040, fs);

  WaveSegments out;
  out.record_id = record.record_id;
  for (std::size_t m = 0; m < record.num_leads(); ++m) {
    const auto raw = record.lead(m);
    std::vector<double> x(raw.begin(), raw.end());
    int sign = 1;
    const auto peaks = detect_r_peaks(x, fs, &sign);
    if (peaks.empty()) {
      throw DelineationFailure("no R peaks in record '" + record.record_id + "' lead " + record.lead_names[m]);
    }
    if (sign < 0) {
      for (double& v : x) v = -v;
    }

    std::vector<std::array<std::size_t, 5>> centers;
    for (std::size_t b = 0; b < peaks.size(); ++b) {
      const std::size_t r = peaks[b];
      if (r == 0 || r + 1 >= n) continue;
      // Q and S: nearest local minimum walking away from R, else the window minimum.
      std::size_t q = r;
      while (q > 0 && r - q < qs_reach && x[q - 1] < x[q]) --q;
      if (q == r || (q > 0 && x[q - 1] < x[q])) q = argmin(x, r >= qs_reach ? r - qs_reach : 0, r - 1);
      std::size_t s = r;
      while (s + 1 < n && s - r < qs_reach && x[s + 1] < x[s]) ++s;
      if (s == r || (s + 1 < n && x[s + 1] < x[s])) s = argmin(x, r + 1, std::min(n - 1, r + qs_reach));

      const double p_from = static_cast<double>(q) - 0.200 * fs;
      double p_lo = std::max(0.0, std::ceil(p_from));
      if (b > 0) p_lo = std::max(p_lo, std::ceil(static_cast<double>(peaks[b - 1]) + 0.6 * static_cast<double>(r - peaks[b - 1])));
      const double p_hi = std::floor(static_cast<double>(q) - 0.060 * fs);
      if (p_hi < p_lo) continue;

      const double t_lo = std::ceil(static_cast<double>(s) + 0.080 * fs);
      const double t_to = static_cast<double>(s) + 0.400 * fs;
      double t_hi = std::min(static_cast<double>(n) - 1.0, std::floor(t_to));
      if (b + 1 < peaks.size()) {
        const double gap = static_cast<double>(peaks[b + 1] - r);
        t_hi = std::min(t_hi, std::ceil(static_cast<double>(peaks[b + 1]) - 0.4 * gap) - 1.0);
      }
      if (t_hi < t_lo) continue;

      const std::size_t p = argmax(x, static_cast<std::size_t>(p_lo), static_cast<std::size_t>(p_hi));
      const std::size_t t = argmax(x, static_cast<std::size_t>(t_lo), static_cast<std::size_t>(t_hi));
      const std::array<std::size_t, 5> c = {p, q, r, s, t};
      if (!(p < q && q < r && r < s && s < t)) continue;
      if (!centers.empty() && centers.back()[4] >= p) continue;
      centers.push_back(c);
    }
    if (centers.empty()) {
      throw DelineationFailure("no complete beat in record '" + record.record_id + "' lead " + record.lead_names[m]);
    }
    out.leads.push_back({record.lead_names[m], windows_from_centers(centers, half, n)});
  }
  return out;
}

}  // namespace lsemvae

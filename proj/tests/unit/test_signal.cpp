#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <algorithm>
#include <limits>
#include <numbers>

#include "doctest.h"
#include "lsemvae/delineate.hpp"
#include "lsemvae/preprocess.hpp"
#include "lsemvae/rng.hpp"
#include "lsemvae/synth.hpp"

using namespace lsemvae;

namespace {

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "lsemvae_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Magnitude of the projection onto a complex exponential at `hz`.
double tone_amplitude(const std::vector<double>& x, double hz, double fs, std::size_t from, std::size_t to) {
  double re = 0.0, im = 0.0;
  for (std::size_t i = from; i < to; ++i) {
    const double ph = 2.0 * std::numbers::pi * hz * static_cast<double>(i) / fs;
    re += x[i] * std::cos(ph);
    im += x[i] * std::sin(ph);
  }
  return 2.0 * std::hypot(re, im) / static_cast<double>(to - from);
}

EcgRecord random_record(CounterRng& rng, std::size_t leads, std::size_t length) {
  EcgRecord r;
  r.record_id = "rec" + std::to_string(rng.below(1000));
  r.sample_rate_hz = 100.0 + 400.0 * rng.uniform();
  for (std::size_t m = 0; m < leads; ++m) r.lead_names.push_back("L" + std::to_string(m));
  r.length = length;
  for (std::size_t i = 0; i < leads * length; ++i) r.samples.push_back(static_cast<float>(rng.normal()));
  if (rng.uniform() < 0.5) r.label = static_cast<int>(rng.below(2));
  if (rng.uniform() < 0.5) r.group_tag = rng.uniform() < 0.5 ? "F" : "M";
  return r;
}

bool bit_equal(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

SynthSpec spec_128(double bpm = 60.0, double seconds = 10.0) {
  SynthSpec s;
  s.duration_s = seconds;
  s.sample_rate_hz = 128.0;
  s.heart_rate_bpm = bpm;
  return s;
}

}  // namespace

TEST_CASE("codec round trip is bit exact") {
  SynthSpec s;
  s.duration_s = 10.0;
  s.sample_rate_hz = 500.0;
  s.noise_std = 0.05;
  s.label = 1;
  s.group_tag = "F";
  const auto rec = synthesize_record(s).record;
  REQUIRE(rec.length == 5000);
  const auto back = codec_roundtrip(rec, temp_file("twelve.ecgr"));
  CHECK(bit_equal(back.samples, rec.samples));
  CHECK(back.lead_names == rec.lead_names);
  CHECK(back.label == rec.label);
  CHECK(back.group_tag == rec.group_tag);
  CHECK(back.sample_rate_hz == rec.sample_rate_hz);

  EcgRecord zeros;
  zeros.record_id = "z";
  zeros.lead_names = {"I"};
  zeros.length = 8;
  zeros.samples.assign(8, 0.0f);
  CHECK(bit_equal(codec_roundtrip(zeros, temp_file("z.ecgr")).samples, zeros.samples));
}

TEST_CASE("codec preserves NaN payloads") {
  EcgRecord r;
  r.record_id = "nan";
  r.lead_names = {"I", "II"};
  r.length = 8;
  r.samples.assign(16, 1.5f);
  r.samples[3] = std::numeric_limits<float>::quiet_NaN();
  r.samples[9] = std::bit_cast<float>(std::uint32_t{0x7fc01234});
  const auto bytes = encode_record(r);
  const auto back = decode_record(bytes);
  CHECK(std::bit_cast<std::uint32_t>(back.samples[9]) == 0x7fc01234u);
  CHECK(encode_record(back) == bytes);
}

TEST_CASE("codec property: encode(decode(bytes)) == bytes over random records") {
  CounterRng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const auto rec = random_record(rng, 1 + rng.below(4), 8 * (1 + rng.below(20)));
    const auto bytes = encode_record(rec);
    CHECK(encode_record(decode_record(bytes)) == bytes);
  }
}

TEST_CASE("codec rejects corrupt files") {
  EcgRecord r;
  r.record_id = "c";
  r.lead_names = {"I"};
  r.length = 8;
  r.samples.assign(8, 0.25f);
  auto bytes = encode_record(r);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_record(bad_magic), CorruptFile);
  auto bad_version = bytes;
  bad_version[4] = 9;
  CHECK_THROWS_AS(decode_record(bad_version), CorruptFile);
  auto truncated = bytes;
  truncated.resize(truncated.size() - 4);
  CHECK_THROWS_AS(decode_record(truncated), CorruptFile);
  auto extended = bytes;
  extended.push_back(0);
  CHECK_THROWS_AS(decode_record(extended), CorruptFile);
}

TEST_CASE("CSV import reads header and NaN cells") {
  const auto path = temp_file("rec.csv");
  {
    std::ofstream f(path);
    f << "I,II\n";
    for (int i = 0; i < 8; ++i) f << i << "," << (i == 3 ? "" : std::to_string(2 * i)) << "\n";
  }
  const auto rec = read_csv_record(path, 250.0);
  CHECK(rec.record_id == "rec");
  CHECK(rec.lead_names == std::vector<std::string>{"I", "II"});
  CHECK(rec.length == 8);
  CHECK(rec.lead(0)[7] == 7.0f);
  CHECK(std::isnan(rec.lead(1)[3]));
}

TEST_CASE("interpolate_missing") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK(interpolate_missing(std::vector<double>{1, nan, 3}) == std::vector<double>{1, 2, 3});
  CHECK(interpolate_missing(std::vector<double>{nan, 5, nan, 7}) == std::vector<double>{5, 5, 6, 7});
  const auto four = interpolate_missing(std::vector<double>{0, nan, nan, 3});
  // Two-point line through (0, 0) and (3, 3).
  for (int i = 0; i < 4; ++i) CHECK(four[i] == doctest::Approx(i).epsilon(1e-15));
  CHECK_THROWS_AS(interpolate_missing(std::vector<double>{nan, 5, nan}), NotInterpolatable);
  CHECK_THROWS_AS(interpolate_missing(std::vector<double>{nan, nan}), NotInterpolatable);
}

TEST_CASE("interpolate_missing with one valid value on each side holds edges") {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  CHECK(interpolate_missing(std::vector<double>{nan, 5, 5, nan}) == std::vector<double>{5, 5, 5, 5});
}

TEST_CASE("bandpass passes 10 Hz and suppresses drift") {
  const double fs = 500.0;
  const std::size_t n = 5000;
  std::vector<double> tone(n), drift(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / fs;
    tone[i] = std::sin(2.0 * std::numbers::pi * 10.0 * t);
    drift[i] = std::sin(2.0 * std::numbers::pi * 0.05 * t);
  }
  const auto yt = bandpass_filter(tone, fs);
  REQUIRE(yt.size() == n);
  const double gain_db = 20.0 * std::log10(tone_amplitude(yt, 10.0, fs, 500, 4500) / tone_amplitude(tone, 10.0, fs, 500, 4500));
  CHECK(std::abs(gain_db) < 1.0);

  const auto yd = bandpass_filter(drift, fs);
  double in_rms = 0.0, out_rms = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    in_rms += drift[i] * drift[i];
    out_rms += yd[i] * yd[i];
  }
  CHECK(10.0 * std::log10(out_rms / in_rms) <= -20.0);

  const auto yz = bandpass_filter(std::vector<double>(64, 0.0), fs);
  for (double v : yz) CHECK(v == 0.0);
}

TEST_CASE("bandpass is zero phase") {
  const double fs = 250.0;
  std::vector<double> x(1000);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::sin(2.0 * std::numbers::pi * 5.0 * static_cast<double>(i) / fs);
  const auto y = bandpass_filter(x, fs);
  // Peaks stay in place: cross-correlation is maximal at lag 0.
  auto corr = [&](int lag) {
    double s = 0.0;
    for (std::size_t i = 100; i < 900; ++i) s += x[i] * y[static_cast<std::size_t>(static_cast<int>(i) + lag)];
    return s;
  };
  CHECK(corr(0) > corr(1));
  CHECK(corr(0) > corr(-1));
}

TEST_CASE("bandpass rejects low rates and short inputs") {
  CHECK_THROWS_AS(bandpass_filter(std::vector<double>(100, 0.0), 80.0), FilterConfigError);
  CHECK_THROWS_AS(bandpass_filter(std::vector<double>(31, 0.0), 500.0), FilterConfigError);
  CHECK_NOTHROW(bandpass_filter(std::vector<double>(32, 0.0), 81.0));
}

TEST_CASE("zscore") {
  const auto two = zscore(std::vector<double>{1, 3});
  CHECK(two[0] == doctest::Approx(-1.0));
  CHECK(two[1] == doctest::Approx(1.0));

  bool flat = false;
  const auto zeros = zscore(std::vector<double>{0, 0, 0}, &flat);
  CHECK(flat);
  CHECK(zeros == std::vector<double>{0, 0, 0});

  CounterRng rng(3);
  std::vector<double> x(257), ax(257);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = rng.normal() * 3.0 + 1.0;
    ax[i] = 2.5 * x[i] - 7.0;
  }
  const auto zx = zscore(x, &flat);
  CHECK_FALSE(flat);
  const auto zax = zscore(ax);
  double mean = 0.0, var = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    CHECK(zx[i] == doctest::Approx(zax[i]).epsilon(1e-12));
    mean += zx[i];
  }
  mean /= static_cast<double>(x.size());
  for (double v : zx) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  CHECK(std::abs(mean) < 1e-9);
  CHECK(std::abs(std::sqrt(var) - 1.0) < 1e-9);

  // Idempotence of the standardization step.
  const auto again = zscore(zx);
  for (std::size_t i = 0; i < zx.size(); ++i) CHECK(std::abs(again[i] - zx[i]) < 1e-9);
}

TEST_CASE("preprocess_record flags constant leads") {
  auto rec = synthesize_record(spec_128()).record;
  auto flat = rec.lead(3);
  std::fill(flat.begin(), flat.end(), 2.0f);
  std::vector<std::string> constant;
  const auto out = preprocess_record(rec, &constant);
  CHECK(constant == std::vector<std::string>{rec.lead_names[3]});
  for (float v : out.lead(3)) CHECK(v == 0.0f);
}

TEST_CASE("synthesize_record is deterministic and validated") {
  auto s = spec_128();
  s.noise_std = 0.0;
  const auto a = synthesize_record(s).record;
  const auto b = synthesize_record(s).record;
  CHECK(bit_equal(a.samples, b.samples));
  s.noise_std = 0.1;
  s.seed = 4;
  CHECK(bit_equal(synthesize_record(s).record.samples, synthesize_record(s).record.samples));

  auto bad = spec_128();
  bad.duration_s = 10.0 + 1.0 / 128.0;
  CHECK_THROWS_AS(synthesize_record(bad), SpecError);
  bad = spec_128(29.0);
  CHECK_THROWS_AS(synthesize_record(bad), SpecError);
  bad = spec_128(201.0);
  CHECK_THROWS_AS(synthesize_record(bad), SpecError);
}

TEST_CASE("null class effect gives identical classes") {
  auto s = spec_128();
  s.noise_std = 0.05;
  s.amplitude_jitter = 0.1;
  s.seed = 9;
  s.label = 0;
  const auto c0 = synthesize_record(s).record;
  s.label = 1;
  const auto c1 = synthesize_record(s).record;
  CHECK(bit_equal(c0.samples, c1.samples));
  s.class_effect.magnitude = 0.5;
  CHECK_FALSE(bit_equal(synthesize_record(s).record.samples, c0.samples));
}

TEST_CASE("class effect deepens the lead II S wave only") {
  auto s = spec_128();
  s.label = 0;
  s.class_effect.magnitude = 0.6;
  const auto c0 = synthesize_record(s);
  s.label = 1;
  const auto c1 = synthesize_record(s);
  const auto ii = *c0.record.lead_index("II");
  const std::size_t s_center = c0.truth.leads[ii].beats[2][Wave::S].center;
  CHECK(c1.record.lead(ii)[s_center] < c0.record.lead(ii)[s_center] - 0.5f);
  const auto i = *c0.record.lead_index("I");
  CHECK(bit_equal(std::vector<float>(c0.record.lead(i).begin(), c0.record.lead(i).end()),
                  std::vector<float>(c1.record.lead(i).begin(), c1.record.lead(i).end())));
}

TEST_CASE("delineate finds every beat of a noiseless record") {
  for (double bpm : {45.0, 60.0, 72.0, 100.0, 150.0}) {
    auto s = spec_128(bpm);
    const auto syn = synthesize_record(s);
    const auto pre = preprocess_record(syn.record);
    const auto seg = delineate(pre);
    const double tol = 0.020 * s.sample_rate_hz;
    const auto expected = static_cast<std::size_t>(std::llround(bpm * s.duration_s / 60.0));
    for (std::size_t m = 0; m < pre.num_leads(); ++m) {
      CAPTURE(bpm);
      CAPTURE(pre.lead_names[m]);
      std::vector<double> x(pre.lead(m).begin(), pre.lead(m).end());
      CHECK(detect_r_peaks(x, s.sample_rate_hz).size() == expected);
      const auto& truth = syn.truth.leads[m].beats;
      const auto& found = seg.leads[m].beats;
      CHECK(found.size() == truth.size());
      for (const auto& beat : found) {
        // Match to the nearest ground-truth beat by R center.
        const Beat* best = &truth.front();
        for (const auto& t : truth) {
          const auto d = [&](const Beat& b) { return std::abs(static_cast<double>(b[Wave::R].center) - static_cast<double>(beat[Wave::R].center)); };
          if (d(t) < d(*best)) best = &t;
        }
        for (Wave w : kWaves) {
          CAPTURE(std::string(wave_name(w)));
          CHECK(std::abs(static_cast<double>(beat[w].center) - static_cast<double>((*best)[w].center)) <= tol);
        }
      }
    }
  }
}

TEST_CASE("delineate at 500 Hz, 10 s, 60 bpm") {
  SynthSpec s;
  const auto syn = synthesize_record(s);
  const auto seg = delineate(preprocess_record(syn.record));
  for (std::size_t m = 0; m < seg.leads.size(); ++m) {
    REQUIRE(seg.leads[m].beats.size() == 10);
    for (std::size_t b = 0; b < 10; ++b) {
      const double d = std::abs(static_cast<double>(seg.leads[m].beats[b][Wave::R].center) -
                                static_cast<double>(syn.truth.leads[m].beats[b][Wave::R].center));
      CHECK(d <= 0.020 * 500.0);
    }
  }
}

TEST_CASE("delineate windows are ordered and disjoint") {
  CounterRng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = spec_128(40.0 + 140.0 * rng.uniform());
    s.noise_std = 0.03;
    s.amplitude_jitter = 0.1;
    s.baseline_wander = 0.2;
    s.seed = trial;
    WaveSegments seg;
    try {
      seg = delineate(preprocess_record(synthesize_record(s).record));
    } catch (const DelineationFailure&) {
      continue;
    }
    for (const auto& lead : seg.leads) {
      std::size_t prev_end = 0;
      bool first = true;
      for (const auto& beat : lead.beats) {
        for (Wave w : kWaves) {
          const auto& win = beat[w];
          CHECK(win.start <= win.center);
          CHECK(win.center <= win.end);
          CHECK(win.end < s.length());
          if (!first) CHECK(win.start > prev_end);
          prev_end = win.end;
          first = false;
        }
      }
    }
  }
}

TEST_CASE("delineate recovers most R peaks under noise") {
  auto s = spec_128();
  s.noise_std = 0.05;
  std::size_t matched = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    s.seed = seed;
    const auto syn = synthesize_record(s);
    const auto pre = preprocess_record(syn.record);
    for (std::size_t m = 0; m < pre.num_leads(); ++m) {
      std::vector<double> x(pre.lead(m).begin(), pre.lead(m).end());
      const auto peaks = detect_r_peaks(x, s.sample_rate_hz);
      for (const auto& beat : syn.truth.leads[m].beats) {
        ++total;
        for (std::size_t p : peaks) {
          if (std::abs(static_cast<double>(p) - static_cast<double>(beat[Wave::R].center)) <= 0.040 * s.sample_rate_hz) {
            ++matched;
            break;
          }
        }
      }
    }
  }
  CHECK(static_cast<double>(matched) >= 0.9 * static_cast<double>(total));
}

TEST_CASE("delineate fails on a flat signal") {
  EcgRecord r;
  r.record_id = "flat";
  r.sample_rate_hz = 128.0;
  r.lead_names = {"I"};
  r.length = 512;
  r.samples.assign(512, 0.0f);
  CHECK_THROWS_AS(delineate(r), DelineationFailure);
}

TEST_CASE("format_segments emits one row per wave") {
  const auto syn = synthesize_record(spec_128());
  const auto text = format_segments(std::span<const WaveSegments>(&syn.truth, 1));
  const auto rows = std::count(text.begin(), text.end(), '\n');
  CHECK(rows == 1 + 12 * 10 * 5);
  CHECK(text.rfind("record_id\tlead\tbeat\twave\tstart\tend\n", 0) == 0);
}

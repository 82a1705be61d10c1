#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lsemvae/errors.hpp"

namespace lsemvae {

/// Standard 12-lead order.
inline const std::vector<std::string> kTwelveLeads = {"I",  "II", "III", "aVR", "aVL", "aVF",
                                                      "V1", "V2", "V3",  "V4",  "V5",  "V6"};

/// Multi-lead ECG. Samples are float32, lead-major: lead m occupies
/// samples[m * length, (m + 1) * length).
struct EcgRecord {
  std::string record_id;
  double sample_rate_hz = 500.0;
  std::vector<std::string> lead_names;
  std::size_t length = 0;
  std::vector<float> samples;
  std::optional<int> label;
  std::optional<std::string> group_tag;

  std::size_t num_leads() const { return lead_names.size(); }
  std::span<const float> lead(std::size_t m) const { return {samples.data() + m * length, length}; }
  std::span<float> lead(std::size_t m) { return {samples.data() + m * length, length}; }
  std::optional<std::size_t> lead_index(const std::string& name) const;

  /// Throws SpecError on any broken invariant (L >= 8, rate > 0, unique
  /// lead names, sample count = leads * L).
  void validate() const;
};

enum class Wave : int { P = 0, Q = 1, R = 2, S = 3, T = 4 };
inline constexpr std::array<Wave, 5> kWaves = {Wave::P, Wave::Q, Wave::R, Wave::S, Wave::T};
const char* wave_name(Wave w);

/// Inclusive sample window around a wave center.
struct WaveWindow {
  std::size_t center = 0;
  std::size_t start = 0;
  std::size_t end = 0;

  bool contains(std::size_t i) const { return i >= start && i <= end; }
};

struct Beat {
  std::array<WaveWindow, 5> waves;
  const WaveWindow& operator[](Wave w) const { return waves[static_cast<int>(w)]; }
  WaveWindow& operator[](Wave w) { return waves[static_cast<int>(w)]; }
};

struct LeadSegments {
  std::string lead;
  std::vector<Beat> beats;
};

struct WaveSegments {
  std::string record_id;
  std::vector<LeadSegments> leads;

  const LeadSegments* find(const std::string& lead) const;
};

/// Builds per-beat windows from per-beat wave centers (each ordered P..T).
/// Each window is center +/- half_width, clipped to [0, length) and to the
/// midpoints between neighbouring centers so windows never overlap.
std::vector<Beat> windows_from_centers(const std::vector<std::array<std::size_t, 5>>& centers,
                                       std::size_t half_width, std::size_t length);

/// Tab-separated rows: record_id, lead, beat, wave, start, end.
std::string format_segments(std::span<const WaveSegments> segments);

// ------------------------------------------------------------------- codec

/// ECGR binary layout (all little-endian):
///   "ECGR" | u32 version | f64 sample rate | u32 lead count | u64 length |
///   str record id | lead count x str name | u32 flags (1 label, 2 group) |
///   i32 label | str group | float32 samples, lead-major
/// where str is a u32 byte count followed by UTF-8 bytes.
inline constexpr std::uint32_t kEcgrVersion = 1;

std::vector<unsigned char> encode_record(const EcgRecord& record);
EcgRecord decode_record(const std::vector<unsigned char>& bytes);
void write_record(const EcgRecord& record, const std::filesystem::path& path);
EcgRecord read_record(const std::filesystem::path& path);
/// Writes then reads back.
EcgRecord codec_roundtrip(const EcgRecord& record, const std::filesystem::path& path);

/// CSV with a header row of lead names and one column per lead. Empty cells
/// and "nan" read as NaN. The record id defaults to the file stem.
EcgRecord read_csv_record(const std::filesystem::path& path, double sample_rate_hz,
                          std::optional<std::string> record_id = std::nullopt);

/// All *.ecgr files in a directory, sorted by file name.
std::vector<EcgRecord> read_corpus(const std::filesystem::path& dir);

}  // namespace lsemvae

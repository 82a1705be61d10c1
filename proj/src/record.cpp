#include "lsemvae/record.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "binary_io.hpp"

namespace lsemvae {

std::optional<std::size_t> EcgRecord::lead_index(const std::string& name) const {
  for (std::size_t m = 0; m < lead_names.size(); ++m) {
    if (lead_names[m] == name) return m;
  }
  return std::nullopt;
}

void EcgRecord::validate() const {
  if (!(sample_rate_hz > 0.0) || !std::isfinite(sample_rate_hz)) throw SpecError("sample rate must be positive");
  if (lead_names.empty()) throw SpecError("record '" + record_id + "' has no leads");
  if (length < 8) throw SpecError("record '" + record_id + "' is shorter than 8 samples");
  std::set<std::string> unique(lead_names.begin(), lead_names.end());
  if (unique.size() != lead_names.size()) throw SpecError("record '" + record_id + "' repeats a lead name");
  if (samples.size() != lead_names.size() * length) throw SpecError("sample count does not match leads x length");
}

const char* wave_name(Wave w) {
  static constexpr const char* kNames[] = {"P", "Q", "R", "S", "T"};
  return kNames[static_cast<int>(w)];
}

const LeadSegments* WaveSegments::find(const std::string& lead) const {
  for (const auto& l : leads) {
    if (l.lead == lead) return &l;
  }
  return nullptr;
}

std::vector<Beat> windows_from_centers(const std::vector<std::array<std::size_t, 5>>& centers,
                                       std::size_t half_width, std::size_t length) {
  std::vector<std::size_t> flat;
  for (const auto& b : centers) flat.insert(flat.end(), b.begin(), b.end());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (flat[i] >= length) throw ContractError("wave center outside the signal");
    if (i > 0 && flat[i] <= flat[i - 1]) throw ContractError("wave centers must be strictly increasing");
  }
  std::vector<Beat> beats(centers.size());
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const std::size_t c = flat[i];
    std::size_t lo = c >= half_width ? c - half_width : 0;
    std::size_t hi = std::min(c + half_width, length - 1);
    if (i > 0) lo = std::max(lo, (flat[i - 1] + c) / 2 + 1);
    if (i + 1 < flat.size()) hi = std::min(hi, (c + flat[i + 1]) / 2);
    beats[i / 5].waves[i % 5] = WaveWindow{c, lo, hi};
  }
  return beats;
}

std::string format_segments(std::span<const WaveSegments> segments) {
  std::ostringstream out;
  out << "record_id\tlead\tbeat\twave\tstart\tend\n";
  for (const auto& seg : segments) {
    for (const auto& lead : seg.leads) {
      for (std::size_t b = 0; b < lead.beats.size(); ++b) {
        for (Wave w : kWaves) {
          const auto& win = lead.beats[b][w];
          out << seg.record_id << '\t' << lead.lead << '\t' << b << '\t' << wave_name(w) << '\t' << win.start
              << '\t' << win.end << '\n';
        }
      }
    }
  }
  return out.str();
}

// ---------------------------------------------------------------------- codec

namespace {
constexpr char kMagic[4] = {'E', 'C', 'G', 'R'};
constexpr std::uint32_t kHasLabel = 1;
constexpr std::uint32_t kHasGroup = 2;
}  // namespace

std::vector<unsigned char> encode_record(const EcgRecord& record) {
  record.validate();
  detail::ByteWriter w;
  w.raw(kMagic, 4);
  w.u32(kEcgrVersion);
  w.f64(record.sample_rate_hz);
  w.u32(static_cast<std::uint32_t>(record.num_leads()));
  w.u64(record.length);
  w.str(record.record_id);
  for (const auto& name : record.lead_names) w.str(name);
  std::uint32_t flags = 0;
  if (record.label) flags |= kHasLabel;
  if (record.group_tag) flags |= kHasGroup;
  w.u32(flags);
  w.i32(record.label.value_or(0));
  w.str(record.group_tag.value_or(""));
  for (float v : record.samples) w.f32(v);
  return std::move(w.bytes());
}

EcgRecord decode_record(const std::vector<unsigned char>& bytes) {
  detail::ByteReader r(bytes);
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CorruptFile("bad ECGR magic");
  const auto version = r.u32();
  if (version != kEcgrVersion) throw CorruptFile("unsupported ECGR version " + std::to_string(version));
  EcgRecord rec;
  rec.sample_rate_hz = r.f64();
  const auto leads = r.u32();
  const auto length = r.u64();
  if (leads == 0 || leads > 4096) throw CorruptFile("implausible lead count " + std::to_string(leads));
  rec.length = static_cast<std::size_t>(length);
  rec.record_id = r.str();
  for (std::uint32_t m = 0; m < leads; ++m) rec.lead_names.push_back(r.str());
  const auto flags = r.u32();
  const auto label = r.i32();
  std::string group = r.str();
  if (flags & kHasLabel) rec.label = label;
  if (flags & kHasGroup) rec.group_tag = std::move(group);
  if (length > std::numeric_limits<std::size_t>::max() / 4 / leads ||
      r.remaining() != static_cast<std::size_t>(length) * leads * 4) {
    throw CorruptFile("sample payload does not match header (" + std::to_string(leads) + " leads x " +
                      std::to_string(length) + ")");
  }
  rec.samples.resize(rec.length * leads);
  for (auto& v : rec.samples) v = r.f32();
  try {
    rec.validate();
  } catch (const SpecError& e) {
    throw CorruptFile(e.what());
  }
  return rec;
}

void write_record(const EcgRecord& record, const std::filesystem::path& path) {
  detail::write_file_bytes(path, encode_record(record));
}

EcgRecord read_record(const std::filesystem::path& path) { return decode_record(detail::read_file_bytes(path)); }

EcgRecord codec_roundtrip(const EcgRecord& record, const std::filesystem::path& path) {
  write_record(record, path);
  return read_record(path);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    std::size_t first = cell.find_first_not_of(' ');
    out.push_back(first == std::string::npos ? std::string() : cell.substr(first));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

EcgRecord read_csv_record(const std::filesystem::path& path, double sample_rate_hz,
                          std::optional<std::string> record_id) {
  std::ifstream in(path);
  if (!in) {
    throw std::filesystem::filesystem_error("cannot open CSV", path,
                                            std::make_error_code(std::errc::no_such_file_or_directory));
  }
  std::string line;
  if (!std::getline(in, line)) throw CorruptFile("empty CSV " + path.string());
  EcgRecord rec;
  rec.record_id = record_id.value_or(path.stem().string());
  rec.sample_rate_hz = sample_rate_hz;
  rec.lead_names = split_csv_line(line);
  const std::size_t leads = rec.lead_names.size();
  std::vector<std::vector<float>> columns(leads);
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != leads) {
      throw CorruptFile("CSV row " + std::to_string(row) + " has " + std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(leads));
    }
    for (std::size_t m = 0; m < leads; ++m) {
      const std::string& c = cells[m];
      float v = std::numeric_limits<float>::quiet_NaN();
      if (!c.empty() && c != "nan" && c != "NaN" && c != "NA") {
        char* end = nullptr;
        v = std::strtof(c.c_str(), &end);
        if (end == c.c_str() || *end != '\0') throw CorruptFile("CSV row " + std::to_string(row) + ": bad number '" + c + "'");
      }
      columns[m].push_back(v);
    }
  }
  rec.length = columns.empty() ? 0 : columns[0].size();
  for (const auto& col : columns) rec.samples.insert(rec.samples.end(), col.begin(), col.end());
  rec.validate();
  return rec;
}

std::vector<EcgRecord> read_corpus(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ecgr") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<EcgRecord> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(read_record(f));
  return out;
}

}  // namespace lsemvae

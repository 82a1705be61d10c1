#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace lsemvae::cli {

/// Exit codes of run().
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitBadConfig = 2;
inline constexpr int kExitMissingFile = 3;

/// Environment variable naming the directory under which run directories are created.
inline constexpr const char* kRunRootEnv = "LSEMVAE_RUN_ROOT";

/// Parsed config file: section -> key -> raw value, plus the line each key came from.
struct ConfigFile {
  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, std::size_t> lines;  // "section.key" -> 1-based line
};

/// Line-oriented `key = value` pairs under `[section]` headers. Blank lines
/// and lines starting with '#' or ';' are ignored. Throws ConfigError with the
/// line number on malformed lines and duplicate keys.
ConfigFile parse_config(const std::string& text, const std::string& origin = "config");

/// One configurable setting and its default.
struct KeySpec {
  std::string key;
  std::string default_value;
  std::string help;
};

/// Settings accepted in each section, in echo order. Section names match the
/// subcommands, plus "run" for the run directory.
const std::map<std::string, std::vector<KeySpec>>& config_schema();

/// Runs one subcommand; see `--help` for the list. Diagnostics go to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace lsemvae::cli

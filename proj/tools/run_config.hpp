#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <CLI11.hpp>

namespace edm::cli {

/// Bad input from the user: exit code 1.
class UserError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flat `key = value` file. Keys before the first [section] header are global.
struct ConfigFile {
  std::map<std::string, std::map<std::string, std::string>> sections;

  std::optional<std::string> lookup(const std::string& section, const std::string& key) const;
};

ConfigFile parse_config(std::istream& in, std::string_view source);
ConfigFile read_config(const std::filesystem::path& path);

/// EDM_ prefix, upper case, '-' replaced by '_'.
std::string env_name(std::string_view option);

using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
EnvLookup process_env();

/// Fills every option of `sub` that was not given on the command line, first from the
/// environment, then from the config file ([sub] section, then global keys).
void apply_overlays(CLI::App& sub, const ConfigFile* file, const EnvLookup& env);

/// Long option name -> effective value, for every option of `sub` except help/config.
std::map<std::string, std::string> resolved_options(const CLI::App& sub);

/// Writes the resolved options back in config-file form.
void write_resolved_config(const std::filesystem::path& path, const std::string& section,
                           const std::map<std::string, std::string>& opts);

struct OutputRecord {
  std::string path;  // relative to the output directory
  std::uintmax_t size = 0;
  std::string fnv1a64;
};

OutputRecord record_output(const std::filesystem::path& out_dir, const std::filesystem::path& file);

}  // namespace edm::cli

#pragma once

// Command-line surface: typed configs, run manifests, report emission and
// the subcommand dispatcher behind the `dynident` executable.

#include "dynident/estim_known.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace dynident {

enum class ValueType { integer, number, string, boolean, int_list, string_list, number_list };

struct ConfigKey {
  std::string name;
  ValueType type = ValueType::string;
  nlohmann::json default_value;  // null means required
  std::string help;
  std::optional<double> min;  // numeric keys and list elements
  std::vector<std::string> choices;
  bool is_path = false;
};

struct CommandSchema {
  std::string name;
  std::string help;
  std::vector<ConfigKey> keys;
  const ConfigKey* find(const std::string& key) const;
};

const std::vector<CommandSchema>& command_schemas();
const CommandSchema& command_schema(const std::string& command);  // throws ConfigError

inline constexpr int kConfigSchemaVersion = 1;

struct RunConfig {
  std::string command;
  int schema_version = kConfigSchemaVersion;
  nlohmann::json values;  // object keyed by ConfigKey::name, fully populated

  std::int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::string get_string(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;
  std::vector<double> get_number_list(const std::string& key) const;
  std::vector<std::string> get_string_list(const std::string& key) const;
};

// Defaults, then `file` (a config object or a run manifest), then flags (raw
// strings keyed by config name). Throws ConfigError naming the offending key.
RunConfig parse_config(const std::string& command, const std::optional<nlohmann::json>& file,
                       const std::map<std::string, std::string>& flags);
nlohmann::json load_json_file(const std::filesystem::path& path);

std::string sha256_file(const std::filesystem::path& path);

struct RunManifest {
  RunConfig config;
  std::string catalog_version = kCatalogVersion;
  double wall_time_s = 0.0;
  std::map<std::string, std::uint64_t> seeds;
  std::map<std::string, std::string> digests;  // output path -> sha256
};

inline constexpr const char* kManifestFormat = "dynident-manifest/1";
nlohmann::json manifest_to_json(const RunManifest& manifest);
std::filesystem::path manifest_path(const std::filesystem::path& primary_output);

// Report emission. Markdown uses 1-significant-digit "m ± s".
std::string format_sig1(double x);
std::string format_mean_std(double mean, double std);
std::string format_double(double x);  // 17 significant digits
void write_bench_csv(const std::filesystem::path& path, const std::vector<EstimateReport>& reports);
std::string bench_markdown(const std::vector<EstimateReport>& reports);
std::vector<EstimateReport> read_bench_csv(const std::filesystem::path& path);

// Full CLI: returns 0 on success, 1 on validation errors, 2 on runtime failures.
int run_command(const std::vector<std::string>& argv);
int run_command(int argc, char** argv);

}  // namespace dynident

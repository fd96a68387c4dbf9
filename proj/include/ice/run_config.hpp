#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "ice/fusion.hpp"

namespace ice {

/// Everything a run needs. Built from a flat `key = value` file, then flag
/// overrides; the resolved result is echoed into every report.
///
/// Keys: bundle, K, xi, epsilon, lambda_mode, lambda, tau, upsilon, methods,
/// report_ks, report_json, report_csv, seed, workers, exemplars. List values
/// are comma separated. `#` starts a comment.
struct RunConfig {
  std::vector<std::string> bundles;
  IceConfig ice;
  bool tau_set = false;  // when unset, each bundle's temperature hint is used
  std::vector<std::string> methods = {"image_only", "caption_only", "ice"};
  std::vector<int> report_ks = {1, 5};
  std::string report_json = "ice_report.json";
  std::string report_csv = "ice_report.csv";
  std::uint64_t seed = 0;
  unsigned workers = 0;
  std::size_t exemplars = 5;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Parses `key = value` lines; throws InvalidConfig with the line number.
KeyValues parse_key_values(std::string_view text);
KeyValues read_key_values(const std::filesystem::path& path);

/// Applies one setting; throws InvalidConfig naming the key on a bad value
/// or an unknown key.
void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value);

void apply_settings(RunConfig& cfg, const KeyValues& kvs);

/// The IceConfig for one bundle: the bundle's temperature hint fills tau
/// when the run did not set it.
IceConfig resolve_ice_config(const RunConfig& cfg, double bundle_temperature_hint);

nlohmann::json run_config_to_json(const RunConfig& cfg);

std::vector<std::string> split_list(std::string_view s);

}  // namespace ice

#include "ice/run_config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ice/eval.hpp"

namespace ice {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

[[noreturn]] void bad(std::string_view key, std::string_view value, std::string_view why) {
  throw Error(ErrorCode::InvalidConfig,
              std::string(key) + ": " + std::string(why) + " (got '" + std::string(value) + "')");
}

template <typename T>
T parse_number(std::string_view key, std::string_view value) {
  T out{};
  const auto res = std::from_chars(value.data(), value.data() + value.size(), out);
  if (res.ec != std::errc{} || res.ptr != value.data() + value.size()) bad(key, value, "not a valid number");
  return out;
}

}  // namespace

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  while (!s.empty()) {
    const auto comma = s.find(',');
    const auto item = trim(s.substr(0, comma));
    if (!item.empty()) out.emplace_back(item);
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  return out;
}

KeyValues parse_key_values(std::string_view text) {
  KeyValues out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error(ErrorCode::InvalidConfig, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw Error(ErrorCode::InvalidConfig, "config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::InvalidConfig, "cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

void apply_setting(RunConfig& cfg, std::string_view key, std::string_view value) {
  if (key == "bundle") {
    cfg.bundles = split_list(value);
  } else if (key == "K") {
    const int v = parse_number<int>(key, value);
    if (v < 1) bad(key, value, "must be >= 1");
    cfg.ice.K = v;
  } else if (key == "xi") {
    const double v = parse_number<double>(key, value);
    if (!std::isfinite(v) || v < 0) bad(key, value, "must be finite and >= 0");
    cfg.ice.xi = v;
  } else if (key == "epsilon") {
    const double v = parse_number<double>(key, value);
    if (!std::isfinite(v) || !(v > 0)) bad(key, value, "must be finite and > 0");
    cfg.ice.epsilon = v;
  } else if (key == "lambda_mode") {
    const auto mode = parse_lambda_mode(value);
    if (!mode) bad(key, value, "expected adaptive, fixed or image_only");
    cfg.ice.lambda_mode = *mode;
  } else if (key == "lambda") {
    const double v = parse_number<double>(key, value);
    if (!std::isfinite(v) || v < 0) bad(key, value, "must be finite and >= 0");
    cfg.ice.lambda = v;
  } else if (key == "tau") {
    const double v = parse_number<double>(key, value);
    if (!std::isfinite(v) || !(v > 0)) bad(key, value, "must be finite and > 0");
    cfg.ice.tau = v;
    cfg.tau_set = true;
  } else if (key == "upsilon") {
    const int v = parse_number<int>(key, value);
    if (v < 1) bad(key, value, "must be >= 1");
    cfg.ice.upsilon = v;
  } else if (key == "methods") {
    auto methods = split_list(value);
    if (methods.empty()) bad(key, value, "needs at least one method");
    for (const auto& m : methods) Method::parse(m);
    cfg.methods = std::move(methods);
  } else if (key == "report_ks") {
    std::vector<int> ks;
    for (const auto& item : split_list(value)) {
      const int k = parse_number<int>(key, item);
      if (k < 1) bad(key, value, "entries must be >= 1");
      ks.push_back(k);
    }
    cfg.report_ks = std::move(ks);
  } else if (key == "report_json") {
    cfg.report_json = std::string(value);
  } else if (key == "report_csv") {
    cfg.report_csv = std::string(value);
  } else if (key == "seed") {
    cfg.seed = parse_number<std::uint64_t>(key, value);
  } else if (key == "workers") {
    cfg.workers = parse_number<unsigned>(key, value);
  } else if (key == "exemplars") {
    cfg.exemplars = parse_number<std::size_t>(key, value);
  } else {
    throw Error(ErrorCode::InvalidConfig, "unknown config key '" + std::string(key) + "'");
  }
}

void apply_settings(RunConfig& cfg, const KeyValues& kvs) {
  for (const auto& [k, v] : kvs) apply_setting(cfg, k, v);
}

IceConfig resolve_ice_config(const RunConfig& cfg, double bundle_temperature_hint) {
  IceConfig out = cfg.ice;
  if (!cfg.tau_set) out.tau = bundle_temperature_hint;
  return out;
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j = config_to_json(cfg.ice);
  if (!cfg.tau_set) j["tau"] = "bundle";
  j["bundle"] = cfg.bundles;
  j["methods"] = cfg.methods;
  j["report_ks"] = cfg.report_ks;
  j["report_json"] = cfg.report_json;
  j["report_csv"] = cfg.report_csv;
  j["seed"] = cfg.seed;
  j["workers"] = cfg.workers;
  j["exemplars"] = cfg.exemplars;
  return j;
}

}  // namespace ice

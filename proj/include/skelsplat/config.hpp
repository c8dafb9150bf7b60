#pragma once

#include "skelsplat/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace skelsplat {

/// Malformed config text, unknown keys or mistyped values.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parses the TOML subset used by engine configs: [table] and [table.sub] headers,
/// key = value with strings, integers, floats, booleans and (possibly multi-line)
/// arrays of those, and # comments. Returns nested JSON objects.
nlohmann::json parse_toml(const std::string& text);

struct ConfigKey {
  std::string key;  // dotted, e.g. "stage1.lambda_geo"
  std::string doc;
};

/// Every accepted key with a one-line description, in file order.
const std::vector<ConfigKey>& config_keys();

/// Defaults overridden by the keys present in the text. Unknown keys are errors.
TrainConfig config_from_toml(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path);

/// Every key with its current value, as JSON (dotted keys flattened into tables).
nlohmann::json config_to_json(const TrainConfig& cfg);
/// Same content as TOML, one commented line per key.
std::string config_to_toml(const TrainConfig& cfg);

}  // namespace skelsplat

#include "explore/config.hpp"

#include <cstdlib>

#include "CLI11.hpp"
#include "explore/errors.hpp"

namespace explore {

ConfigMap read_config_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigTOML().from_file(path.string());
  } catch (const CLI::Error& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  ConfigMap out;
  for (const auto& item : items) {
    // CLI11 emits "++"/"--" markers when entering and leaving sections.
    if (item.name == "++" || item.name == "--") continue;
    std::string value;
    for (std::size_t i = 0; i < item.inputs.size(); ++i) {
      if (i > 0) value += ',';
      value += item.inputs[i];
    }
    out[item.fullname()] = value;
  }
  return out;
}

std::optional<std::string> config_string(const ConfigMap& config, const std::string& key) {
  auto it = config.find(key);
  if (it == config.end()) return std::nullopt;
  return it->second;
}

std::optional<std::int64_t> config_int(const ConfigMap& config, const std::string& key) {
  auto s = config_string(config, key);
  if (!s) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stoll(*s, &used);
    if (used == s->size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "' is not an integer: '" + *s + "'");
}

std::optional<double> config_double(const ConfigMap& config, const std::string& key) {
  auto s = config_string(config, key);
  if (!s) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stod(*s, &used);
    if (used == s->size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "' is not a number: '" + *s + "'");
}

std::optional<bool> config_bool(const ConfigMap& config, const std::string& key) {
  auto s = config_string(config, key);
  if (!s) return std::nullopt;
  if (*s == "true" || *s == "1") return true;
  if (*s == "false" || *s == "0") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: '" + *s + "'");
}

}  // namespace explore

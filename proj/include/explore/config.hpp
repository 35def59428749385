#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

namespace explore {

// Flat view of a TOML-style config file: keys are "section.name", values are
// the unquoted scalar text. Arrays are joined with commas.
using ConfigMap = std::map<std::string, std::string>;

// Throws ConfigError when the file is missing or malformed.
ConfigMap read_config_file(const std::filesystem::path& path);

// Typed accessors; ConfigError names the key on conversion failure.
std::optional<std::string> config_string(const ConfigMap& config, const std::string& key);
std::optional<std::int64_t> config_int(const ConfigMap& config, const std::string& key);
std::optional<double> config_double(const ConfigMap& config, const std::string& key);
std::optional<bool> config_bool(const ConfigMap& config, const std::string& key);

}  // namespace explore

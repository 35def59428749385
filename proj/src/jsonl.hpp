#pragma once

// Line-oriented JSON helpers shared by the artifact readers.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <string>

#include "explore/errors.hpp"
#include "json.hpp"

namespace explore::jsonl {

using nlohmann::json;

inline json parse_line(const std::string& line, std::size_t line_no) {
  try {
    auto j = json::parse(line);
    if (!j.is_object()) throw ParseError(line_no, "record is not a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw ParseError(line_no, std::string("malformed record: ") + e.what());
  }
}

inline bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

template <typename T>
T field(const json& j, const char* name, std::size_t line_no) {
  auto it = j.find(name);
  if (it == j.end()) throw ParseError(line_no, std::string("missing field '") + name + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ParseError(line_no, std::string("field '") + name + "' has the wrong type");
  }
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace explore::jsonl

#pragma once

#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"

#include "jpool/error.hpp"

namespace jpool {

/// Parses a JSON file; syntax errors carry the path and byte offset.
inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": offset " + std::to_string(e.byte) + ": " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << j.dump(2) << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

/// Runs `fn`, rethrowing nlohmann type/key errors as ParseError tagged with `path`.
template <typename Fn>
auto with_json_context(const std::filesystem::path& path, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace jpool

#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"

namespace mexfuse {

using Json = nlohmann::json;

/// Calls `row` for every non-blank line. Parse failures and exceptions thrown
/// by `row` are rethrown as ParseError("<path>:<line>: ...").
void read_jsonl(const std::filesystem::path& path,
                const std::function<void(const Json& row, std::size_t line)>& row);

void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& rows);

[[nodiscard]] Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& value);

/// Typed field access with a readable error naming the key.
template <typename T>
T require_field(const Json& row, const char* key) {
  const auto it = row.find(key);
  if (it == row.end()) throw std::invalid_argument(std::string("missing field '") + key + "'");
  try {
    return it->template get<T>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument(std::string("field '") + key + "' has the wrong type");
  }
}

}  // namespace mexfuse

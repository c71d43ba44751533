#include "mexfuse/jsonl.hpp"

#include <fstream>

#include "mexfuse/errors.hpp"

namespace mexfuse {

void read_jsonl(const std::filesystem::path& path,
                const std::function<void(const Json& row, std::size_t line)>& row) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      row(Json::parse(text), line);
    } catch (const std::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line) + ": " + e.what());
    }
  }
}

void write_jsonl(const std::filesystem::path& path, const std::vector<Json>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  for (const Json& r : rows) out << r.dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const Json& value) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out << value.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace mexfuse

#pragma once

// Small CSV helpers shared by the file formats. Fields never contain commas
// or quotes in these formats, so no quoting is supported.

#include <charconv>
#include <cstdint>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "bcr/errors.hpp"

namespace bcr::csv {

inline std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    out.emplace_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline bool next_line(std::istream& is, std::string& line) {
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) return true;
  }
  return false;
}

inline void expect_header(std::istream& is, std::string_view expected, const std::string& what) {
  std::string line;
  if (!next_line(is, line)) throw ValidationError(what + ": missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (line != expected)
    throw ValidationError(what + ": expected header '" + std::string(expected) + "', got '" + line + "'");
}

inline double to_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ValidationError(what + ": not a number: '" + s + "'");
  }
}

template <typename Int>
Int to_int(const std::string& s, const std::string& what) {
  Int v{};
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ValidationError(what + ": not an integer: '" + s + "'");
  return v;
}

// Shortest text that reads back to the same double.
inline std::string exact(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

// Nine significant digits.
inline std::string sig9(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 9);
  return std::string(buf, ptr);
}

}  // namespace bcr::csv

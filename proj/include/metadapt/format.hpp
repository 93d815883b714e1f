#pragma once

#include <charconv>
#include <string>
#include <string_view>
#include <system_error>

#include "metadapt/error.hpp"

namespace metadapt {

// Shortest text that round-trips to the same double.
inline std::string fmt_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Fixed 17 significant digits.
inline std::string fmt_double17(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc{} || res.ptr != last || s.empty()) {
    throw Error("malformed number '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace metadapt

#pragma once

#include <charconv>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace normgame::csv {

/// Splits on commas and trims surrounding blanks and a trailing '\r'. No quoting.
std::vector<std::string> split(std::string_view line);

/// Strict decimal parse of the whole field; nullopt on any leftover characters.
std::optional<double> parse_double(std::string_view field);

/// Shortest text that round-trips to the same double.
std::string format_double(double value);

/// Fixed-point text with `digits` decimals, used for human-facing tables.
std::string format_fixed(double value, int digits);

std::string join(const std::vector<std::string>& fields);

}  // namespace normgame::csv

#pragma once

#include <string>
#include <string_view>

namespace preroute {

/// Reads a whole file; throws preroute::Error naming the path on failure.
std::string read_file(const std::string& path);

/// Writes to a sibling temporary file, then renames over the target, so
/// readers never observe a partially written document.
void write_file_atomic(const std::string& path, std::string_view contents);

/// Appends one line (a trailing newline is added).
void append_line(const std::string& path, std::string_view line);

}  // namespace preroute

#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace mechshift {

/// Writes via a sibling temp file and rename, so readers never observe a
/// partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

/// Shortest round-trip text for a float ("%.9g" style, locale independent).
std::string format_float(double value, int precision = 9);

/// CSV field quoting (RFC 4180 style) when the field needs it.
std::string csv_field(std::string_view s);

}  // namespace mechshift

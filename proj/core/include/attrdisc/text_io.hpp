#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace attrdisc {

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames over `path`; parent directories
// are created. On failure no file is left at `path` or at the temp name.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

// Fixed-notation decimal rendering with a locale-independent result.
std::string format_fixed(double value, int decimals);

std::string csv_escape(std::string_view field);
std::vector<std::string> split_csv_line(std::string_view line);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  // 1-based file line number of every row, for error messages.
  std::vector<std::size_t> line_numbers;

  // Index of a header column; throws kFormat naming the file when absent.
  std::size_t column(std::string_view name) const;
  std::string source;
};

// Reads a CSV with a header row. Lines starting with '#' and blank lines are
// skipped. Every row must have the header's field count.
CsvTable read_csv(const std::filesystem::path& path);
CsvTable parse_csv(std::string_view text, std::string source);

std::vector<std::string> split_list(std::string_view text, char sep);
std::vector<std::string> split_lines(std::string_view text);

double parse_real(std::string_view text, std::string_view context);
long long parse_integer(std::string_view text, std::string_view context);

}  // namespace attrdisc

#pragma once

// Output plumbing: atomic file replacement and fixed-header CSV tables.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace stabmoe {

/// Writes to a sibling temporary file, flushes, then renames over `path`.
void atomic_write(const std::filesystem::path& path, std::string_view contents);
void atomic_write(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
std::string read_text(const std::filesystem::path& path);

/// Shortest round-trip decimal form; "nan", "inf" and "-inf" for non-finite values.
std::string format_number(double value);

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  /// Throws if the row width differs from the header.
  void add_row(std::vector<std::string> cells);
  [[nodiscard]] const std::vector<std::string>& header() const { return header_; }
  [[nodiscard]] std::size_t rows() const { return rows_.size(); }
  [[nodiscard]] std::string render() const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace stabmoe

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace picl {

namespace fs = std::filesystem;

/// 64-bit FNV-1a; used for config and content hashes.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;
std::uint64_t fnv1a64(std::span<const std::byte> bytes) noexcept;
std::string hex64(std::uint64_t value);

std::string read_text_file(const fs::path& path);
std::vector<std::byte> read_binary_file(const fs::path& path);

/// Write to a sibling temp file then rename over `path`, so readers never
/// observe a partial file.
void write_file_atomic(const fs::path& path, std::string_view bytes);
void write_file_atomic(const fs::path& path, std::span<const std::byte> bytes);

/// `<stem>.json` next to `path`.
fs::path sidecar_path(const fs::path& path);
void write_sidecar(const fs::path& path, const nlohmann::json& meta);
nlohmann::json read_sidecar(const fs::path& path);

/// Content hash of a file (FNV-1a over its bytes), hex encoded.
std::string file_content_hash(const fs::path& path);

/// Shortest round-trippable decimal rendering of a double.
std::string format_double(double value);

/// Minimal CSV table writer: header row then one row per record.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> columns);

  CsvTable& row();
  CsvTable& cell(std::string_view text);
  CsvTable& cell(double value);
  CsvTable& cell(long long value);
  CsvTable& cell(int value) { return cell(static_cast<long long>(value)); }
  CsvTable& cell(std::size_t value) { return cell(static_cast<long long>(value)); }

  std::size_t n_rows() const noexcept { return rows_.size(); }
  std::string str() const;
  void write(const fs::path& path) const;

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

/// Split one CSV line on commas (no quoting; all tables here are numeric).
std::vector<std::string> split_csv_line(std::string_view line);

}  // namespace picl

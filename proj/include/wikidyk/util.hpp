#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace wikidyk {

using Json = nlohmann::ordered_json;

/// Lowercase hex MD5 of the input. Used for record ids and config fingerprints.
std::string stable_hash_hex(std::string_view data);

/// 64-bit FNV-1a; stable across platforms, unlike std::hash.
std::uint64_t fnv1a64(std::string_view data) noexcept;

std::vector<std::string> split_whitespace(std::string_view text);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Trim and collapse internal whitespace runs to a single space.
std::string normalize_space(std::string_view text);
std::string_view trim(std::string_view text);
std::string to_lower(std::string_view text);
bool contains_ci(std::string_view haystack, std::string_view needle);
std::string replace_all(std::string text, std::string_view from, std::string_view to);
std::size_t count_occurrences(std::string_view text, std::string_view needle);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

/// Calls `fn` for every non-blank line of a JSONL file. Line numbers are 1-based.
void read_jsonl(const std::filesystem::path& path,
                const std::function<void(const Json&, std::size_t line)>& fn);

class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path, bool append = false);
  void write(const Json& value);
  void flush();

 private:
  std::ofstream out_;
  std::filesystem::path path_;
};

}  // namespace wikidyk

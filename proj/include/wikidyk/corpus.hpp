#pragma once

#include <chrono>
#include <compare>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "wikidyk/util.hpp"

namespace wikidyk::corpus {

class Date {
 public:
  Date() = default;
  explicit Date(std::chrono::year_month_day ymd);

  /// Strict YYYY-MM-DD; nullopt if malformed or not a calendar date.
  static std::optional<Date> parse(std::string_view text);
  /// As parse(), but throws InvalidInput.
  static Date from_string(std::string_view text);

  std::string str() const;
  std::chrono::year_month_day ymd() const noexcept { return ymd_; }

  friend auto operator<=>(const Date& a, const Date& b) noexcept { return a.ymd_ <=> b.ymd_; }
  friend bool operator==(const Date& a, const Date& b) noexcept { return a.ymd_ == b.ymd_; }

 private:
  std::chrono::year_month_day ymd_{std::chrono::year{1970}, std::chrono::January, std::chrono::day{1}};
};

/// Inclusive on both ends.
struct DateWindow {
  Date start;
  Date end;

  DateWindow(Date start, Date end);
  bool contains(const Date& d) const noexcept { return start <= d && d <= end; }
};

struct FactRecord {
  std::string id;
  Date date;
  std::string text;
  std::string bold_entity;
  std::string article_title;
  std::string article_text;
  std::string source_url;
  bool multi_bold = false;
  /// Link targets in the fact outside any bold span, in order of appearance.
  std::vector<std::string> links;
};

/// Lowercase hex of a 128-bit hash over "date|text".
std::string fact_id(const Date& date, std::string_view text);

struct ParseDiagnostic {
  std::size_t entry = 0;
  std::string reason;
  std::string excerpt;
};

struct ParseReport {
  std::size_t entries = 0;
  std::size_t emitted = 0;
  std::size_t skipped_no_bold = 0;
  std::size_t skipped_malformed = 0;
  std::size_t skipped_not_fact = 0;
  std::vector<ParseDiagnostic> diagnostics;
};

struct ParseResult {
  std::vector<FactRecord> facts;
  ParseReport report;
};

/// Parses one archive section (wikitext bullets or rendered <li> markup).
/// Bad entries are skipped and reported; only a bad page_date throws.
ParseResult parse_dyk_page(std::string_view raw, std::string_view page_date,
                           std::string_view source_url = {});

std::vector<FactRecord> filter_facts(const std::vector<FactRecord>& facts, const DateWindow& window);

/// Orders by (date, id), the on-disk order of facts.jsonl.
void sort_facts(std::vector<FactRecord>& facts);

/// Fills article_text from a title -> text map; facts with no entry keep theirs.
void attach_articles(std::vector<FactRecord>& facts, const std::map<std::string, std::string>& articles);

Json to_json(const FactRecord& fact);
FactRecord fact_from_json(const Json& value);

void save_facts(const std::filesystem::path& path, std::vector<FactRecord> facts);
std::vector<FactRecord> load_facts(const std::filesystem::path& path);

}  // namespace wikidyk::corpus

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>

#include "wikidyk/corpus.hpp"
#include "wikidyk/error.hpp"
#include "wikidyk/rng.hpp"

using namespace wikidyk;
using namespace wikidyk::corpus;

TEST_CASE("wikitext bullet with one bold span") {
  auto r = parse_dyk_page("* ... that '''Margrit Waltz''' has ferried planes to points on five continents?",
                          "2024-01-05");
  REQUIRE(r.facts.size() == 1);
  const auto& f = r.facts[0];
  CHECK(f.text == "Margrit Waltz has ferried planes to points on five continents");
  CHECK(f.bold_entity == "Margrit Waltz");
  CHECK(f.article_title == "Margrit Waltz");
  CHECK(f.date.str() == "2024-01-05");
  CHECK_FALSE(f.multi_bold);
  CHECK(f.id == stable_hash_hex("2024-01-05|" + f.text));
  CHECK(f.id == fact_id(f.date, f.text));
  CHECK(r.report.entries == 1);
  CHECK(r.report.emitted == 1);
}

TEST_CASE("empty page gives an empty report") {
  auto r = parse_dyk_page("", "2024-01-05");
  CHECK(r.facts.empty());
  CHECK(r.report.entries == 0);
}

TEST_CASE("links: bold link target becomes the article title, other links are recorded") {
  auto r = parse_dyk_page(
      "* ... that '''[[Gold Digger (song)|Gold Digger]]''' was produced by [[Kanye West]] with [[Jon Brion|Brion]]?",
      "2023-06-01");
  REQUIRE(r.facts.size() == 1);
  const auto& f = r.facts[0];
  CHECK(f.text == "Gold Digger was produced by Kanye West with Brion");
  CHECK(f.bold_entity == "Gold Digger");
  CHECK(f.article_title == "Gold Digger (song)");
  CHECK(f.links == std::vector<std::string>{"Kanye West", "Jon Brion"});
}

TEST_CASE("two bold spans: first wins and the record is flagged") {
  auto r = parse_dyk_page("* ... that '''Alpha''' and '''Beta''' were twins?", "2022-02-02");
  REQUIRE(r.facts.size() == 1);
  CHECK(r.facts[0].bold_entity == "Alpha");
  CHECK(r.facts[0].multi_bold);
}

TEST_CASE("ellipsis variants and case are tolerated") {
  for (std::string lead : {"... that ", "...that ", "\xE2\x80\xA6 that ", "... That ", ". . . that "}) {
    auto r = parse_dyk_page("* " + lead + "'''Zed''' sang?", "2022-02-02");
    REQUIRE_MESSAGE(r.facts.size() == 1, lead);
    CHECK(r.facts[0].text == "Zed sang");
  }
}

TEST_CASE("rendered HTML list items") {
  const std::string html =
      "<ul><li>... that <b><a href=\"/wiki/Tess_Posner\" title=\"Tess Posner\">Tess Posner</a></b> "
      "leads <a href=\"/wiki/AI4ALL\">AI4ALL</a>?</li>"
      "<li>... that nobody here is bold?</li>"
      "<li>... that <strong>Q&amp;A</strong> is a format?</li></ul>";
  auto r = parse_dyk_page(html, "2023-03-03", "https://example.org/archive");
  REQUIRE(r.facts.size() == 2);
  CHECK(r.facts[0].text == "Tess Posner leads AI4ALL");
  CHECK(r.facts[0].bold_entity == "Tess Posner");
  CHECK(r.facts[0].article_title == "Tess Posner");
  CHECK(r.facts[0].source_url == "https://example.org/archive");
  CHECK(r.facts[1].bold_entity == "Q&A");
  CHECK(r.report.entries == 3);
  CHECK(r.report.skipped_no_bold == 1);
}

TEST_CASE("malformed entries are skipped, the rest of the page survives") {
  auto r = parse_dyk_page(
      "* ... that '''Broken has no closing marker?\n"
      "* ... that '''Fine''' is fine?\n"
      "* ... that nothing is bold here?\n",
      "2024-01-01");
  REQUIRE(r.facts.size() == 1);
  CHECK(r.facts[0].bold_entity == "Fine");
  CHECK(r.report.entries == 3);
  CHECK(r.report.skipped_malformed == 1);
  CHECK(r.report.skipped_no_bold == 1);
  CHECK(r.report.diagnostics.size() == 2);
}

TEST_CASE("bad page date is rejected") {
  CHECK_THROWS_AS(parse_dyk_page("* ... that '''A''' b?", "2024-02-30"), InvalidInput);
  CHECK_THROWS_AS(parse_dyk_page("* ... that '''A''' b?", "yesterday"), InvalidInput);
}

TEST_CASE("dates") {
  CHECK(Date::parse("2024-02-29"));
  CHECK_FALSE(Date::parse("2023-02-29"));
  CHECK_FALSE(Date::parse("2023-2-01"));
  CHECK(Date::from_string("2022-01-01") < Date::from_string("2022-01-02"));
  CHECK_THROWS_AS(DateWindow(Date::from_string("2023-01-02"), Date::from_string("2023-01-01")), InvalidInput);
}

namespace {

FactRecord make_fact(const std::string& date, const std::string& text, const std::string& bold) {
  FactRecord f;
  f.date = Date::from_string(date);
  f.text = text;
  f.bold_entity = bold;
  f.article_title = bold;
  f.id = fact_id(f.date, text);
  return f;
}

}  // namespace

TEST_CASE("filter_facts keeps order and includes both ends") {
  std::vector<FactRecord> facts = {make_fact("2024-05-01", "C x", "C"), make_fact("2022-05-01", "A x", "A"),
                                   make_fact("2023-05-01", "B x", "B")};
  auto one = filter_facts(facts, DateWindow(Date::from_string("2023-01-01"), Date::from_string("2023-12-31")));
  REQUIRE(one.size() == 1);
  CHECK(one[0].bold_entity == "B");
  auto all = filter_facts(facts, DateWindow(Date::from_string("2022-05-01"), Date::from_string("2024-05-01")));
  REQUIRE(all.size() == 3);
  CHECK(all[0].bold_entity == "C");
  CHECK(all[1].bold_entity == "A");
}

TEST_CASE("persist and load round trip, sorted by date then id") {
  std::vector<FactRecord> facts = {make_fact("2024-05-01", "C \"quoted\" x", "C"),
                                   make_fact("2022-05-01", "A \xC3\xA9t\xC3\xA9 x", "A")};
  facts[0].article_text = "line1\nline2";
  facts[0].multi_bold = true;
  facts[1].links = {"L1", "L2"};
  const auto path = std::filesystem::temp_directory_path() / "wikidyk_facts_rt.jsonl";
  save_facts(path, facts);
  auto loaded = load_facts(path);
  REQUIRE(loaded.size() == 2);
  CHECK(loaded[0].bold_entity == "A");
  CHECK(to_json(loaded[0]).dump() == to_json(facts[1]).dump());
  CHECK(to_json(loaded[1]).dump() == to_json(facts[0]).dump());
  const auto first = read_file(path);
  save_facts(path, loaded);
  CHECK(read_file(path) == first);
  std::filesystem::remove(path);
}

TEST_CASE("loading rejects a record whose bold entity is not in the text") {
  auto j = to_json(make_fact("2024-01-01", "Alpha beta", "Alpha"));
  j["bold_entity"] = "Gamma";
  CHECK_THROWS_AS(fact_from_json(j), InvalidInput);
}

TEST_CASE("fuzzed bullets: every emitted record keeps the bold-substring invariant and is deterministic") {
  const std::vector<std::string> pieces = {"'''", "''", "[[", "]]", "|", "{{", "}}", "<b>", "</b>", "alpha", "Beta",
                                           " ",   "?",  "...", "that", "&amp;", "<!--", "-->", "\xE2\x80\xA6", "x"};
  Rng rng(2024);
  std::size_t emitted = 0;
  for (int page = 0; page < 300; ++page) {
    std::string raw;
    for (int line = 0; line < 5; ++line) {
      auto noise = [&] {
        std::string out;
        const auto n = rng.below(6);
        for (std::uint64_t i = 0; i < n; ++i) out += pieces[rng.below(pieces.size())];
        return out;
      };
      raw += "* ... that " + noise();
      // Most lines carry one well-formed bold span amid the noise.
      if (rng.below(4) != 0) raw += " '''" + pieces[9 + rng.below(2)] + "''' ";
      raw += noise() + "?\n";
    }
    auto r1 = parse_dyk_page(raw, "2024-01-01");
    auto r2 = parse_dyk_page(raw, "2024-01-01");
    REQUIRE(r1.facts.size() == r2.facts.size());
    CHECK(r1.report.entries == 5);
    CHECK(r1.report.emitted + r1.report.skipped_no_bold + r1.report.skipped_malformed + r1.report.skipped_not_fact ==
          r1.report.entries);
    for (std::size_t i = 0; i < r1.facts.size(); ++i) {
      const auto& f = r1.facts[i];
      CHECK_FALSE(f.bold_entity.empty());
      CHECK(f.text.find(f.bold_entity) != std::string::npos);
      CHECK(f.id == r2.facts[i].id);
      CHECK_NOTHROW(fact_from_json(to_json(f)));
      ++emitted;
    }
  }
  CHECK(emitted > 50);
}

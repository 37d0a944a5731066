#include "wikidyk/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <regex>
#include <set>

#include "wikidyk/error.hpp"

namespace wikidyk::corpus {

using namespace std::chrono;

Date::Date(year_month_day ymd) : ymd_(ymd) {
  if (!ymd.ok()) throw InvalidInput("invalid calendar date");
}

std::optional<Date> Date::parse(std::string_view text) {
  text = trim(text);
  if (text.size() != 10 || text[4] != '-' || text[7] != '-') return std::nullopt;
  auto digits = [&](std::size_t pos, std::size_t len) -> std::optional<int> {
    int v = 0;
    for (std::size_t i = pos; i < pos + len; ++i) {
      if (!std::isdigit(static_cast<unsigned char>(text[i]))) return std::nullopt;
      v = v * 10 + (text[i] - '0');
    }
    return v;
  };
  auto y = digits(0, 4);
  auto m = digits(5, 2);
  auto d = digits(8, 2);
  if (!y || !m || !d) return std::nullopt;
  year_month_day ymd{year{*y}, month{static_cast<unsigned>(*m)}, day{static_cast<unsigned>(*d)}};
  if (!ymd.ok()) return std::nullopt;
  return Date(ymd);
}

Date Date::from_string(std::string_view text) {
  auto d = parse(text);
  if (!d) throw InvalidInput("unparseable date '" + std::string(text) + "'");
  return *d;
}

std::string Date::str() const {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd_.year()),
                static_cast<unsigned>(ymd_.month()), static_cast<unsigned>(ymd_.day()));
  return buf;
}

DateWindow::DateWindow(Date s, Date e) : start(s), end(e) {
  if (end < start) throw InvalidInput("date window start " + s.str() + " after end " + e.str());
}

std::string fact_id(const Date& date, std::string_view text) {
  std::string key = date.str();
  key.push_back('|');
  key.append(text);
  return stable_hash_hex(key);
}

namespace {

struct Span {
  std::size_t begin;
  std::size_t end;
};

struct LinkSpan {
  std::string title;
  Span range;
};

// Result of flattening one entry's inline markup to plain text.
struct Flattened {
  std::string text;
  std::vector<Span> bold;
  std::vector<LinkSpan> links;
  std::string error;
};

bool starts_with_ci(std::string_view s, std::size_t pos, std::string_view prefix) {
  if (pos + prefix.size() > s.size()) return false;
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    if (std::tolower(static_cast<unsigned char>(s[pos + i])) !=
        std::tolower(static_cast<unsigned char>(prefix[i])))
      return false;
  }
  return true;
}

std::string url_decode_title(std::string_view href) {
  std::string out;
  for (std::size_t i = 0; i < href.size(); ++i) {
    char c = href[i];
    if (c == '%' && i + 2 < href.size() && std::isxdigit(static_cast<unsigned char>(href[i + 1])) &&
        std::isxdigit(static_cast<unsigned char>(href[i + 2]))) {
      out.push_back(static_cast<char>(std::stoi(std::string(href.substr(i + 1, 2)), nullptr, 16)));
      i += 2;
    } else if (c == '_') {
      out.push_back(' ');
    } else {
      out.push_back(c);
    }
  }
  return out;
}

std::string clean_link_target(std::string_view target) {
  target = trim(target);
  if (!target.empty() && target.front() == ':') target.remove_prefix(1);
  if (auto hash = target.find('#'); hash != std::string_view::npos) target = target.substr(0, hash);
  std::string out = replace_all(std::string(trim(target)), "_", " ");
  if (!out.empty()) out[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(out[0])));
  return out;
}

std::optional<std::string> attribute(std::string_view tag, std::string_view name) {
  std::string lowered = to_lower(tag);
  std::string key = std::string(name) + "=";
  auto pos = lowered.find(key);
  if (pos == std::string::npos) return std::nullopt;
  pos += key.size();
  if (pos >= tag.size()) return std::nullopt;
  char quote = tag[pos];
  if (quote == '"' || quote == '\'') {
    auto end = tag.find(quote, pos + 1);
    if (end == std::string_view::npos) return std::nullopt;
    return std::string(tag.substr(pos + 1, end - pos - 1));
  }
  auto end = tag.find_first_of(" >", pos);
  return std::string(tag.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos));
}

class Flattener {
 public:
  Flattened run(std::string_view markup) {
    process(markup);
    if (!out_.error.empty()) return std::move(out_);
    if (wiki_bold_ || html_bold_depth_ > 0) {
      out_.error = "unbalanced bold markers";
    } else if (open_anchor_) {
      out_.error = "unclosed anchor";
    }
    return std::move(out_);
  }

 private:
  bool bold_active() const { return wiki_bold_ || html_bold_depth_ > 0; }

  void set_bold(bool wiki, int html_depth) {
    const bool before = bold_active();
    wiki_bold_ = wiki;
    html_bold_depth_ = html_depth;
    const bool after = bold_active();
    if (!before && after) {
      bold_start_ = out_.text.size();
    } else if (before && !after) {
      out_.bold.push_back({bold_start_, out_.text.size()});
    }
  }

  void process(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size() && out_.error.empty()) {
      if (s.compare(i, 5, "'''''") == 0) {
        set_bold(!wiki_bold_, html_bold_depth_);
        i += 5;
      } else if (s.compare(i, 3, "'''") == 0) {
        set_bold(!wiki_bold_, html_bold_depth_);
        i += 3;
      } else if (s.compare(i, 2, "''") == 0) {
        i += 2;
      } else if (s.compare(i, 2, "[[") == 0) {
        i = wiki_link(s, i);
      } else if (s.compare(i, 2, "{{") == 0) {
        i = skip_template(s, i);
      } else if (s.compare(i, 4, "<!--") == 0) {
        auto end = s.find("-->", i + 4);
        i = end == std::string_view::npos ? s.size() : end + 3;
      } else if (s[i] == '<') {
        i = html_tag(s, i);
      } else if (s[i] == '&') {
        i = entity(s, i);
      } else if (s[i] == '[' && (starts_with_ci(s, i + 1, "http://") || starts_with_ci(s, i + 1, "https://"))) {
        auto end = s.find(']', i);
        if (end == std::string_view::npos) {
          out_.text.push_back(s[i++]);
        } else {
          auto inner = s.substr(i + 1, end - i - 1);
          auto space = inner.find(' ');
          if (space != std::string_view::npos) process(inner.substr(space + 1));
          i = end + 1;
        }
      } else {
        out_.text.push_back(s[i++]);
      }
    }
  }

  std::size_t wiki_link(std::string_view s, std::size_t i) {
    auto end = s.find("]]", i + 2);
    if (end == std::string_view::npos) {
      out_.error = "unclosed wiki link";
      return s.size();
    }
    auto inner = s.substr(i + 2, end - i - 2);
    auto pipe = inner.find('|');
    std::string_view target = pipe == std::string_view::npos ? inner : inner.substr(0, pipe);
    std::string_view display = pipe == std::string_view::npos ? inner : inner.substr(pipe + 1);
    std::string target_clean = clean_link_target(target);
    if (starts_with_ci(target_clean, 0, "file:") || starts_with_ci(target_clean, 0, "image:")) {
      return end + 2;
    }
    // Bold markers inside the target (e.g. [['''X''']]) belong to the display.
    std::string target_plain = replace_all(std::string(target), "'''", "");
    target_clean = clean_link_target(target_plain);
    const std::size_t start = out_.text.size();
    process(display);
    out_.links.push_back({target_clean, {start, out_.text.size()}});
    return end + 2;
  }

  std::size_t skip_template(std::string_view s, std::size_t i) {
    int depth = 0;
    while (i < s.size()) {
      if (s.compare(i, 2, "{{") == 0) {
        ++depth;
        i += 2;
      } else if (s.compare(i, 2, "}}") == 0) {
        --depth;
        i += 2;
        if (depth == 0) return i;
      } else {
        ++i;
      }
    }
    out_.error = "unclosed template";
    return s.size();
  }

  std::size_t html_tag(std::string_view s, std::size_t i) {
    auto end = s.find('>', i);
    if (end == std::string_view::npos) {
      out_.text.push_back(s[i]);
      return i + 1;
    }
    std::string_view tag = s.substr(i, end - i + 1);
    std::string lowered = to_lower(tag);
    auto is = [&](std::string_view name) {
      return lowered.rfind(name, 0) == 0 &&
             (lowered.size() == name.size() || lowered[name.size()] == '>' || lowered[name.size()] == ' ');
    };
    if (is("<b") || is("<strong")) {
      set_bold(wiki_bold_, html_bold_depth_ + 1);
    } else if (is("</b") || is("</strong")) {
      if (html_bold_depth_ == 0) {
        out_.error = "closing bold tag without opening";
      } else {
        set_bold(wiki_bold_, html_bold_depth_ - 1);
      }
    } else if (is("<a")) {
      std::string title;
      if (auto href = attribute(tag, "href")) {
        std::string_view h = *href;
        if (auto pos = h.find("/wiki/"); pos != std::string_view::npos) {
          title = clean_link_target(url_decode_title(h.substr(pos + 6)));
        }
      }
      if (title.empty()) {
        if (auto t = attribute(tag, "title")) title = clean_link_target(*t);
      }
      anchor_title_ = title;
      anchor_start_ = out_.text.size();
      open_anchor_ = true;
    } else if (is("</a")) {
      if (open_anchor_ && !anchor_title_.empty()) {
        out_.links.push_back({anchor_title_, {anchor_start_, out_.text.size()}});
      }
      open_anchor_ = false;
    } else if (is("<br")) {
      out_.text.push_back(' ');
    }
    return end + 1;
  }

  std::size_t entity(std::string_view s, std::size_t i) {
    static const std::pair<std::string_view, std::string_view> kNamed[] = {
        {"&amp;", "&"}, {"&lt;", "<"},   {"&gt;", ">"},         {"&quot;", "\""},
        {"&#39;", "'"}, {"&apos;", "'"}, {"&nbsp;", " "},       {"&ndash;", "\xE2\x80\x93"},
        {"&mdash;", "\xE2\x80\x94"},     {"&hellip;", "\xE2\x80\xA6"}};
    for (const auto& [name, value] : kNamed) {
      if (s.compare(i, name.size(), name) == 0) {
        out_.text.append(value);
        return i + name.size();
      }
    }
    if (s.compare(i, 2, "&#") == 0) {
      auto semi = s.find(';', i);
      if (semi != std::string_view::npos && semi - i <= 8) {
        std::string_view num = s.substr(i + 2, semi - i - 2);
        try {
          long code = (!num.empty() && (num[0] == 'x' || num[0] == 'X'))
                          ? std::stol(std::string(num.substr(1)), nullptr, 16)
                          : std::stol(std::string(num));
          if (code > 0 && code < 0x80) {
            out_.text.push_back(static_cast<char>(code));
            return semi + 1;
          }
        } catch (const std::exception&) {
        }
      }
    }
    out_.text.push_back('&');
    return i + 1;
  }

  Flattened out_;
  bool wiki_bold_ = false;
  int html_bold_depth_ = 0;
  std::size_t bold_start_ = 0;
  bool open_anchor_ = false;
  std::string anchor_title_;
  std::size_t anchor_start_ = 0;
};

// Collapses whitespace and remaps every recorded offset.
void normalize(Flattened& f) {
  std::string out;
  std::vector<std::size_t> map(f.text.size() + 1, 0);
  bool pending_space = false;
  for (std::size_t i = 0; i < f.text.size(); ++i) {
    const bool space = std::isspace(static_cast<unsigned char>(f.text[i])) != 0;
    if (space) {
      if (!out.empty()) pending_space = true;
      map[i] = out.size();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    map[i] = out.size();
    out.push_back(f.text[i]);
  }
  map[f.text.size()] = out.size();
  auto remap = [&](Span& sp) {
    sp.begin = map[sp.begin];
    sp.end = map[sp.end];
  };
  for (auto& b : f.bold) remap(b);
  for (auto& l : f.links) remap(l.range);
  f.text = std::move(out);
}

void trim_span(const std::string& text, Span& sp) {
  while (sp.begin < sp.end && std::isspace(static_cast<unsigned char>(text[sp.begin]))) ++sp.begin;
  while (sp.end > sp.begin && std::isspace(static_cast<unsigned char>(text[sp.end - 1]))) --sp.end;
}

std::vector<std::string> split_entries(std::string_view raw) {
  std::vector<std::string> entries;
  if (to_lower(raw).find("<li") != std::string::npos) {
    const std::string lowered = to_lower(raw);
    std::size_t pos = 0;
    while ((pos = lowered.find("<li", pos)) != std::string::npos) {
      auto open_end = lowered.find('>', pos);
      if (open_end == std::string::npos) break;
      if (open_end != pos + 3 && lowered[pos + 3] != ' ') {
        pos = open_end;
        continue;
      }
      auto close = lowered.find("</li>", open_end);
      auto stop = close == std::string::npos ? raw.size() : close;
      entries.emplace_back(raw.substr(open_end + 1, stop - open_end - 1));
      pos = stop;
    }
    return entries;
  }
  std::size_t start = 0;
  while (start <= raw.size()) {
    auto nl = raw.find('\n', start);
    std::string_view line = raw.substr(start, nl == std::string_view::npos ? std::string_view::npos : nl - start);
    line = trim(line);
    if (!line.empty() && line.front() == '*') {
      while (!line.empty() && (line.front() == '*' || line.front() == ' ')) line.remove_prefix(1);
      if (line.rfind("{{*mp}}", 0) == 0) line.remove_prefix(7);
      entries.emplace_back(trim(line));
    }
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  return entries;
}

const std::regex& lead_pattern() {
  // "... that", "...that", "… that", ". . . that"
  static const std::regex re(R"(^(\.\.\.|\xE2\x80\xA6|\. \. \.)?\s*that\s+)", std::regex::icase);
  return re;
}

std::string excerpt(std::string_view s) { return std::string(s.substr(0, 80)); }

}  // namespace

ParseResult parse_dyk_page(std::string_view raw, std::string_view page_date, std::string_view source_url) {
  const Date date = Date::from_string(page_date);
  ParseResult result;
  auto entries = split_entries(raw);
  for (std::size_t n = 0; n < entries.size(); ++n) {
    const std::string& entry = entries[n];
    ++result.report.entries;
    auto skip = [&](std::size_t& counter, std::string reason) {
      ++counter;
      result.report.diagnostics.push_back({n, std::move(reason), excerpt(entry)});
    };

    Flattened flat = Flattener{}.run(entry);
    if (!flat.error.empty()) {
      skip(result.report.skipped_malformed, flat.error);
      continue;
    }
    normalize(flat);

    std::smatch lead;
    if (!std::regex_search(flat.text, lead, lead_pattern())) {
      skip(result.report.skipped_not_fact, "entry does not start with '... that'");
      continue;
    }
    const std::size_t prefix = static_cast<std::size_t>(lead.length(0));
    std::size_t stop = flat.text.size();
    while (stop > prefix && (flat.text[stop - 1] == '?' || flat.text[stop - 1] == ' ')) --stop;
    std::string text = flat.text.substr(prefix, stop - prefix);

    auto clip = [&](Span sp) -> std::optional<Span> {
      std::size_t b = std::clamp(sp.begin, prefix, stop) - prefix;
      std::size_t e = std::clamp(sp.end, prefix, stop) - prefix;
      Span out{b, e};
      trim_span(text, out);
      if (out.begin >= out.end) return std::nullopt;
      return out;
    };

    std::vector<Span> bold;
    for (const auto& b : flat.bold) {
      if (auto c = clip(b)) bold.push_back(*c);
    }
    if (bold.empty()) {
      skip(result.report.skipped_no_bold, "no bold span");
      continue;
    }

    FactRecord fact;
    fact.date = date;
    fact.text = text;
    fact.bold_entity = text.substr(bold.front().begin, bold.front().end - bold.front().begin);
    fact.multi_bold = bold.size() > 1;
    fact.source_url = std::string(source_url);
    fact.id = fact_id(date, fact.text);

    auto overlaps = [](const Span& a, const Span& b) { return a.begin < b.end && b.begin < a.end; };
    std::set<std::string> seen;
    for (const auto& link : flat.links) {
      auto range = clip(link.range);
      if (!range || link.title.empty()) continue;
      if (overlaps(*range, bold.front()) && fact.article_title.empty()) {
        fact.article_title = link.title;
        continue;
      }
      bool in_bold = std::any_of(bold.begin(), bold.end(), [&](const Span& b) { return overlaps(*range, b); });
      if (!in_bold && seen.insert(link.title).second) fact.links.push_back(link.title);
    }
    if (fact.article_title.empty()) fact.article_title = fact.bold_entity;

    result.facts.push_back(std::move(fact));
    ++result.report.emitted;
  }
  return result;
}

std::vector<FactRecord> filter_facts(const std::vector<FactRecord>& facts, const DateWindow& window) {
  std::vector<FactRecord> out;
  std::copy_if(facts.begin(), facts.end(), std::back_inserter(out),
               [&](const FactRecord& f) { return window.contains(f.date); });
  return out;
}

void sort_facts(std::vector<FactRecord>& facts) {
  std::stable_sort(facts.begin(), facts.end(), [](const FactRecord& a, const FactRecord& b) {
    if (a.date != b.date) return a.date < b.date;
    return a.id < b.id;
  });
}

void attach_articles(std::vector<FactRecord>& facts, const std::map<std::string, std::string>& articles) {
  for (auto& f : facts) {
    if (auto it = articles.find(f.article_title); it != articles.end()) f.article_text = it->second;
  }
}

Json to_json(const FactRecord& fact) {
  Json j;
  j["id"] = fact.id;
  j["date"] = fact.date.str();
  j["text"] = fact.text;
  j["bold_entity"] = fact.bold_entity;
  j["article_title"] = fact.article_title;
  j["article_text"] = fact.article_text;
  j["source_url"] = fact.source_url;
  j["multi_bold"] = fact.multi_bold;
  j["links"] = fact.links;
  return j;
}

FactRecord fact_from_json(const Json& j) {
  FactRecord f;
  try {
    f.id = j.at("id").get<std::string>();
    f.date = Date::from_string(j.at("date").get<std::string>());
    f.text = j.at("text").get<std::string>();
    f.bold_entity = j.at("bold_entity").get<std::string>();
    f.article_title = j.value("article_title", std::string{});
    f.article_text = j.value("article_text", std::string{});
    f.source_url = j.value("source_url", std::string{});
    f.multi_bold = j.value("multi_bold", false);
    if (j.contains("links")) f.links = j.at("links").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed fact record: ") + e.what());
  }
  if (f.bold_entity.empty() || f.text.find(f.bold_entity) == std::string::npos) {
    throw InvalidInput("fact " + f.id + ": bold_entity is not a substring of text");
  }
  return f;
}

void save_facts(const std::filesystem::path& path, std::vector<FactRecord> facts) {
  sort_facts(facts);
  JsonlWriter out(path);
  for (const auto& f : facts) out.write(to_json(f));
}

std::vector<FactRecord> load_facts(const std::filesystem::path& path) {
  std::vector<FactRecord> facts;
  read_jsonl(path, [&](const Json& j, std::size_t) { facts.push_back(fact_from_json(j)); });
  return facts;
}

}  // namespace wikidyk::corpus

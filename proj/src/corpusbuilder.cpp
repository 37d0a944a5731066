#include "wikidyk/corpusbuilder.hpp"

#include <map>

#include "wikidyk/error.hpp"
#include "wikidyk/rng.hpp"

namespace wikidyk::build {

std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::NTP: return "NTP";
    case Objective::SyntheticQA: return "SyntheticQA";
    case Objective::SpanPrediction: return "SpanPrediction";
  }
  return "Unknown";
}

std::string_view to_string(SpanFlavor f) { return f == SpanFlavor::BiLM ? "BiLM" : "CLM"; }

Objective objective_from_string(std::string_view name) {
  const std::string n = to_lower(name);
  if (n == "ntp") return Objective::NTP;
  if (n == "syntheticqa" || n == "qa") return Objective::SyntheticQA;
  if (n == "spanprediction" || n == "span" || n == "sp") return Objective::SpanPrediction;
  throw InvalidInput("unknown objective '" + std::string(name) + "'");
}

SpanFlavor flavor_from_string(std::string_view name) {
  const std::string n = to_lower(name);
  if (n == "bilm") return SpanFlavor::BiLM;
  if (n == "clm") return SpanFlavor::CLM;
  throw InvalidInput("unknown span flavor '" + std::string(name) + "'");
}

namespace {

void check_bounds(std::size_t min_len, std::size_t max_len) {
  if (min_len < 1) throw InvalidInput("min_len must be >= 1");
  if (max_len < min_len) throw InvalidInput("max_len must be >= min_len");
}

}  // namespace

std::size_t span_candidate_count(std::size_t length, std::size_t min_len, std::size_t max_len) {
  check_bounds(min_len, max_len);
  std::size_t total = 0;
  for (std::size_t len = min_len; len <= max_len && len <= length; ++len) total += length - len + 1;
  return total;
}

std::pair<std::size_t, std::size_t> span_candidate_at(std::size_t length, std::size_t min_len, std::size_t max_len,
                                                      std::size_t index) {
  check_bounds(min_len, max_len);
  for (std::size_t start = 0; start + min_len <= length; ++start) {
    const std::size_t longest = std::min(max_len, length - start);
    const std::size_t here = longest - min_len + 1;
    if (index < here) return {start, min_len + index};
    index -= here;
  }
  throw InvalidInput("span candidate index out of range");
}

MaskedExample mask_span(const std::vector<std::string>& tokens, std::size_t start, std::size_t len,
                        std::string_view placeholder, std::string fact_id) {
  if (len == 0 || start + len > tokens.size()) throw InvalidInput("span outside token sequence");
  MaskedExample ex;
  ex.fact_id = std::move(fact_id);
  ex.span_start = start;
  ex.span_len = len;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i == start) {
      if (!ex.masked_input.empty()) ex.masked_input.push_back(' ');
      ex.masked_input.append(placeholder);
    }
    if (i >= start && i < start + len) {
      if (!ex.target.empty()) ex.target.push_back(' ');
      ex.target.append(tokens[i]);
      continue;
    }
    if (!ex.masked_input.empty()) ex.masked_input.push_back(' ');
    ex.masked_input.append(tokens[i]);
  }
  return ex;
}

std::vector<MaskedExample> enumerate_span_candidates(const std::vector<std::string>& tokens, std::size_t min_len,
                                                     std::size_t max_len, std::string_view placeholder) {
  check_bounds(min_len, max_len);
  if (tokens.empty()) throw InvalidInput("cannot enumerate spans of an empty token list");
  std::vector<MaskedExample> out;
  out.reserve(span_candidate_count(tokens.size(), min_len, max_len));
  for (std::size_t start = 0; start < tokens.size(); ++start) {
    for (std::size_t len = min_len; len <= max_len && start + len <= tokens.size(); ++len) {
      out.push_back(mask_span(tokens, start, len, placeholder));
    }
  }
  return out;
}

std::string splice(const MaskedExample& example) {
  auto tokens = split_whitespace(example.masked_input);
  if (example.span_start >= tokens.size()) throw InvalidInput("placeholder position outside masked input");
  tokens[example.span_start] = example.target;
  return join(tokens, " ");
}

Json to_json(const CorpusRecord& record) {
  Json j;
  j["fact_id"] = record.fact_id;
  j["objective"] = to_string(record.objective);
  j["input"] = record.input;
  j["target"] = record.target;
  return j;
}

Json to_json(const CorpusMeta& meta) {
  Json j;
  j["objective"] = to_string(meta.objective);
  j["s"] = meta.s;
  j["seed"] = meta.seed;
  j["min_len"] = meta.min_len;
  j["max_len"] = meta.max_len;
  j["flavor"] = to_string(meta.flavor);
  j["n_facts"] = meta.n_facts;
  j["n_records"] = meta.n_records;
  j["excluded"] = meta.excluded;
  return j;
}

namespace {

std::uint64_t fact_seed(std::uint64_t seed, std::string_view fact_id) { return splitmix64(seed ^ fnv1a64(fact_id)); }

// Emits n_groups * s records; group g's repeat r goes through emit(g, r).
template <class Emit>
void emit_shuffled(std::size_t n_groups, std::uint64_t s, std::uint64_t seed, Emit&& emit) {
  const std::uint64_t total = static_cast<std::uint64_t>(n_groups) * s;
  if (total == 0) return;
  const IndexPermutation order(total, seed);
  for (std::uint64_t i = 0; i < total; ++i) {
    const std::uint64_t slot = order(i);
    emit(static_cast<std::size_t>(slot / s), slot % s);
  }
}

}  // namespace

CorpusMeta build_span_corpus(const std::vector<corpus::FactRecord>& facts, const SpanOptions& options,
                             const RecordSink& sink) {
  if (options.s < 1) throw InvalidInput("upsampling s must be >= 1");
  check_bounds(options.min_len, options.max_len);

  struct Prepared {
    const corpus::FactRecord* fact;
    std::vector<std::string> tokens;
    std::size_t candidates;
    IndexPermutation order;
  };
  CorpusMeta meta;
  meta.objective = Objective::SpanPrediction;
  meta.s = options.s;
  meta.seed = options.seed;
  meta.min_len = options.min_len;
  meta.max_len = options.max_len;
  meta.flavor = options.flavor;

  std::vector<Prepared> prepared;
  for (const auto& fact : facts) {
    auto tokens = split_whitespace(fact.text);
    const std::size_t c = span_candidate_count(tokens.size(), options.min_len, options.max_len);
    if (c == 0) {
      meta.excluded.push_back(fact.id + ": no span candidates");
      continue;
    }
    prepared.push_back({&fact, std::move(tokens), c, IndexPermutation(c, fact_seed(options.seed, fact.id))});
  }
  meta.n_facts = prepared.size();

  const std::string_view placeholder =
      options.flavor == SpanFlavor::BiLM ? std::string_view(options.bilm_sentinel) : std::string_view(options.clm_mask);
  CorpusRecord record;
  record.objective = Objective::SpanPrediction;
  emit_shuffled(prepared.size(), options.s, options.seed, [&](std::size_t g, std::uint64_t repeat) {
    const Prepared& p = prepared[g];
    const std::size_t cand = static_cast<std::size_t>(p.order(repeat % p.candidates));
    const auto [start, len] = span_candidate_at(p.tokens.size(), options.min_len, options.max_len, cand);
    MaskedExample ex = mask_span(p.tokens, start, len, placeholder);
    record.fact_id = p.fact->id;
    if (options.flavor == SpanFlavor::BiLM) {
      record.input = std::move(ex.masked_input);
    } else {
      record.input.assign(kCLMPromptHead);
      record.input.append(ex.masked_input);
      record.input.append(kCLMPromptTail);
    }
    record.target = std::move(ex.target);
    sink(record);
    ++meta.n_records;
  });
  return meta;
}

CorpusMeta build_ntp_corpus(const std::vector<corpus::FactRecord>& facts, std::uint64_t s, std::uint64_t seed,
                            const RecordSink& sink) {
  if (s < 1) throw InvalidInput("upsampling s must be >= 1");
  CorpusMeta meta;
  meta.objective = Objective::NTP;
  meta.s = s;
  meta.seed = seed;
  std::vector<const corpus::FactRecord*> included;
  for (const auto& f : facts) {
    if (trim(f.text).empty()) meta.excluded.push_back(f.id + ": empty text");
    else included.push_back(&f);
  }
  meta.n_facts = included.size();
  CorpusRecord record;
  record.objective = Objective::NTP;
  emit_shuffled(included.size(), s, seed, [&](std::size_t g, std::uint64_t) {
    record.fact_id = included[g]->id;
    record.target = included[g]->text;
    sink(record);
    ++meta.n_records;
  });
  return meta;
}

namespace {

CorpusMeta qa_corpus(const std::vector<std::string>* fact_order, const std::vector<qagen::QAItem>& training_items,
                     std::uint64_t s, std::uint64_t seed, const RecordSink& sink) {
  if (s < 1) throw InvalidInput("upsampling s must be >= 1");
  CorpusMeta meta;
  meta.objective = Objective::SyntheticQA;
  meta.s = s;
  meta.seed = seed;

  std::vector<std::string> order;
  std::map<std::string, std::vector<const qagen::QAItem*>> groups;
  for (const auto& item : training_items) {
    if (item.dimension != qagen::Dimension::Training) continue;
    auto [it, inserted] = groups.try_emplace(item.fact_id);
    if (inserted && !fact_order) order.push_back(item.fact_id);
    it->second.push_back(&item);
  }
  if (fact_order) {
    for (const auto& id : *fact_order) {
      if (groups.count(id)) order.push_back(id);
      else meta.excluded.push_back(id + ": no training QAs");
    }
  }
  meta.n_facts = order.size();
  CorpusRecord record;
  record.objective = Objective::SyntheticQA;
  emit_shuffled(order.size(), s, seed, [&](std::size_t g, std::uint64_t repeat) {
    const auto& qas = groups[order[g]];
    const qagen::QAItem& qa = *qas[repeat % qas.size()];
    record.fact_id = qa.fact_id;
    record.input = qa.question;
    record.input.append(kQATail);
    record.target = qa.answer;
    sink(record);
    ++meta.n_records;
  });
  return meta;
}

}  // namespace

CorpusMeta build_qa_corpus(const std::vector<qagen::QAItem>& training_items, std::uint64_t s, std::uint64_t seed,
                           const RecordSink& sink) {
  return qa_corpus(nullptr, training_items, s, seed, sink);
}

CorpusMeta build_qa_corpus(const std::vector<corpus::FactRecord>& facts, const std::vector<qagen::QAItem>& training_items,
                           std::uint64_t s, std::uint64_t seed, const RecordSink& sink) {
  std::vector<std::string> order;
  order.reserve(facts.size());
  for (const auto& f : facts) order.push_back(f.id);
  return qa_corpus(&order, training_items, s, seed, sink);
}

CorpusWriter::CorpusWriter(const std::filesystem::path& path) : path_(path), writer_(path) {}

RecordSink CorpusWriter::sink() {
  return [this](const CorpusRecord& r) { writer_.write(to_json(r)); };
}

std::filesystem::path CorpusWriter::meta_path(const std::filesystem::path& corpus_path) {
  auto p = corpus_path;
  p.replace_extension(".meta.json");
  return p;
}

void CorpusWriter::finish(const CorpusMeta& meta, const std::string& config_fingerprint) {
  writer_.flush();
  Json j = to_json(meta);
  if (!config_fingerprint.empty()) j["config_fingerprint"] = config_fingerprint;
  write_file(meta_path(path_), j.dump(2) + "\n");
}

}  // namespace wikidyk::build

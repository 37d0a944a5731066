#include "wikidyk/ragstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "wikidyk/error.hpp"

namespace wikidyk::rag {

RagIndex::RagIndex(std::vector<std::string> doc_ids, std::size_t dim, std::vector<float> vectors)
    : doc_ids_(std::move(doc_ids)), dim_(dim), vectors_(std::move(vectors)) {
  if (vectors_.size() != doc_ids_.size() * dim_) throw InvalidInput("rag index: vector blob size mismatch");
  std::set<std::string> seen;
  for (const auto& id : doc_ids_) {
    if (!seen.insert(id).second) throw InvalidInput("rag index: duplicate doc_id " + id);
  }
}

std::string truncate_utf8(std::string_view text, std::size_t budget) {
  if (text.size() <= budget) return std::string(text);
  std::size_t cut = budget;
  while (cut > 0 && (static_cast<unsigned char>(text[cut]) & 0xC0) == 0x80) --cut;
  return std::string(text.substr(0, cut));
}

namespace {

std::vector<float> normalized(const std::vector<double>& v) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (!(norm > 0.0) || !std::isfinite(norm)) throw ContractError("rag: zero or non-finite embedding");
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] / norm);
  return out;
}

}  // namespace

RagIndex build_index(const std::vector<Article>& articles, backends::EmbeddingBackend& embedder,
                     const IndexOptions& options) {
  std::vector<std::string> ids;
  std::vector<std::string> texts;
  std::set<std::string> seen;
  for (const auto& a : articles) {
    if (!seen.insert(a.doc_id).second) throw InvalidInput("rag: duplicate doc_id " + a.doc_id);
    if (trim(a.text).empty()) throw InvalidInput("rag: article " + a.doc_id + " has empty text");
    ids.push_back(a.doc_id);
    texts.push_back(truncate_utf8(a.text, options.char_budget));
  }
  if (ids.empty()) return RagIndex{};

  std::vector<std::vector<double>> embedded;
  try {
    embedded = embedder.embed(texts);
    if (embedded.size() != texts.size()) throw ContractError("rag: embedder returned wrong row count");
  } catch (const Error&) {
    // Fall back to one document at a time so a single bad document is retried alone.
    embedded.clear();
    for (std::size_t i = 0; i < texts.size(); ++i) {
      for (int attempt = 0;; ++attempt) {
        try {
          auto rows = embedder.embed({texts[i]});
          if (rows.size() != 1) throw ContractError("rag: embedder returned wrong row count");
          embedded.push_back(std::move(rows.front()));
          break;
        } catch (const Error& e) {
          if (attempt >= options.per_doc_retries) {
            throw Error("rag: embedding failed for " + ids[i] + ": " + e.what());
          }
        }
      }
    }
  }

  const std::size_t dim = embedded.front().size();
  std::vector<float> blob;
  blob.reserve(ids.size() * dim);
  for (const auto& row : embedded) {
    if (row.size() != dim) throw ContractError("rag: inconsistent embedding dimension");
    auto v = normalized(row);
    blob.insert(blob.end(), v.begin(), v.end());
  }
  RagIndex index(std::move(ids), dim, std::move(blob));
  for (const auto& a : articles) index.meta[a.doc_id] = {a.title, a.text};
  return index;
}

Retrieval retrieve_topk(const RagIndex& index, std::span<const double> query, std::size_t k) {
  if (index.empty()) throw InvalidInput("rag: retrieval on an empty index");
  if (k < 1) throw InvalidInput("rag: k must be >= 1");
  if (query.size() != index.dim()) throw InvalidInput("rag: query dimension mismatch");
  double qnorm = 0.0;
  for (double x : query) qnorm += x * x;
  qnorm = std::sqrt(qnorm);
  if (!(qnorm > 0.0)) throw InvalidInput("rag: zero query vector");

  std::vector<Hit> all;
  all.reserve(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    auto v = index.vector(i);
    double dot = 0.0;
    for (std::size_t c = 0; c < v.size(); ++c) dot += static_cast<double>(v[c]) * query[c];
    all.push_back({index.doc_ids()[i], dot / qnorm});
  }
  Retrieval out;
  out.k_clamped = k > all.size();
  const std::size_t take = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(),
                    [](const Hit& a, const Hit& b) {
                      if (a.score != b.score) return a.score > b.score;
                      return a.doc_id < b.doc_id;
                    });
  all.resize(take);
  out.hits = std::move(all);
  return out;
}

Retrieval retrieve_topk(const RagIndex& index, const std::string& query, std::size_t k,
                        backends::EmbeddingBackend& embedder) {
  if (index.empty()) throw InvalidInput("rag: retrieval on an empty index");
  auto rows = embedder.embed({query});
  return retrieve_topk(index, rows.at(0), k);
}

std::string assemble_rag_prompt(const std::string& question, const std::vector<ContextDoc>& docs,
                                std::size_t char_budget, std::string_view prompt_template) {
  if (docs.empty()) throw InvalidInput("rag: prompt needs at least one retrieved document");
  std::string out = "Context:\n";
  for (std::size_t i = 0; i < docs.size(); ++i) {
    out += "[" + std::to_string(i + 1) + "] " + docs[i].title + ": " + truncate_utf8(docs[i].text, char_budget) + "\n";
  }
  out += "\n";
  out += backends::render_prompt(prompt_template, question);
  return out;
}

namespace {

void put_f32_le(std::string& out, float f) {
  auto bits = std::bit_cast<std::uint32_t>(f);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

}  // namespace

void save_index(const std::filesystem::path& path, const RagIndex& index) {
  std::string out;
  out += Json{{"n", index.size()}, {"d", index.dim()}}.dump() + "\n";
  for (std::size_t i = 0; i < index.size(); ++i) {
    out += Json{{"doc_id", index.doc_ids()[i]}, {"vector_offset", i * index.dim() * 4}}.dump() + "\n";
  }
  out.reserve(out.size() + index.vectors().size() * 4);
  for (float f : index.vectors()) put_f32_le(out, f);
  write_file(path, out);
}

RagIndex load_index(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  std::size_t pos = 0;
  auto next_line = [&]() -> Json {
    auto nl = raw.find('\n', pos);
    if (nl == std::string::npos) throw InvalidInput(path.string() + ": truncated index header");
    Json j = Json::parse(raw.substr(pos, nl - pos));
    pos = nl + 1;
    return j;
  };
  try {
    Json header = next_line();
    const std::size_t n = header.at("n").get<std::size_t>();
    const std::size_t d = header.at("d").get<std::size_t>();
    std::vector<std::string> ids(n);
    std::vector<std::size_t> offsets(n);
    for (std::size_t i = 0; i < n; ++i) {
      Json line = next_line();
      ids[i] = line.at("doc_id").get<std::string>();
      offsets[i] = line.at("vector_offset").get<std::size_t>();
    }
    const std::size_t blob_start = pos;
    if (raw.size() - blob_start != n * d * 4) throw InvalidInput(path.string() + ": vector blob has wrong size");
    std::vector<float> vectors(n * d);
    const auto* base = reinterpret_cast<const unsigned char*>(raw.data() + blob_start);
    for (std::size_t i = 0; i < n; ++i) {
      if (offsets[i] + d * 4 > n * d * 4) throw InvalidInput(path.string() + ": vector offset out of range");
      for (std::size_t c = 0; c < d; ++c) vectors[i * d + c] = get_f32_le(base + offsets[i] + c * 4);
    }
    return RagIndex(std::move(ids), d, std::move(vectors));
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

}  // namespace wikidyk::rag

#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wikidyk/backends.hpp"

namespace wikidyk::rag {

struct Article {
  std::string doc_id;
  std::string title;
  std::string text;
};

/// Exhaustive cosine index; rows are unit-normalized f32.
class RagIndex {
 public:
  RagIndex() = default;
  RagIndex(std::vector<std::string> doc_ids, std::size_t dim, std::vector<float> vectors);

  std::size_t size() const noexcept { return doc_ids_.size(); }
  std::size_t dim() const noexcept { return dim_; }
  bool empty() const noexcept { return doc_ids_.empty(); }
  const std::vector<std::string>& doc_ids() const noexcept { return doc_ids_; }
  std::span<const float> vector(std::size_t i) const { return {vectors_.data() + i * dim_, dim_}; }
  const std::vector<float>& vectors() const noexcept { return vectors_; }

  /// doc_id -> (title, text)
  std::map<std::string, std::pair<std::string, std::string>> meta;

  friend bool operator==(const RagIndex& a, const RagIndex& b) {
    return a.doc_ids_ == b.doc_ids_ && a.dim_ == b.dim_ && a.vectors_ == b.vectors_;
  }

 private:
  std::vector<std::string> doc_ids_;
  std::size_t dim_ = 0;
  std::vector<float> vectors_;
};

struct IndexOptions {
  std::size_t char_budget = 1500;
  int per_doc_retries = 2;
};

/// Truncates to at most `budget` bytes without splitting a UTF-8 sequence.
std::string truncate_utf8(std::string_view text, std::size_t budget);

RagIndex build_index(const std::vector<Article>& articles, backends::EmbeddingBackend& embedder,
                     const IndexOptions& options = {});

struct Hit {
  std::string doc_id;
  double score = 0.0;
};

struct Retrieval {
  std::vector<Hit> hits;
  /// k exceeded the index size; all documents were returned.
  bool k_clamped = false;
};

Retrieval retrieve_topk(const RagIndex& index, std::span<const double> query, std::size_t k);
Retrieval retrieve_topk(const RagIndex& index, const std::string& query, std::size_t k,
                        backends::EmbeddingBackend& embedder);

struct ContextDoc {
  std::string title;
  std::string text;
};

/// "Context:\n[1] {title}: {text}\n...\n\n" followed by the rendered question template.
std::string assemble_rag_prompt(const std::string& question, const std::vector<ContextDoc>& docs,
                                std::size_t char_budget = 1500,
                                std::string_view prompt_template = backends::kDefaultPromptTemplate);

/// Header line {"n","d"}, n lines {"doc_id","vector_offset"}, then the
/// little-endian f32 row-major blob.
void save_index(const std::filesystem::path& path, const RagIndex& index);
RagIndex load_index(const std::filesystem::path& path);

}  // namespace wikidyk::rag

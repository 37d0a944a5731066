#pragma once

#include <array>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "wikidyk/backends.hpp"
#include "wikidyk/corpus.hpp"
#include "wikidyk/error.hpp"

namespace wikidyk::qagen {

enum class Dimension { Reliability, Generality, Paraphrase, Portability, Locality, Training };

inline constexpr std::array<Dimension, 6> kAllDimensions = {
    Dimension::Reliability, Dimension::Generality, Dimension::Paraphrase,
    Dimension::Portability, Dimension::Locality,   Dimension::Training};

std::string_view to_string(Dimension d);
Dimension dimension_from_string(std::string_view name);

struct QAItem {
  std::string fact_id;
  Dimension dimension = Dimension::Reliability;
  std::string question;
  std::string answer;
  std::map<std::string, std::string> meta;
};

Json to_json(const QAItem& item);
QAItem qa_from_json(const Json& j);
std::vector<QAItem> load_questions(const std::filesystem::path& path);
void save_questions(const std::filesystem::path& path, const std::vector<QAItem>& items);

struct EntityDescription {
  std::string entity;
  std::string description;
  std::string source_page;
};

/// Anything that maps a prompt to a raw model response.
class TextGenerator {
 public:
  virtual ~TextGenerator() = default;
  virtual std::string generate(const std::string& prompt) = 0;
};

class CompletionGenerator final : public TextGenerator {
 public:
  CompletionGenerator(std::shared_ptr<backends::CompletionBackend> backend, int max_new_tokens = 1024)
      : backend_(std::move(backend)), max_new_tokens_(max_new_tokens) {}
  std::string generate(const std::string& prompt) override {
    return backend_->complete_raw(prompt, max_new_tokens_);
  }

 private:
  std::shared_ptr<backends::CompletionBackend> backend_;
  int max_new_tokens_;
};

/// Rule-based generator that answers every prompt below with a well-formed
/// response derived only from the prompt's inputs. Deterministic.
class StubGenerator final : public TextGenerator {
 public:
  std::string generate(const std::string& prompt) override;
};

// Prompt builders.
std::string reliability_prompt(const corpus::FactRecord& fact);
std::string paraphrase_prompt(const QAItem& reliability);
std::string generality_prompt(const corpus::FactRecord& fact, const QAItem& reliability);
std::string description_prompt(std::string_view entity, std::string_view page);
std::string portability_prompt(const EntityDescription& desc, const QAItem& reliability);
std::string locality_prompt(const EntityDescription& desc);
std::string training_prompt(const corpus::FactRecord& fact);

/// Strips markdown code fences and returns the first balanced JSON object.
std::optional<Json> extract_json_object(std::string_view response);

/// Reason code if the item violates its dimension's invariant.
/// `reliability` is the fact's Reliability item when one exists.
std::optional<std::string> validate_qa(const QAItem& item, const corpus::FactRecord& fact,
                                       const QAItem* reliability);

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds backoff{100};
};

/// The generator kept answering in a shape the prompt does not declare.
class ResponseFormatError : public ContractError {
 public:
  ResponseFormatError(const std::string& what, std::string raw) : ContractError(what), raw_(std::move(raw)) {}
  const std::string& raw_response() const noexcept { return raw_; }

 private:
  std::string raw_;
};

struct Generated {
  std::vector<QAItem> items;
  /// Set when validation kept failing and the item was dropped.
  std::optional<std::string> dropped_reason;
};

/// Reliability, Paraphrase, Generality and Training. The latter three need
/// the fact's Reliability item among `seed_items`.
Generated generate_questions(const corpus::FactRecord& fact, Dimension dimension, TextGenerator& generator,
                             const std::vector<QAItem>& seed_items = {}, const RetryPolicy& policy = {});

/// First linked entity in the fact other than the bolded one.
std::optional<std::string> select_portability_entity(const corpus::FactRecord& fact);

/// nullopt is the skip signal: missing page (strict mode) or the
/// description kept leaking the entity name.
std::optional<EntityDescription> generate_entity_description(const std::string& entity, const std::string& page,
                                                             TextGenerator& generator,
                                                             const RetryPolicy& policy = {}, bool strict = true);

struct PortabilityLocality {
  std::optional<QAItem> portability;
  std::optional<QAItem> locality;
  std::optional<std::string> portability_dropped;
  std::optional<std::string> locality_dropped;
};

PortabilityLocality generate_portability_and_locality(const corpus::FactRecord& fact,
                                                      const std::optional<EntityDescription>& desc,
                                                      const QAItem& reliability, TextGenerator& generator,
                                                      const RetryPolicy& policy = {});

struct GeneratorSet {
  std::map<Dimension, std::shared_ptr<TextGenerator>> per_dimension;
  std::shared_ptr<TextGenerator> description;

  TextGenerator& for_dimension(Dimension d) const;
  static GeneratorSet uniform(std::shared_ptr<TextGenerator> generator);
};

struct QuestionRunOptions {
  std::size_t parallelism = 8;
  RetryPolicy policy;
  /// Entity page text by title, for Portability/Locality.
  std::map<std::string, std::string> pages;
  bool strict_pages = true;
  std::vector<Dimension> dimensions{kAllDimensions.begin(), kAllDimensions.end()};
};

struct QuestionRunSummary {
  std::size_t facts = 0;
  std::size_t existing = 0;
  std::map<std::string, std::size_t> generated;  // by dimension name
  std::map<std::string, std::size_t> dropped;    // by reason code
  std::size_t skipped_portability = 0;
};

/// Appends every missing (fact, dimension) item to `path`. Items already in
/// the file are kept and not regenerated.
QuestionRunSummary generate_question_file(const std::vector<corpus::FactRecord>& facts, const GeneratorSet& generators,
                                          const QuestionRunOptions& options, const std::filesystem::path& path);

/// Re-validates a question file against its facts; returns one message per violation.
std::vector<std::string> validate_question_set(const std::vector<QAItem>& items,
                                               const std::vector<corpus::FactRecord>& facts);

}  // namespace wikidyk::qagen

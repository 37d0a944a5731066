#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "wikidyk/corpus.hpp"
#include "wikidyk/qagen.hpp"

namespace wikidyk::build {

inline constexpr std::string_view kBiLMSentinel = "<extra_id_0>";
inline constexpr std::string_view kCLMMask = "[MASK]";
inline constexpr std::string_view kCLMPromptHead = "Predict the masked words in the following sentence: ";
inline constexpr std::string_view kCLMPromptTail = "\nMasked words:\n";
inline constexpr std::string_view kQATail = "\nAnswer:";

enum class Objective { NTP, SyntheticQA, SpanPrediction };
enum class SpanFlavor { BiLM, CLM };

std::string_view to_string(Objective o);
std::string_view to_string(SpanFlavor f);
Objective objective_from_string(std::string_view name);
SpanFlavor flavor_from_string(std::string_view name);

struct MaskedExample {
  std::string fact_id;
  std::size_t span_start = 0;
  std::size_t span_len = 0;
  std::string masked_input;
  std::string target;
};

/// Number of single-span candidates for a sequence of `length` tokens.
std::size_t span_candidate_count(std::size_t length, std::size_t min_len, std::size_t max_len);

/// The index-th (start, len) pair in (start, len) order, without enumerating.
std::pair<std::size_t, std::size_t> span_candidate_at(std::size_t length, std::size_t min_len, std::size_t max_len,
                                                      std::size_t index);

MaskedExample mask_span(const std::vector<std::string>& tokens, std::size_t start, std::size_t len,
                        std::string_view placeholder, std::string fact_id = {});

/// Every contiguous span with min_len <= len <= max_len, ordered by (start, len).
std::vector<MaskedExample> enumerate_span_candidates(const std::vector<std::string>& tokens, std::size_t min_len,
                                                     std::size_t max_len,
                                                     std::string_view placeholder = kBiLMSentinel);

/// Puts the target back in place of the placeholder token at span_start.
std::string splice(const MaskedExample& example);

struct CorpusRecord {
  std::string fact_id;
  Objective objective = Objective::NTP;
  std::string input;
  std::string target;
};

Json to_json(const CorpusRecord& record);

struct CorpusMeta {
  Objective objective = Objective::NTP;
  std::uint64_t s = 1;
  std::uint64_t seed = 0;
  std::size_t min_len = 1;
  std::size_t max_len = 5;
  SpanFlavor flavor = SpanFlavor::BiLM;
  std::size_t n_facts = 0;
  std::uint64_t n_records = 0;
  /// fact_id: reason, for facts left out of the corpus.
  std::vector<std::string> excluded;
};

Json to_json(const CorpusMeta& meta);

using RecordSink = std::function<void(const CorpusRecord&)>;

struct SpanOptions {
  std::uint64_t s = 1000;
  SpanFlavor flavor = SpanFlavor::BiLM;
  std::size_t min_len = 1;
  std::size_t max_len = 5;
  std::uint64_t seed = 0;
  std::string bilm_sentinel{kBiLMSentinel};
  std::string clm_mask{kCLMMask};
};

/// Records are emitted in a seeded global order over all (fact, repeat)
/// pairs; per fact, repeats cycle through a seeded shuffle of its candidates.
/// Memory is O(tokens of the fact set), independent of s.
CorpusMeta build_span_corpus(const std::vector<corpus::FactRecord>& facts, const SpanOptions& options,
                             const RecordSink& sink);

CorpusMeta build_ntp_corpus(const std::vector<corpus::FactRecord>& facts, std::uint64_t s, std::uint64_t seed,
                            const RecordSink& sink);

/// Uses the Training items of each fact, in file order.
CorpusMeta build_qa_corpus(const std::vector<qagen::QAItem>& training_items, std::uint64_t s, std::uint64_t seed,
                           const RecordSink& sink);

/// As above, in fact order; facts without Training items are excluded and listed.
CorpusMeta build_qa_corpus(const std::vector<corpus::FactRecord>& facts, const std::vector<qagen::QAItem>& training_items,
                           std::uint64_t s, std::uint64_t seed, const RecordSink& sink);

/// Streams records to corpus.jsonl and writes the sidecar next to it.
class CorpusWriter {
 public:
  explicit CorpusWriter(const std::filesystem::path& path);
  RecordSink sink();
  void finish(const CorpusMeta& meta, const std::string& config_fingerprint = {});

  static std::filesystem::path meta_path(const std::filesystem::path& corpus_path);

 private:
  std::filesystem::path path_;
  JsonlWriter writer_;
};

}  // namespace wikidyk::build

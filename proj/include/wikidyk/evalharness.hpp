#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "wikidyk/qagen.hpp"
#include "wikidyk/ragstore.hpp"
#include "wikidyk/scoperouter.hpp"

namespace wikidyk::eval {

/// True iff gold occurs verbatim (case-sensitive) in prediction.
bool match_metric(std::string_view prediction, std::string_view gold);

/// Whitespace-token F1 with multiset overlap.
double token_f1(std::string_view prediction, std::string_view gold);

struct RouteSummary {
  std::optional<int> cluster;
  std::vector<double> scores;
  double threshold = 0.0;

  static RouteSummary from(const routing::RouteDecision& d) { return {d.cluster, d.scores, d.threshold}; }
};

struct Answer {
  std::string prediction;
  std::optional<RouteSummary> route;
};

using AnswerFn = std::function<Answer(const qagen::QAItem&)>;

struct EvalRecord {
  std::size_t index = 0;
  std::string fact_id;
  qagen::Dimension dimension = qagen::Dimension::Reliability;
  std::string question;
  std::string gold;
  std::string prediction;
  bool match = false;
  double f1 = 0.0;
  std::optional<RouteSummary> route;
  std::optional<std::string> error;
};

Json to_json(const EvalRecord& record);
EvalRecord eval_record_from_json(const Json& j);
std::vector<EvalRecord> load_records(const std::filesystem::path& path);

struct DimensionAggregate {
  double match_pct = 0.0;
  double f1_pct = 0.0;
  std::size_t n = 0;
  std::size_t deferred = 0;
};

struct EvalReport {
  std::string system;
  std::map<qagen::Dimension, DimensionAggregate> dimensions;
  std::size_t n_total = 0;
  std::size_t n_errored = 0;
  std::string config_fingerprint;
  double elapsed_ms = 0.0;
};

/// Aggregates over non-errored records only.
EvalReport aggregate(const std::vector<EvalRecord>& records, std::string system = {});

struct EvalOptions {
  std::size_t parallelism = 8;
  double max_error_rate = 0.05;
  /// When set, records are appended here as they complete (in question
  /// order) and an existing file is resumed.
  std::optional<std::filesystem::path> records_path;
  std::string system;
};

struct EvalRun {
  std::vector<EvalRecord> records;
  EvalReport report;
};

class ErrorRateExceeded : public Error {
 public:
  using Error::Error;
};

EvalRun run_eval(const std::vector<qagen::QAItem>& questions, const AnswerFn& answer_fn, const EvalOptions& options);

/// Answer functions for the supported systems.
AnswerFn static_answer_fn(std::shared_ptr<backends::CompletionBackend> backend, int max_new_tokens);
/// Retrieves top_k articles, assembles the context prompt, completes it raw.
AnswerFn rag_answer_fn(std::shared_ptr<const rag::RagIndex> index, std::shared_ptr<backends::EmbeddingBackend> embedder,
                       std::shared_ptr<backends::CompletionBackend> backend, std::size_t top_k, std::size_t char_budget,
                       int max_new_tokens);
AnswerFn router_answer_fn(std::shared_ptr<const routing::EnsembleRouter> router);
AnswerFn oracle_router_answer_fn(std::shared_ptr<const routing::EnsembleRouter> router,
                                 cluster::ClusterAssignment assignment, std::set<std::string> out_of_scope = {});

/// Writes report.json and report.md into `dir`. Timing stays out of both
/// so reruns are byte-identical.
void emit_report(const EvalReport& report, const std::filesystem::path& dir);
std::string report_markdown(const std::vector<EvalReport>& reports);
Json report_json(const EvalReport& report);
/// Inverse of report_json; timing is not stored so elapsed_ms stays 0.
EvalReport report_from_json(const Json& j);

}  // namespace wikidyk::eval

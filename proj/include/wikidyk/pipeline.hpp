#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wikidyk/backends.hpp"
#include "wikidyk/routing_service.hpp"
#include "wikidyk/util.hpp"

namespace wikidyk::pipeline {

enum class Stage { Ingest, Questions, Corpus, Cluster, ScopeData, RouteServe, RagIndex, Eval, Report };

std::string_view to_string(Stage stage);
Stage stage_from_string(std::string_view name);

struct Paths {
  std::filesystem::path archive;        // jsonl of {"date","source_url","markup"}
  std::filesystem::path articles;       // optional jsonl of {"title","text"}
  std::filesystem::path entity_pages;   // optional jsonl of {"title","text"}
  std::filesystem::path facts;
  std::filesystem::path negative_facts;      // optional; facts in the negative window
  std::filesystem::path questions;
  std::filesystem::path negative_questions;  // optional; questions over negative facts
  std::filesystem::path corpus;
  std::filesystem::path clusters;
  std::filesystem::path scope;
  std::filesystem::path index;
  std::filesystem::path reports;
};

struct PipelineConfig {
  /// The config as written, before ${VAR} interpolation (seed overrides applied).
  Json raw;
  /// md5 of the canonical (key-sorted, compact) dump of `raw`.
  std::string fingerprint;
  std::uint64_t seed = 0;
  Paths paths;
  std::map<std::string, backends::BackendSpec> backends;

  // ingest
  std::optional<std::pair<std::string, std::string>> window;
  std::pair<std::string, std::string> negative_window{"2004-01-01", "2009-12-31"};

  // questions
  std::string generator = "stub";
  std::map<std::string, std::string> generator_overrides;  // dimension -> backend name or "stub"
  std::string description_generator;
  std::size_t question_parallelism = 8;
  int max_attempts = 3;
  bool strict_pages = true;
  std::vector<std::string> dimensions;

  // clustering
  std::string cluster_kind = "semantic";
  std::size_t k = 3;
  std::uint64_t cluster_seed = 0;
  std::string cluster_embedding;
  std::size_t max_iter = 200;
  double tol = 1e-6;

  // scope data
  double val_fraction = 0.1;
  std::uint64_t scope_seed = 0;

  // router
  std::string scorer = "oracle";
  double threshold = 0.5;
  std::vector<std::string> cluster_backends;
  std::string base_backend;
  std::string router_embedding;
  std::string classifier;
  std::string host = "127.0.0.1";
  int port = 8080;
  bool defer_on_error = false;
  double temperature = 1.0;
  double gate_percentile = 1.0;

  // corpus
  std::string objective = "span";
  std::uint64_t s = 1000;
  std::size_t min_len = 1;
  std::size_t max_len = 5;
  std::string flavor = "bilm";
  std::uint64_t corpus_seed = 0;
  std::string sentinel = "<extra_id_0>";
  std::string mask = "[MASK]";

  // rag
  std::string rag_embedding;
  std::size_t top_k = 3;
  std::size_t char_budget = 1500;

  // eval
  std::string system = "static";
  std::size_t eval_parallelism = 8;
  int max_new_tokens = 32;
  std::string eval_backend;
  double max_error_rate = 0.05;

  const backends::BackendSpec& backend(const std::string& name) const;
};

/// Replaces ${NAME} with the environment value; unset variables throw InvalidInput.
std::string interpolate_env(std::string_view text);

/// Relative paths resolve against `base_dir`.
PipelineConfig parse_config(const Json& raw, const std::filesystem::path& base_dir,
                            std::optional<std::uint64_t> seed_override = std::nullopt);
PipelineConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = std::nullopt);

struct StageOptions {
  std::optional<std::filesystem::path> questions;
  std::optional<std::string> system;
  std::optional<double> threshold;
  std::optional<std::string> scorer;
  std::optional<std::filesystem::path> clusters;
  bool resume = false;
};

/// Runs one stage and returns its one-line summary. route-serve is not a
/// batch stage; use make_routing_service for it.
Json run_stage(const PipelineConfig& config, Stage stage, const StageOptions& options = {});

std::shared_ptr<const routing::EnsembleRouter> make_router(const PipelineConfig& config, const StageOptions& options = {});
std::unique_ptr<routing::RoutingService> make_routing_service(const PipelineConfig& config,
                                                              const StageOptions& options = {});

/// 2 missing input, 3 validation failure, 1 anything else.
int exit_code_for(const std::exception& e) noexcept;

}  // namespace wikidyk::pipeline

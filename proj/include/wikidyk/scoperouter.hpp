#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "wikidyk/backends.hpp"
#include "wikidyk/clusterer.hpp"
#include "wikidyk/qagen.hpp"

namespace wikidyk::routing {

struct ScopeExample {
  std::string text;
  std::vector<int> labels;
  std::string split;  // "train" | "val"
};

Json to_json(const ScopeExample& example);
ScopeExample scope_example_from_json(const Json& j);
void save_scope(const std::filesystem::path& path, const std::vector<ScopeExample>& examples);
std::vector<ScopeExample> load_scope(const std::filesystem::path& path);

struct ScopeDatasetOptions {
  std::uint64_t seed = 0;
  double val_fraction = 0.1;
};

/// One-hot rows for positives, all-zero rows for negatives, seeded shuffle,
/// validation split stratified by label pattern.
std::vector<ScopeExample> build_scope_dataset(const cluster::ClusterAssignment& assignment,
                                              const std::vector<qagen::QAItem>& positives,
                                              const std::vector<qagen::QAItem>& negatives,
                                              const ScopeDatasetOptions& options = {});

struct RouteDecision {
  std::string query;
  std::vector<double> scores;
  std::optional<int> cluster;  // nullopt = defer to the base model
  double threshold = 0.5;

  bool deferred() const noexcept { return !cluster.has_value(); }
};

/// Cluster(argmax) iff max score >= threshold; ties go to the lowest index.
RouteDecision decide(std::string query, std::vector<double> scores, double threshold);

class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual std::vector<double> score(const std::string& query) const = 0;
  virtual std::size_t k() const = 0;
  virtual std::string_view name() const = 0;
};

/// Per-cluster sigmoid scores from a classifier endpoint.
class RemoteClassifierScorer final : public Scorer {
 public:
  RemoteClassifierScorer(std::shared_ptr<backends::ClassifierBackend> classifier, std::size_t k);
  std::vector<double> score(const std::string& query) const override;
  std::size_t k() const override { return k_; }
  std::string_view name() const override { return "remote"; }

 private:
  std::shared_ptr<backends::ClassifierBackend> classifier_;
  std::size_t k_;
};

/// Mixture posteriors of the embedded query, zeroed when the query's
/// log-density falls below the gate.
class GmmPosteriorScorer final : public Scorer {
 public:
  GmmPosteriorScorer(std::shared_ptr<backends::EmbeddingBackend> embedder, cluster::GmmParams params,
                     double log_density_gate);
  /// Gate = 1st percentile of the training facts' log-densities.
  static double percentile_gate(const cluster::Matrix& training_embeddings, const cluster::GmmParams& params,
                                double percentile = 1.0);

  std::vector<double> score(const std::string& query) const override;
  std::vector<double> score_vector(std::span<const double> embedding) const;
  std::size_t k() const override { return params_.k(); }
  std::string_view name() const override { return "gmm"; }
  double gate() const noexcept { return gate_; }

 private:
  std::shared_ptr<backends::EmbeddingBackend> embedder_;
  cluster::GmmParams params_;
  double gate_;
};

/// Softmax over negative Euclidean distances to cluster centroids.
class NearestCentroidScorer final : public Scorer {
 public:
  NearestCentroidScorer(std::shared_ptr<backends::EmbeddingBackend> embedder, cluster::Matrix centroids,
                        double temperature = 1.0);
  /// Mean embedding of each cluster's facts.
  static cluster::Matrix centroids_from(const cluster::Matrix& embeddings, const std::vector<std::string>& fact_ids,
                                        const cluster::ClusterAssignment& assignment);

  std::vector<double> score(const std::string& query) const override;
  std::vector<double> score_vector(std::span<const double> embedding) const;
  std::size_t k() const override { return centroids_.rows(); }
  std::string_view name() const override { return "centroid"; }

 private:
  std::shared_ptr<backends::EmbeddingBackend> embedder_;
  cluster::Matrix centroids_;
  double temperature_;
};

RouteDecision route(const std::string& query, const Scorer& scorer, double threshold);

/// Ground-truth routing: Locality items and designated out-of-scope facts
/// defer, everything else goes to its fact's cluster.
RouteDecision route_with_oracle(const qagen::QAItem& item, const cluster::ClusterAssignment& assignment,
                                const std::set<std::string>& out_of_scope_fact_ids = {});

struct RoutedAnswer {
  std::string answer;
  RouteDecision decision;
};

/// Cluster backends plus the base model used on deferral.
class EnsembleRouter {
 public:
  struct Options {
    double threshold = 0.5;
    bool defer_on_error = false;
    int max_new_tokens = 32;
  };

  EnsembleRouter(std::shared_ptr<const Scorer> scorer,
                 std::vector<std::shared_ptr<backends::CompletionBackend>> cluster_backends,
                 std::shared_ptr<backends::CompletionBackend> base, Options options);

  RouteDecision decide(const std::string& question) const;
  /// Answers with the backend the decision names.
  RoutedAnswer answer(const std::string& question) const;
  RoutedAnswer answer_with(const std::string& question, RouteDecision decision) const;

  std::size_t k() const noexcept { return clusters_.size(); }
  std::string_view scorer_name() const;
  const Options& options() const noexcept { return options_; }

 private:
  std::shared_ptr<const Scorer> scorer_;
  std::vector<std::shared_ptr<backends::CompletionBackend>> clusters_;
  std::shared_ptr<backends::CompletionBackend> base_;
  Options options_;
};

}  // namespace wikidyk::routing

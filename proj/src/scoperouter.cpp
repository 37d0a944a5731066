#include "wikidyk/scoperouter.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "wikidyk/error.hpp"
#include "wikidyk/rng.hpp"

namespace wikidyk::routing {

Json to_json(const ScopeExample& example) {
  Json j;
  j["text"] = example.text;
  j["labels"] = example.labels;
  j["split"] = example.split;
  return j;
}

ScopeExample scope_example_from_json(const Json& j) {
  ScopeExample e;
  try {
    e.text = j.at("text").get<std::string>();
    e.labels = j.at("labels").get<std::vector<int>>();
    e.split = j.at("split").get<std::string>();
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidInput(std::string("malformed scope example: ") + ex.what());
  }
  int ones = 0;
  for (int l : e.labels) {
    if (l != 0 && l != 1) throw InvalidInput("scope example label outside {0,1}");
    ones += l;
  }
  if (ones > 1) throw InvalidInput("scope example has more than one positive label");
  if (e.split != "train" && e.split != "val") throw InvalidInput("scope example split must be train or val");
  return e;
}

void save_scope(const std::filesystem::path& path, const std::vector<ScopeExample>& examples) {
  JsonlWriter out(path);
  for (const auto& e : examples) out.write(to_json(e));
}

std::vector<ScopeExample> load_scope(const std::filesystem::path& path) {
  std::vector<ScopeExample> out;
  read_jsonl(path, [&](const Json& j, std::size_t) { out.push_back(scope_example_from_json(j)); });
  return out;
}

std::vector<ScopeExample> build_scope_dataset(const cluster::ClusterAssignment& assignment,
                                              const std::vector<qagen::QAItem>& positives,
                                              const std::vector<qagen::QAItem>& negatives,
                                              const ScopeDatasetOptions& options) {
  if (options.val_fraction < 0.0 || options.val_fraction >= 1.0) {
    throw InvalidInput("scope: val_fraction must be in [0, 1)");
  }
  const std::size_t k = assignment.k;
  std::vector<ScopeExample> rows;
  rows.reserve(positives.size() + negatives.size());
  std::set<std::string> positive_facts;
  for (const auto& q : positives) {
    auto c = assignment.cluster_of(q.fact_id);
    if (!c) throw InvalidInput("scope: positive question has unassigned fact_id " + q.fact_id);
    std::vector<int> labels(k, 0);
    labels[static_cast<std::size_t>(*c)] = 1;
    rows.push_back({q.question, std::move(labels), "train"});
    positive_facts.insert(q.fact_id);
  }
  for (const auto& q : negatives) {
    if (positive_facts.count(q.fact_id) || assignment.cluster_of(q.fact_id)) {
      throw InvalidInput("scope: negative question shares fact_id with positives: " + q.fact_id);
    }
    rows.push_back({q.question, std::vector<int>(k, 0), "train"});
  }

  Rng rng(options.seed);
  rng.shuffle(rows);

  std::map<std::vector<int>, std::vector<std::size_t>> by_pattern;
  for (std::size_t i = 0; i < rows.size(); ++i) by_pattern[rows[i].labels].push_back(i);
  for (const auto& [pattern, idx] : by_pattern) {
    const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(idx.size()) * options.val_fraction));
    for (std::size_t i = 0; i < n_val; ++i) rows[idx[i]].split = "val";
  }
  return rows;
}

RouteDecision decide(std::string query, std::vector<double> scores, double threshold) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw InvalidInput("threshold must be in [0, 1]");
  RouteDecision d;
  d.query = std::move(query);
  d.threshold = threshold;
  d.scores = std::move(scores);
  if (d.scores.empty()) return d;
  std::size_t best = 0;
  for (std::size_t j = 1; j < d.scores.size(); ++j) {
    if (d.scores[j] > d.scores[best]) best = j;
  }
  if (d.scores[best] >= threshold) d.cluster = static_cast<int>(best);
  return d;
}

namespace {

void check_scores(std::vector<double>& scores, std::size_t k, std::string_view who) {
  if (scores.size() != k) {
    throw ContractError(std::string(who) + ": expected " + std::to_string(k) + " scores, got " +
                        std::to_string(scores.size()));
  }
  for (double& s : scores) {
    if (!std::isfinite(s) || s < 0.0 || s > 1.0) {
      throw ContractError(std::string(who) + ": score outside [0,1]");
    }
  }
}

std::vector<double> embed_query(backends::EmbeddingBackend& embedder, const std::string& query) {
  auto rows = embedder.embed({query});
  if (rows.size() != 1) throw ContractError("embedding backend returned wrong row count");
  return std::move(rows.front());
}

}  // namespace

RemoteClassifierScorer::RemoteClassifierScorer(std::shared_ptr<backends::ClassifierBackend> classifier, std::size_t k)
    : classifier_(std::move(classifier)), k_(k) {
  if (!classifier_) throw InvalidInput("remote scorer needs a classifier backend");
  if (k_ == 0) throw InvalidInput("remote scorer needs k >= 1");
}

std::vector<double> RemoteClassifierScorer::score(const std::string& query) const {
  auto rows = classifier_->classify({query});
  if (rows.size() != 1) throw ContractError("classifier returned wrong row count");
  check_scores(rows.front(), k_, "remote scorer");
  return std::move(rows.front());
}

GmmPosteriorScorer::GmmPosteriorScorer(std::shared_ptr<backends::EmbeddingBackend> embedder,
                                       cluster::GmmParams params, double log_density_gate)
    : embedder_(std::move(embedder)), params_(std::move(params)), gate_(log_density_gate) {
  params_.validate();
}

double GmmPosteriorScorer::percentile_gate(const cluster::Matrix& training_embeddings,
                                           const cluster::GmmParams& params, double percentile) {
  auto densities = cluster::mixture_log_density(training_embeddings, params);
  if (densities.empty()) throw InvalidInput("gmm scorer: no training embeddings for the gate");
  std::sort(densities.begin(), densities.end());
  // Nearest-rank percentile.
  const double rank = std::ceil(percentile / 100.0 * static_cast<double>(densities.size()));
  const std::size_t idx = rank < 1.0 ? 0 : static_cast<std::size_t>(rank) - 1;
  return densities[std::min(idx, densities.size() - 1)];
}

std::vector<double> GmmPosteriorScorer::score_vector(std::span<const double> embedding) const {
  auto lj = cluster::component_log_joint(embedding, params_);
  const double m = *std::max_element(lj.begin(), lj.end());
  double s = 0.0;
  for (double x : lj) s += std::exp(x - m);
  const double log_density = m + std::log(s);
  std::vector<double> scores(lj.size(), 0.0);
  if (!(log_density >= gate_)) return scores;
  for (std::size_t j = 0; j < lj.size(); ++j) scores[j] = std::exp(lj[j] - log_density);
  return scores;
}

std::vector<double> GmmPosteriorScorer::score(const std::string& query) const {
  auto scores = score_vector(embed_query(*embedder_, query));
  check_scores(scores, k(), "gmm scorer");
  return scores;
}

NearestCentroidScorer::NearestCentroidScorer(std::shared_ptr<backends::EmbeddingBackend> embedder,
                                             cluster::Matrix centroids, double temperature)
    : embedder_(std::move(embedder)), centroids_(std::move(centroids)), temperature_(temperature) {
  if (centroids_.rows() == 0) throw InvalidInput("centroid scorer needs at least one centroid");
  if (!(temperature_ > 0.0)) throw InvalidInput("centroid scorer temperature must be > 0");
}

cluster::Matrix NearestCentroidScorer::centroids_from(const cluster::Matrix& embeddings,
                                                      const std::vector<std::string>& fact_ids,
                                                      const cluster::ClusterAssignment& assignment) {
  if (fact_ids.size() != embeddings.rows()) throw InvalidInput("centroids: one fact id per row required");
  cluster::Matrix sums(assignment.k, embeddings.cols());
  std::vector<std::size_t> counts(assignment.k, 0);
  for (std::size_t i = 0; i < fact_ids.size(); ++i) {
    auto c = assignment.cluster_of(fact_ids[i]);
    if (!c) continue;
    auto row = sums.row(static_cast<std::size_t>(*c));
    auto x = embeddings.row(i);
    for (std::size_t d = 0; d < row.size(); ++d) row[d] += x[d];
    ++counts[static_cast<std::size_t>(*c)];
  }
  for (std::size_t j = 0; j < assignment.k; ++j) {
    if (counts[j] == 0) throw InvalidInput("centroids: cluster " + std::to_string(j) + " has no embedded facts");
    for (double& v : sums.row(j)) v /= static_cast<double>(counts[j]);
  }
  return sums;
}

std::vector<double> NearestCentroidScorer::score_vector(std::span<const double> embedding) const {
  if (embedding.size() != centroids_.cols()) throw InvalidInput("centroid scorer: dimension mismatch");
  std::vector<double> logits(centroids_.rows());
  for (std::size_t j = 0; j < centroids_.rows(); ++j) {
    auto c = centroids_.row(j);
    double d2 = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) d2 += (embedding[i] - c[i]) * (embedding[i] - c[i]);
    logits[j] = -std::sqrt(d2) / temperature_;
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double s = 0.0;
  for (double& l : logits) {
    l = std::exp(l - m);
    s += l;
  }
  for (double& l : logits) l /= s;
  return logits;
}

std::vector<double> NearestCentroidScorer::score(const std::string& query) const {
  auto scores = score_vector(embed_query(*embedder_, query));
  check_scores(scores, k(), "centroid scorer");
  return scores;
}

RouteDecision route(const std::string& query, const Scorer& scorer, double threshold) {
  return decide(query, scorer.score(query), threshold);
}

RouteDecision route_with_oracle(const qagen::QAItem& item, const cluster::ClusterAssignment& assignment,
                                const std::set<std::string>& out_of_scope_fact_ids) {
  RouteDecision d;
  d.query = item.question;
  d.threshold = 1.0;
  d.scores.assign(assignment.k, 0.0);
  if (item.dimension == qagen::Dimension::Locality) return d;
  if (auto c = assignment.cluster_of(item.fact_id)) {
    d.scores[static_cast<std::size_t>(*c)] = 1.0;
    d.cluster = *c;
    return d;
  }
  if (out_of_scope_fact_ids.count(item.fact_id)) return d;
  throw InvalidInput("oracle routing: fact " + item.fact_id + " is neither assigned nor out of scope");
}

EnsembleRouter::EnsembleRouter(std::shared_ptr<const Scorer> scorer,
                               std::vector<std::shared_ptr<backends::CompletionBackend>> cluster_backends,
                               std::shared_ptr<backends::CompletionBackend> base, Options options)
    : scorer_(std::move(scorer)), clusters_(std::move(cluster_backends)), base_(std::move(base)), options_(options) {
  if (!base_) throw InvalidInput("router needs a base backend");
  if (clusters_.empty()) throw InvalidInput("router needs at least one cluster backend");
  for (const auto& c : clusters_) {
    if (!c) throw InvalidInput("router: null cluster backend");
  }
  if (scorer_ && scorer_->k() != clusters_.size()) {
    throw InvalidInput("router: scorer width " + std::to_string(scorer_->k()) + " != cluster count " +
                       std::to_string(clusters_.size()));
  }
  if (!(options_.threshold >= 0.0 && options_.threshold <= 1.0)) throw InvalidInput("threshold must be in [0, 1]");
}

std::string_view EnsembleRouter::scorer_name() const { return scorer_ ? scorer_->name() : "oracle"; }

RouteDecision EnsembleRouter::decide(const std::string& question) const {
  if (!scorer_) throw InvalidInput("router has no scorer; use answer_with and an explicit decision");
  try {
    return route(question, *scorer_, options_.threshold);
  } catch (const Error&) {
    if (!options_.defer_on_error) throw;
    RouteDecision d;
    d.query = question;
    d.threshold = options_.threshold;
    d.scores.assign(clusters_.size(), 0.0);
    return d;
  }
}

RoutedAnswer EnsembleRouter::answer_with(const std::string& question, RouteDecision decision) const {
  if (decision.cluster && static_cast<std::size_t>(*decision.cluster) >= clusters_.size()) {
    throw InvalidInput("router: cluster index out of range");
  }
  auto& backend = decision.cluster ? *clusters_[static_cast<std::size_t>(*decision.cluster)] : *base_;
  return {backend.complete(question, options_.max_new_tokens), std::move(decision)};
}

RoutedAnswer EnsembleRouter::answer(const std::string& question) const {
  return answer_with(question, decide(question));
}

}  // namespace wikidyk::routing

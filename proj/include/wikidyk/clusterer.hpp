#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wikidyk/corpus.hpp"

namespace wikidyk::cluster {

/// Dense row-major matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  static Matrix from_rows(const std::vector<std::vector<double>>& rows);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  const std::vector<double>& data() const noexcept { return data_; }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Diagonal-covariance Gaussian mixture.
struct GmmParams {
  std::vector<double> weights;
  Matrix means;      // k x d
  Matrix variances;  // k x d
  double var_floor = 0.0;

  std::size_t k() const noexcept { return weights.size(); }
  std::size_t dim() const noexcept { return means.cols(); }
  /// Throws InvalidInput unless every invariant holds.
  void validate() const;

  friend bool operator==(const GmmParams&, const GmmParams&) = default;
};

struct GmmFitOptions {
  std::size_t k = 3;
  std::uint64_t seed = 0;
  std::size_t max_iter = 200;
  double tol = 1e-6;
  std::size_t workers = 1;
};

struct GmmFit {
  GmmParams params;
  /// Total log-likelihood after each E-step.
  std::vector<double> loglik_trace;
  std::size_t iterations = 0;
  std::size_t reseeds = 0;
  bool converged = false;
};

/// EM from k-means++ seeding. Stops when the per-point mean log-likelihood
/// improves by less than tol, or after max_iter iterations.
GmmFit fit_gmm(const Matrix& embeddings, const GmmFitOptions& options);

/// Per-component log(w_j N(x | mu_j, var_j)) for one point.
std::vector<double> component_log_joint(std::span<const double> x, const GmmParams& params);

/// log p(x) under the mixture, per row.
std::vector<double> mixture_log_density(const Matrix& embeddings, const GmmParams& params);

enum class PartitionKind { Semantic, Temporal };
std::string_view to_string(PartitionKind kind);

struct ClusterAssignment {
  PartitionKind kind = PartitionKind::Semantic;
  std::size_t k = 0;
  std::map<std::string, int> map;

  std::optional<int> cluster_of(const std::string& fact_id) const;
  std::vector<std::size_t> sizes() const;
};

struct GmmAssignment {
  ClusterAssignment assignment;
  Matrix posteriors;  // n x k, rows sum to 1
};

/// Argmax posterior, lowest index on ties.
GmmAssignment gmm_assign(const Matrix& embeddings, const std::vector<std::string>& fact_ids, const GmmParams& params);

/// Chronological blocks over (date, id); the first n mod k blocks get one extra fact.
ClusterAssignment temporal_partition(const std::vector<corpus::FactRecord>& facts, std::size_t k);

struct ClusterFile {
  ClusterAssignment assignment;
  std::uint64_t seed = 0;
  std::optional<GmmParams> gmm;
  std::vector<double> loglik_trace;
  std::string config_fingerprint;
};

Json to_json(const ClusterFile& file);
ClusterFile cluster_file_from_json(const Json& j);
void save_clusters(const std::filesystem::path& path, const ClusterFile& file);
ClusterFile load_clusters(const std::filesystem::path& path);

}  // namespace wikidyk::cluster

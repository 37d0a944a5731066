#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numbers>

#include "wikidyk/clusterer.hpp"
#include "wikidyk/error.hpp"
#include "wikidyk/rng.hpp"

using namespace wikidyk;
using namespace wikidyk::cluster;

namespace {

struct Sample {
  Matrix x;
  std::vector<int> label;
};

Sample blobs(const std::vector<std::vector<double>>& centers, std::size_t per, double sd, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> rows;
  Sample s;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    for (std::size_t i = 0; i < per; ++i) {
      std::vector<double> r;
      for (double m : centers[c]) r.push_back(m + sd * rng.normal());
      rows.push_back(r);
      s.label.push_back(static_cast<int>(c));
    }
  }
  s.x = Matrix::from_rows(rows);
  return s;
}

// Direct evaluation of log(w_j N(x | mu_j, diag var_j)).
double log_joint_oracle(std::span<const double> x, const GmmParams& p, std::size_t j) {
  double s = std::log(p.weights[j]);
  for (std::size_t c = 0; c < x.size(); ++c) {
    const double v = p.variances(j, c);
    const double diff = x[c] - p.means(j, c);
    s += -0.5 * std::log(2.0 * std::numbers::pi * v) - diff * diff / (2.0 * v);
  }
  return s;
}

corpus::FactRecord dated(int day, const std::string& text) {
  corpus::FactRecord f;
  f.date = corpus::Date::from_string("2024-01-" + std::string(day < 10 ? "0" : "") + std::to_string(day));
  f.text = text;
  f.bold_entity = text;
  f.id = corpus::fact_id(f.date, text);
  return f;
}

}  // namespace

TEST_CASE("k=1 equals the closed-form mean and biased variance") {
  auto s = blobs({{1.0, -2.0, 0.5}}, 200, 0.7, 3);
  auto fit = fit_gmm(s.x, {1, 0, 200, 1e-6, 1});
  const std::size_t n = s.x.rows(), d = s.x.cols();
  REQUIRE(fit.params.k() == 1);
  CHECK(fit.params.weights[0] == 1.0);
  for (std::size_t c = 0; c < d; ++c) {
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += s.x(i, c);
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (s.x(i, c) - mean) * (s.x(i, c) - mean);
    var /= static_cast<double>(n);
    CHECK(fit.params.means(0, c) == mean);
    CHECK(fit.params.variances(0, c) == std::max(var, fit.params.var_floor));
  }
}

TEST_CASE("two separated Gaussians are recovered") {
  auto s = blobs({{0.0, 0.0}, {10.0, 10.0}}, 150, 1.0, 9);
  auto fit = fit_gmm(s.x, {2, 1, 200, 1e-8, 1});
  std::vector<double> m0(2, 0), m1(2, 0);
  for (std::size_t i = 0; i < s.x.rows(); ++i) {
    auto& m = s.label[i] == 0 ? m0 : m1;
    for (int c = 0; c < 2; ++c) m[c] += s.x(i, c) / 150.0;
  }
  const bool first_is_zero = fit.params.means(0, 0) < 5.0;
  const auto& a = first_is_zero ? m0 : m1;
  const auto& b = first_is_zero ? m1 : m0;
  for (int c = 0; c < 2; ++c) {
    CHECK(std::abs(fit.params.means(0, c) - a[c]) < 0.1);
    CHECK(std::abs(fit.params.means(1, c) - b[c]) < 0.1);
  }
  CHECK(fit.params.weights[0] == doctest::Approx(0.5).epsilon(0.01));
  CHECK(fit.converged);
}

TEST_CASE("log-likelihood trace never decreases") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto s = blobs({{0, 0, 0}, {4, 0, 1}, {0, 5, -3}}, 60, 1.2, 100 + seed);
    auto fit = fit_gmm(s.x, {3, seed, 200, 1e-10, 2});
    for (std::size_t i = 1; i < fit.loglik_trace.size(); ++i) {
      CHECK(fit.loglik_trace[i] >= fit.loglik_trace[i - 1] - 1e-9);
    }
  }
}

TEST_CASE("fits are deterministic and independent of the worker count") {
  auto s = blobs({{0, 0}, {6, 6}, {-6, 6}}, 40, 1.0, 4);
  auto a = fit_gmm(s.x, {3, 77, 200, 1e-6, 1});
  auto b = fit_gmm(s.x, {3, 77, 200, 1e-6, 4});
  CHECK(a.params == b.params);
  CHECK(a.loglik_trace == b.loglik_trace);
}

TEST_CASE("identical points hit the variance floor without blowing up") {
  Matrix x(20, 3, 2.5);
  auto fit = fit_gmm(x, {2, 0, 50, 1e-6, 1});
  CHECK_NOTHROW(fit.params.validate());
  for (double v : fit.loglik_trace) CHECK(std::isfinite(v));
  for (std::size_t j = 0; j < 2; ++j) {
    for (std::size_t c = 0; c < 3; ++c) CHECK(fit.params.variances(j, c) >= fit.params.var_floor);
  }
}

TEST_CASE("bad inputs") {
  Matrix x(3, 2, 1.0);
  CHECK_THROWS_AS(fit_gmm(x, {4, 0, 10, 1e-6, 1}), InvalidInput);
  CHECK_THROWS_AS(fit_gmm(x, {0, 0, 10, 1e-6, 1}), InvalidInput);
  x(1, 1) = std::nan("");
  CHECK_THROWS_AS(fit_gmm(x, {1, 0, 10, 1e-6, 1}), InvalidInput);
}

TEST_CASE("assignment equals a brute-force argmax of the posterior") {
  auto s = blobs({{0, 0}, {3, 0}, {0, 3}}, 50, 1.5, 21);
  auto fit = fit_gmm(s.x, {3, 5, 200, 1e-6, 1});
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < s.x.rows(); ++i) ids.push_back("f" + std::to_string(i));
  auto assigned = gmm_assign(s.x, ids, fit.params);
  for (std::size_t i = 0; i < s.x.rows(); ++i) {
    int best = 0;
    double best_v = -INFINITY;
    for (std::size_t j = 0; j < 3; ++j) {
      const double v = log_joint_oracle(s.x.row(i), fit.params, j);
      if (v > best_v) {
        best_v = v;
        best = static_cast<int>(j);
      }
    }
    CHECK(assigned.assignment.map.at(ids[i]) == best);
    double row_sum = 0;
    for (std::size_t j = 0; j < 3; ++j) row_sum += assigned.posteriors(i, j);
    CHECK(row_sum == doctest::Approx(1.0));
  }
  auto lj = component_log_joint(s.x.row(0), fit.params);
  for (std::size_t j = 0; j < 3; ++j) CHECK(lj[j] == doctest::Approx(log_joint_oracle(s.x.row(0), fit.params, j)));
}

TEST_CASE("ties go to the lowest component index") {
  GmmParams p;
  p.weights = {0.5, 0.5};
  p.means = Matrix::from_rows({{0.0}, {0.0}});
  p.variances = Matrix::from_rows({{1.0}, {1.0}});
  p.var_floor = 1e-6;
  auto a = gmm_assign(Matrix::from_rows({{0.3}}), {"x"}, p);
  CHECK(a.assignment.map.at("x") == 0);
}

TEST_CASE("temporal partition sizes and order") {
  std::vector<corpus::FactRecord> facts;
  for (int d = 10; d >= 1; --d) facts.push_back(dated(d, "fact" + std::to_string(d)));
  auto a = temporal_partition(facts, 3);
  CHECK(a.kind == PartitionKind::Temporal);
  CHECK(a.sizes() == std::vector<std::size_t>{4, 3, 3});
  CHECK(a.map.at(dated(1, "fact1").id) == 0);
  CHECK(a.map.at(dated(4, "fact4").id) == 0);
  CHECK(a.map.at(dated(5, "fact5").id) == 1);
  CHECK(a.map.at(dated(10, "fact10").id) == 2);

  facts.pop_back();
  CHECK(temporal_partition(facts, 3).sizes() == std::vector<std::size_t>{3, 3, 3});
  auto one = temporal_partition(facts, 1);
  CHECK(one.sizes() == std::vector<std::size_t>{9});
  CHECK_THROWS_AS(temporal_partition(facts, 10), InvalidInput);
}

TEST_CASE("cluster file round trip") {
  auto s = blobs({{0, 0}, {5, 5}}, 10, 0.5, 1);
  auto fit = fit_gmm(s.x, {2, 3, 100, 1e-6, 1});
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < s.x.rows(); ++i) ids.push_back("id" + std::to_string(i));
  ClusterFile file;
  file.assignment = gmm_assign(s.x, ids, fit.params).assignment;
  file.seed = 3;
  file.gmm = fit.params;
  file.loglik_trace = fit.loglik_trace;
  file.config_fingerprint = "fp";
  const auto path = std::filesystem::temp_directory_path() / "wikidyk_clusters_rt.json";
  save_clusters(path, file);
  auto j = Json::parse(read_file(path));
  for (const char* key : {"kind", "k", "seed", "assignments", "gmm", "loglik_trace"}) CHECK_MESSAGE(j.contains(key), key);
  auto back = load_clusters(path);
  CHECK(back.assignment.map == file.assignment.map);
  REQUIRE(back.gmm);
  CHECK(*back.gmm == *file.gmm);
  CHECK(back.loglik_trace == file.loglik_trace);
  const auto first = read_file(path);
  save_clusters(path, back);
  CHECK(read_file(path) == first);

  ClusterFile temporal;
  temporal.assignment.kind = PartitionKind::Temporal;
  temporal.assignment.k = 1;
  temporal.assignment.map = {{"a", 0}};
  save_clusters(path, temporal);
  CHECK(Json::parse(read_file(path))["gmm"].is_null());
  CHECK_FALSE(load_clusters(path).gmm);
  std::filesystem::remove(path);
}

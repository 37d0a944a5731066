#include "wikidyk/clusterer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "wikidyk/error.hpp"
#include "wikidyk/parallel.hpp"
#include "wikidyk/rng.hpp"

namespace wikidyk::cluster {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;  // log(2*pi)
constexpr double kCollapsedMass = 1e-8;
constexpr double kRelativeVarFloor = 1e-6;

double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}
}  // namespace

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) return {};
  Matrix m(rows.size(), rows.front().size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != m.cols()) throw InvalidInput("ragged matrix rows");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return m;
}

void GmmParams::validate() const {
  const std::size_t k = weights.size();
  if (k == 0) throw InvalidInput("gmm: no components");
  if (means.rows() != k || variances.rows() != k || means.cols() != variances.cols() || means.cols() == 0) {
    throw InvalidInput("gmm: parameter shapes disagree");
  }
  if (!(var_floor > 0.0) || !std::isfinite(var_floor)) throw InvalidInput("gmm: var_floor must be positive");
  double total = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0.0) throw InvalidInput("gmm: invalid weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InvalidInput("gmm: weights do not sum to 1");
  for (double m : means.data()) {
    if (!std::isfinite(m)) throw InvalidInput("gmm: non-finite mean");
  }
  for (double v : variances.data()) {
    if (!std::isfinite(v) || v < var_floor) throw InvalidInput("gmm: variance below floor");
  }
}

std::vector<double> component_log_joint(std::span<const double> x, const GmmParams& params) {
  const std::size_t k = params.k();
  const std::size_t d = params.dim();
  if (x.size() != d) throw InvalidInput("gmm: dimension mismatch");
  std::vector<double> out(k);
  for (std::size_t j = 0; j < k; ++j) {
    auto mu = params.means.row(j);
    auto var = params.variances.row(j);
    double acc = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = x[c] - mu[c];
      acc += kLog2Pi + std::log(var[c]) + diff * diff / var[c];
    }
    out[j] = std::log(params.weights[j]) - 0.5 * acc;
  }
  return out;
}

std::vector<double> mixture_log_density(const Matrix& embeddings, const GmmParams& params) {
  std::vector<double> out(embeddings.rows());
  for (std::size_t i = 0; i < embeddings.rows(); ++i) {
    out[i] = log_sum_exp(component_log_joint(embeddings.row(i), params));
  }
  return out;
}

namespace {

void check_input(const Matrix& x, std::size_t k) {
  if (k < 1) throw InvalidInput("gmm: k must be >= 1");
  if (x.cols() < 1) throw InvalidInput("gmm: dimension must be >= 1");
  if (x.rows() < k) {
    throw InvalidInput("gmm: need at least k points (n=" + std::to_string(x.rows()) + ", k=" + std::to_string(k) + ")");
  }
  for (double v : x.data()) {
    if (!std::isfinite(v)) throw InvalidInput("gmm: non-finite embedding value");
  }
}

// Per-dimension population mean and variance.
std::pair<std::vector<double>, std::vector<double>> moments(const Matrix& x) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) mean[c] += x(i, c);
  }
  for (double& m : mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = x(i, c) - mean[c];
      var[c] += diff * diff;
    }
  }
  for (double& v : var) v /= static_cast<double>(n);
  return {mean, var};
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    const double diff = a[c] - b[c];
    s += diff * diff;
  }
  return s;
}

// Greedy k-means++: each new center is the best of a few D^2-sampled
// candidates, which makes merged seeds in one blob much rarer.
Matrix kmeanspp_seeds(const Matrix& x, std::size_t k, Rng& rng) {
  const std::size_t n = x.rows();
  const std::size_t trials = 2 + static_cast<std::size_t>(std::log(static_cast<double>(k)));
  Matrix centers(k, x.cols());
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = static_cast<std::size_t>(rng.below(n));
  for (std::size_t j = 0; j < k; ++j) {
    std::copy(x.row(pick).begin(), x.row(pick).end(), centers.row(j).begin());
    if (j + 1 == k) break;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], squared_distance(x.row(i), centers.row(j)));
      total += d2[i];
    }
    if (total <= 0.0) {
      pick = static_cast<std::size_t>(rng.below(n));
      continue;
    }
    double best_potential = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials; ++t) {
      double target = rng.uniform() * total;
      std::size_t candidate = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        target -= d2[i];
        if (target < 0.0 && d2[i] > 0.0) {
          candidate = i;
          break;
        }
      }
      double potential = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        potential += std::min(d2[i], squared_distance(x.row(i), x.row(candidate)));
      }
      if (potential < best_potential) {
        best_potential = potential;
        pick = candidate;
      }
    }
  }
  return centers;
}

}  // namespace

GmmFit fit_gmm(const Matrix& x, const GmmFitOptions& options) {
  const std::size_t k = options.k;
  check_input(x, k);
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();

  auto [global_mean, global_var] = moments(x);
  double mean_var = 0.0;
  for (double v : global_var) mean_var += v;
  mean_var /= static_cast<double>(d);
  const double floor = mean_var > 0.0 ? kRelativeVarFloor * mean_var : kRelativeVarFloor;

  Rng rng(options.seed);
  GmmFit fit;
  GmmParams& p = fit.params;
  p.var_floor = floor;
  p.weights.assign(k, 1.0 / static_cast<double>(k));
  p.means = kmeanspp_seeds(x, k, rng);
  p.variances = Matrix(k, d);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t c = 0; c < d; ++c) p.variances(j, c) = std::max(global_var[c], floor);
  }

  Matrix resp(n, k);
  std::vector<double> point_ll(n);
  double previous = -std::numeric_limits<double>::infinity();

  for (std::size_t iter = 0; iter < options.max_iter; ++iter) {
    // E-step in log space.
    parallel_for(n, options.workers, [&](std::size_t i) {
      auto lj = component_log_joint(x.row(i), p);
      const double lse = log_sum_exp(lj);
      point_ll[i] = lse;
      auto r = resp.row(i);
      for (std::size_t j = 0; j < k; ++j) r[j] = std::exp(lj[j] - lse);
    });
    double total = 0.0;
    for (double v : point_ll) total += v;
    fit.loglik_trace.push_back(total);
    fit.iterations = iter + 1;
    if (iter > 0 && (total - previous) / static_cast<double>(n) < options.tol) {
      fit.converged = true;
      break;
    }
    previous = total;

    // M-step.
    std::vector<double> mass(k, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < k; ++j) mass[j] += resp(i, j);
    }
    std::vector<std::size_t> by_likelihood;
    std::size_t next_reseed = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (mass[j] < kCollapsedMass) {
        if (by_likelihood.empty()) {
          by_likelihood.resize(n);
          for (std::size_t i = 0; i < n; ++i) by_likelihood[i] = i;
          std::stable_sort(by_likelihood.begin(), by_likelihood.end(),
                           [&](std::size_t a, std::size_t b) { return point_ll[a] < point_ll[b]; });
        }
        const std::size_t src = by_likelihood[next_reseed++ % n];
        std::copy(x.row(src).begin(), x.row(src).end(), p.means.row(j).begin());
        for (std::size_t c = 0; c < d; ++c) p.variances(j, c) = std::max(global_var[c], floor);
        mass[j] = 1.0;
        ++fit.reseeds;
        continue;
      }
      auto mu = p.means.row(j);
      std::fill(mu.begin(), mu.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp(i, j);
        for (std::size_t c = 0; c < d; ++c) mu[c] += r * x(i, c);
      }
      for (double& m : mu) m /= mass[j];
      auto var = p.variances.row(j);
      std::fill(var.begin(), var.end(), 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double r = resp(i, j);
        for (std::size_t c = 0; c < d; ++c) {
          const double diff = x(i, c) - mu[c];
          var[c] += r * diff * diff;
        }
      }
      for (double& v : var) v = std::max(v / mass[j], floor);
    }
    double mass_total = 0.0;
    for (double m : mass) mass_total += m;
    for (std::size_t j = 0; j < k; ++j) p.weights[j] = mass[j] / mass_total;
  }
  p.validate();
  return fit;
}

std::string_view to_string(PartitionKind kind) { return kind == PartitionKind::Semantic ? "semantic" : "temporal"; }

std::optional<int> ClusterAssignment::cluster_of(const std::string& fact_id) const {
  auto it = map.find(fact_id);
  if (it == map.end()) return std::nullopt;
  return it->second;
}

std::vector<std::size_t> ClusterAssignment::sizes() const {
  std::vector<std::size_t> out(k, 0);
  for (const auto& [id, c] : map) ++out.at(static_cast<std::size_t>(c));
  return out;
}

GmmAssignment gmm_assign(const Matrix& x, const std::vector<std::string>& fact_ids, const GmmParams& params) {
  params.validate();
  if (x.cols() != params.dim()) throw InvalidInput("gmm_assign: dimension mismatch");
  if (fact_ids.size() != x.rows()) throw InvalidInput("gmm_assign: one fact id per row required");
  const std::size_t k = params.k();
  GmmAssignment out;
  out.assignment.kind = PartitionKind::Semantic;
  out.assignment.k = k;
  out.posteriors = Matrix(x.rows(), k);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto lj = component_log_joint(x.row(i), params);
    const double lse = log_sum_exp(lj);
    std::size_t best = 0;
    for (std::size_t j = 0; j < k; ++j) {
      out.posteriors(i, j) = std::exp(lj[j] - lse);
      if (lj[j] > lj[best]) best = j;
    }
    if (!out.assignment.map.emplace(fact_ids[i], static_cast<int>(best)).second) {
      throw InvalidInput("gmm_assign: duplicate fact id " + fact_ids[i]);
    }
  }
  return out;
}

ClusterAssignment temporal_partition(const std::vector<corpus::FactRecord>& facts, std::size_t k) {
  if (k < 1) throw InvalidInput("temporal_partition: k must be >= 1");
  if (k > facts.size()) {
    throw InvalidInput("temporal_partition: k=" + std::to_string(k) + " exceeds fact count " +
                       std::to_string(facts.size()));
  }
  std::vector<const corpus::FactRecord*> order;
  order.reserve(facts.size());
  for (const auto& f : facts) order.push_back(&f);
  std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) {
    if (a->date != b->date) return a->date < b->date;
    return a->id < b->id;
  });
  ClusterAssignment out;
  out.kind = PartitionKind::Temporal;
  out.k = k;
  const std::size_t n = order.size();
  const std::size_t base = n / k;
  const std::size_t extra = n % k;
  std::size_t pos = 0;
  for (std::size_t block = 0; block < k; ++block) {
    const std::size_t size = base + (block < extra ? 1 : 0);
    for (std::size_t i = 0; i < size; ++i, ++pos) {
      if (!out.map.emplace(order[pos]->id, static_cast<int>(block)).second) {
        throw InvalidInput("temporal_partition: duplicate fact id " + order[pos]->id);
      }
    }
  }
  return out;
}

namespace {

Json matrix_json(const Matrix& m) {
  Json rows = Json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return rows;
}

}  // namespace

Json to_json(const ClusterFile& file) {
  Json j;
  j["kind"] = to_string(file.assignment.kind);
  j["k"] = file.assignment.k;
  j["seed"] = file.seed;
  j["assignments"] = Json::object();
  for (const auto& [id, c] : file.assignment.map) j["assignments"][id] = c;
  if (file.gmm) {
    j["gmm"] = Json{{"weights", file.gmm->weights},
                    {"means", matrix_json(file.gmm->means)},
                    {"variances", matrix_json(file.gmm->variances)},
                    {"var_floor", file.gmm->var_floor}};
  } else {
    j["gmm"] = nullptr;
  }
  j["loglik_trace"] = file.loglik_trace;
  if (!file.config_fingerprint.empty()) j["config_fingerprint"] = file.config_fingerprint;
  return j;
}

ClusterFile cluster_file_from_json(const Json& j) {
  ClusterFile f;
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "semantic") f.assignment.kind = PartitionKind::Semantic;
    else if (kind == "temporal") f.assignment.kind = PartitionKind::Temporal;
    else throw InvalidInput("clusters: unknown kind " + kind);
    f.assignment.k = j.at("k").get<std::size_t>();
    f.seed = j.value("seed", std::uint64_t{0});
    for (const auto& [id, c] : j.at("assignments").items()) {
      const int idx = c.get<int>();
      if (idx < 0 || static_cast<std::size_t>(idx) >= f.assignment.k) {
        throw InvalidInput("clusters: index out of range for " + id);
      }
      f.assignment.map[id] = idx;
    }
    if (j.contains("gmm") && !j["gmm"].is_null()) {
      GmmParams p;
      const Json& g = j["gmm"];
      p.weights = g.at("weights").get<std::vector<double>>();
      p.means = Matrix::from_rows(g.at("means").get<std::vector<std::vector<double>>>());
      p.variances = Matrix::from_rows(g.at("variances").get<std::vector<std::vector<double>>>());
      p.var_floor = g.at("var_floor").get<double>();
      p.validate();
      f.gmm = std::move(p);
    }
    if (j.contains("loglik_trace")) f.loglik_trace = j["loglik_trace"].get<std::vector<double>>();
    f.config_fingerprint = j.value("config_fingerprint", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed clusters file: ") + e.what());
  }
  return f;
}

void save_clusters(const std::filesystem::path& path, const ClusterFile& file) {
  write_file(path, to_json(file).dump(2) + "\n");
}

ClusterFile load_clusters(const std::filesystem::path& path) {
  try {
    return cluster_file_from_json(Json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput(path.string() + ": " + e.what());
  }
}

}  // namespace wikidyk::cluster

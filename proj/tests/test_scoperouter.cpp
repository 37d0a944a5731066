#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <thread>

#include "httplib.h"
#include "wikidyk/error.hpp"
#include "wikidyk/routing_service.hpp"
#include "wikidyk/scoperouter.hpp"

using namespace wikidyk;
using namespace wikidyk::routing;
using qagen::Dimension;
using qagen::QAItem;

namespace {

class TableEmbedding final : public backends::EmbeddingBackend {
 public:
  std::map<std::string, std::vector<double>> table;
  std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) override {
    std::vector<std::vector<double>> out;
    for (const auto& t : texts) {
      auto it = table.find(t);
      if (it == table.end()) throw TransportError("no vector for " + t);
      out.push_back(it->second);
    }
    return out;
  }
};

class FixedClassifier final : public backends::ClassifierBackend {
 public:
  std::vector<double> row;
  std::vector<std::vector<double>> classify(const std::vector<std::string>& texts) override {
    return std::vector<std::vector<double>>(texts.size(), row);
  }
};

// Completion backend that always answers with its own name.
class Named final : public backends::CompletionBackend {
 public:
  explicit Named(std::string name) : name_(std::move(name)) {}
  std::string complete_raw(const std::string&, int) override { return name_; }
  const std::string& prompt_template() const override { return tpl_; }

 private:
  std::string name_;
  std::string tpl_{backends::kDefaultPromptTemplate};
};

cluster::ClusterAssignment assignment_of(std::map<std::string, int> map, std::size_t k) {
  cluster::ClusterAssignment a;
  a.k = k;
  a.map = std::move(map);
  return a;
}

cluster::GmmParams two_component_params() {
  cluster::GmmParams p;
  p.weights = {0.3, 0.7};
  p.means = cluster::Matrix::from_rows({{0.0, 0.0}, {4.0, 1.0}});
  p.variances = cluster::Matrix::from_rows({{1.0, 0.5}, {2.0, 1.0}});
  p.var_floor = 1e-6;
  return p;
}

std::vector<double> posterior_oracle(const std::vector<double>& x, const cluster::GmmParams& p) {
  std::vector<double> joint;
  for (std::size_t j = 0; j < p.k(); ++j) {
    double dens = p.weights[j];
    for (std::size_t c = 0; c < x.size(); ++c) {
      const double v = p.variances(j, c), d = x[c] - p.means(j, c);
      dens *= std::exp(-d * d / (2 * v)) / std::sqrt(2 * std::numbers::pi * v);
    }
    joint.push_back(dens);
  }
  double s = 0;
  for (double v : joint) s += v;
  for (double& v : joint) v /= s;
  return joint;
}

}  // namespace

TEST_CASE("decide: threshold is inclusive, ties take the lowest index") {
  CHECK(decide("q", {0.2, 0.5, 0.3}, 0.5).cluster == 1);
  CHECK(decide("q", {0.2, 0.49, 0.3}, 0.5).deferred());
  CHECK(decide("q", {0.6, 0.6}, 0.5).cluster == 0);
  CHECK(decide("q", {0.0, 0.0}, 0.0).cluster == 0);
  CHECK(decide("q", {1.0}, 1.0).cluster == 0);
  CHECK(decide("q", {}, 0.5).deferred());
  CHECK_THROWS_AS(decide("q", {0.5}, 1.5), InvalidInput);
  CHECK_THROWS_AS(decide("q", {0.5}, -0.1), InvalidInput);
  auto d = decide("hello", {0.9}, 0.25);
  CHECK(d.query == "hello");
  CHECK(d.threshold == 0.25);
}

TEST_CASE("scope dataset: labels, shuffle and stratified split") {
  std::map<std::string, int> map;
  std::vector<QAItem> pos, neg;
  for (int i = 0; i < 30; ++i) {
    const std::string fid = "f" + std::to_string(i);
    map[fid] = i % 3;
    for (int r = 0; r < 2; ++r) pos.push_back({fid, Dimension::Reliability, "q" + std::to_string(i) + "_" + std::to_string(r), "a", {}});
  }
  for (int i = 0; i < 25; ++i) neg.push_back({"n" + std::to_string(i), Dimension::Reliability, "neg" + std::to_string(i), "a", {}});
  const auto assignment = assignment_of(map, 3);
  auto rows = build_scope_dataset(assignment, pos, neg, {7, 0.1});
  REQUIRE(rows.size() == 85);

  std::map<std::vector<int>, std::pair<int, int>> counts;  // pattern -> (total, val)
  std::map<std::string, std::vector<int>> label_of;
  for (const auto& r : rows) {
    label_of[r.text] = r.labels;
    auto& c = counts[r.labels];
    ++c.first;
    c.second += r.split == "val";
  }
  for (const auto& q : pos) {
    std::vector<int> want(3, 0);
    want[static_cast<std::size_t>(map.at(q.fact_id))] = 1;
    CHECK(label_of.at(q.question) == want);
  }
  for (const auto& q : neg) CHECK(label_of.at(q.question) == std::vector<int>(3, 0));
  for (const auto& [pattern, c] : counts) CHECK(c.second == c.first / 10);
  CHECK(counts.size() == 4);

  auto again = build_scope_dataset(assignment, pos, neg, {7, 0.1});
  auto other = build_scope_dataset(assignment, pos, neg, {8, 0.1});
  bool same = true, differs = false;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    same &= to_json(rows[i]) == to_json(again[i]);
    differs |= rows[i].text != other[i].text;
  }
  CHECK(same);
  CHECK(differs);
}

TEST_CASE("scope dataset rejects overlaps and unassigned positives") {
  const auto a = assignment_of({{"f", 0}}, 1);
  std::vector<QAItem> pos = {{"f", Dimension::Reliability, "q", "a", {}}};
  CHECK_THROWS_AS(build_scope_dataset(a, pos, {{"f", Dimension::Reliability, "n", "a", {}}}), InvalidInput);
  CHECK_THROWS_AS(build_scope_dataset(a, {{"g", Dimension::Reliability, "q", "a", {}}}, {}), InvalidInput);
  CHECK_THROWS_AS(build_scope_dataset(a, pos, {}, {0, 1.0}), InvalidInput);
}

TEST_CASE("scope file round trip and validation") {
  const auto path = std::filesystem::temp_directory_path() / "wikidyk_scope_rt.jsonl";
  std::vector<ScopeExample> rows = {{"a?", {0, 1}, "train"}, {"b?", {0, 0}, "val"}};
  save_scope(path, rows);
  CHECK(read_file(path) == "{\"text\":\"a?\",\"labels\":[0,1],\"split\":\"train\"}\n"
                           "{\"text\":\"b?\",\"labels\":[0,0],\"split\":\"val\"}\n");
  auto back = load_scope(path);
  REQUIRE(back.size() == 2);
  CHECK(back[0].labels == rows[0].labels);
  CHECK(back[1].split == "val");
  std::filesystem::remove(path);
  CHECK_THROWS_AS(scope_example_from_json(Json::parse(R"({"text":"x","labels":[1,1],"split":"train"})")), InvalidInput);
  CHECK_THROWS_AS(scope_example_from_json(Json::parse(R"({"text":"x","labels":[2],"split":"train"})")), InvalidInput);
  CHECK_THROWS_AS(scope_example_from_json(Json::parse(R"({"text":"x","labels":[0],"split":"test"})")), InvalidInput);
  CHECK_THROWS_AS(scope_example_from_json(Json::parse(R"({"text":"x"})")), InvalidInput);
}

TEST_CASE("gmm scorer returns mixture posteriors and gates outliers") {
  auto emb = std::make_shared<TableEmbedding>();
  emb->table = {{"near", {0.5, 0.2}}, {"mid", {2.0, 0.5}}, {"far", {100.0, -80.0}}};
  const auto params = two_component_params();
  GmmPosteriorScorer scorer(emb, params, -20.0);
  for (const std::string q : {"near", "mid"}) {
    auto got = scorer.score(q);
    auto want = posterior_oracle(emb->table[q], params);
    REQUIRE(got.size() == 2);
    for (std::size_t j = 0; j < 2; ++j) CHECK(got[j] == doctest::Approx(want[j]).epsilon(1e-12));
  }
  CHECK(scorer.score("far") == std::vector<double>{0.0, 0.0});
  CHECK(route("far", scorer, 0.0).cluster == 0);  // all-zero still passes a zero threshold
  CHECK(route("far", scorer, 0.01).deferred());
  CHECK_THROWS_AS(scorer.score("unknown"), TransportError);
}

TEST_CASE("percentile gate is the nearest-rank percentile of training densities") {
  const auto params = two_component_params();
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 250; ++i) rows.push_back({0.03 * i - 2.0, std::sin(i) * 2.0});
  const auto x = cluster::Matrix::from_rows(rows);
  std::vector<double> dens;
  for (const auto& r : rows) {
    double s = 0;
    for (std::size_t j = 0; j < 2; ++j) {
      double v = params.weights[j];
      for (std::size_t c = 0; c < 2; ++c) {
        const double var = params.variances(j, c), d = r[c] - params.means(j, c);
        v *= std::exp(-d * d / (2 * var)) / std::sqrt(2 * std::numbers::pi * var);
      }
      s += v;
    }
    dens.push_back(std::log(s));
  }
  std::sort(dens.begin(), dens.end());
  // ceil(0.01 * 250) = 3rd smallest
  CHECK(GmmPosteriorScorer::percentile_gate(x, params) == doctest::Approx(dens[2]).epsilon(1e-12));
  CHECK(GmmPosteriorScorer::percentile_gate(x, params, 100.0) == doctest::Approx(dens.back()).epsilon(1e-12));
  // at least 99% of the training points pass their own gate
  const double gate = GmmPosteriorScorer::percentile_gate(x, params);
  const auto passing = std::count_if(dens.begin(), dens.end(), [&](double d) { return d >= gate; });
  CHECK(passing >= 248);
}

TEST_CASE("centroid scorer: means per cluster and softmax of negative distances") {
  const auto x = cluster::Matrix::from_rows({{0, 0}, {2, 0}, {10, 10}, {12, 10}, {11, 13}});
  const std::vector<std::string> ids = {"a", "b", "c", "d", "e"};
  const auto assignment = assignment_of({{"a", 0}, {"b", 0}, {"c", 1}, {"d", 1}, {"e", 1}}, 2);
  auto centroids = NearestCentroidScorer::centroids_from(x, ids, assignment);
  CHECK(centroids(0, 0) == 1.0);
  CHECK(centroids(0, 1) == 0.0);
  CHECK(centroids(1, 0) == 11.0);
  CHECK(centroids(1, 1) == 11.0);

  auto emb = std::make_shared<TableEmbedding>();
  emb->table = {{"q", {1, 3}}};
  for (double t : {0.5, 1.0, 4.0}) {
    NearestCentroidScorer scorer(emb, centroids, t);
    auto s = scorer.score("q");
    const double d0 = std::sqrt(0 + 9.0), d1 = std::sqrt(100.0 + 64.0);
    const double e0 = std::exp(-d0 / t), e1 = std::exp(-d1 / t);
    CHECK(s[0] == doctest::Approx(e0 / (e0 + e1)));
    CHECK(s[1] == doctest::Approx(e1 / (e0 + e1)));
  }
  CHECK_THROWS_AS(NearestCentroidScorer::centroids_from(x, ids, assignment_of({{"a", 0}}, 2)), InvalidInput);
  CHECK_THROWS_AS(NearestCentroidScorer(emb, centroids, 0.0), InvalidInput);
}

TEST_CASE("remote scorer enforces the contract") {
  auto cls = std::make_shared<FixedClassifier>();
  RemoteClassifierScorer scorer(cls, 3);
  cls->row = {0.1, 0.8, 0.2};
  CHECK(scorer.score("x") == cls->row);
  CHECK(route("x", scorer, 0.5).cluster == 1);
  cls->row = {0.1, 0.8};
  CHECK_THROWS_AS(scorer.score("x"), ContractError);
  cls->row = {0.1, 1.3, 0.0};
  CHECK_THROWS_AS(scorer.score("x"), ContractError);
  cls->row = {0.1, std::nan(""), 0.0};
  CHECK_THROWS_AS(scorer.score("x"), ContractError);
}

TEST_CASE("oracle routing") {
  const auto a = assignment_of({{"f1", 0}, {"f2", 2}}, 3);
  auto d = route_with_oracle({"f2", Dimension::Paraphrase, "q", "a", {}}, a);
  CHECK(d.cluster == 2);
  CHECK(d.scores == std::vector<double>{0, 0, 1});
  CHECK(route_with_oracle({"f1", Dimension::Locality, "q", "a", {}}, a).deferred());
  CHECK(route_with_oracle({"zz", Dimension::Reliability, "q", "a", {}}, a, {"zz"}).deferred());
  CHECK_THROWS_AS(route_with_oracle({"zz", Dimension::Reliability, "q", "a", {}}, a), InvalidInput);
}

TEST_CASE("ensemble router dispatches to the chosen backend") {
  auto cls = std::make_shared<FixedClassifier>();
  auto scorer = std::make_shared<RemoteClassifierScorer>(cls, 2);
  std::vector<std::shared_ptr<backends::CompletionBackend>> clusters = {std::make_shared<Named>("c0"),
                                                                        std::make_shared<Named>("c1")};
  auto base = std::make_shared<Named>("base");
  EnsembleRouter router(scorer, clusters, base, {0.5, false, 16});
  cls->row = {0.2, 0.9};
  auto r = router.answer("q");
  CHECK(r.answer == "c1");
  CHECK(r.decision.cluster == 1);
  cls->row = {0.2, 0.3};
  CHECK(router.answer("q").answer == "base");
  CHECK(router.answer_with("q", decide("q", {0.0, 0.0}, 1.0)).answer == "base");
  RouteDecision bad;
  bad.cluster = 5;
  CHECK_THROWS_AS(router.answer_with("q", bad), InvalidInput);

  cls->row = {0.2};
  CHECK_THROWS_AS(router.answer("q"), ContractError);
  EnsembleRouter lenient(scorer, clusters, base, {0.5, true, 16});
  CHECK(lenient.answer("q").answer == "base");

  CHECK_THROWS_AS(EnsembleRouter(scorer, {clusters[0]}, base, {}), InvalidInput);
  CHECK_THROWS_AS(EnsembleRouter(scorer, clusters, nullptr, {}), InvalidInput);
  EnsembleRouter oracle_only(nullptr, clusters, base, {});
  CHECK(oracle_only.scorer_name() == "oracle");
  CHECK_THROWS_AS(oracle_only.decide("q"), InvalidInput);
}

TEST_CASE("routing service handlers and a live server") {
  auto cls = std::make_shared<FixedClassifier>();
  cls->row = {0.9, 0.1};
  auto router = std::make_shared<EnsembleRouter>(
      std::make_shared<RemoteClassifierScorer>(cls, 2),
      std::vector<std::shared_ptr<backends::CompletionBackend>>{std::make_shared<Named>("c0"),
                                                                 std::make_shared<Named>("c1")},
      std::make_shared<Named>("base"), EnsembleRouter::Options{0.5, false, 16});
  RoutingService service(router);

  auto ok = service.handle_answer(R"({"question":"Who?"})");
  CHECK(ok.status == 200);
  auto body = Json::parse(ok.body);
  CHECK(body["answer"] == "c0");
  CHECK(body["route"] == Json::parse(R"({"kind":"cluster","id":0})"));
  CHECK(body["scores"] == Json::parse("[0.9,0.1]"));

  CHECK(service.handle_answer("not json").status == 400);
  CHECK(service.handle_answer(R"({"q":"x"})").status == 400);
  CHECK(service.handle_answer(R"({"question":"  "})").status == 400);
  CHECK(service.handle_answer(R"({"question":7})").status == 400);
  cls->row = {0.9};
  auto upstream = service.handle_answer(R"({"question":"Who?"})");
  CHECK(upstream.status == 502);
  CHECK(Json::parse(upstream.body).contains("error"));
  cls->row = {0.1, 0.2};
  CHECK(Json::parse(service.handle_answer(R"({"question":"Who?"})").body)["route"] ==
        Json::parse(R"({"kind":"defer"})"));

  auto health = Json::parse(service.handle_health().body);
  CHECK(health == Json::parse(R"({"status":"ok","k":2,"scorer":"remote"})"));

  const int port = service.bind_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread t([&] { service.serve(); });
  service.wait_until_ready();
  httplib::Client client("127.0.0.1", port);
  cls->row = {0.1, 0.95};
  auto res = client.Post("/v1/answer", R"({"question":"Where?"})", "application/json");
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(Json::parse(res->body)["answer"] == "c1");
  auto bad = client.Post("/v1/answer", "{}", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  auto h = client.Get("/v1/health");
  REQUIRE(h);
  CHECK(Json::parse(h->body)["status"] == "ok");
  service.stop();
  t.join();
}

#include "wikidyk/evalharness.hpp"

#include <chrono>
#include <cstdio>
#include <mutex>
#include <set>

#include "wikidyk/error.hpp"
#include "wikidyk/parallel.hpp"

namespace wikidyk::eval {

bool match_metric(std::string_view prediction, std::string_view gold) {
  if (gold.empty()) throw InvalidInput("match_metric: empty gold answer");
  return prediction.find(gold) != std::string_view::npos;
}

double token_f1(std::string_view prediction, std::string_view gold) {
  if (gold.empty()) throw InvalidInput("token_f1: empty gold answer");
  const auto pred = split_whitespace(prediction);
  const auto ref = split_whitespace(gold);
  if (pred.empty() || ref.empty()) return 0.0;
  std::map<std::string, std::size_t> counts;
  for (const auto& t : ref) ++counts[t];
  std::size_t overlap = 0;
  for (const auto& t : pred) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(ref.size());
  return 2.0 * precision * recall / (precision + recall);
}

Json to_json(const EvalRecord& r) {
  Json j;
  j["index"] = r.index;
  j["fact_id"] = r.fact_id;
  j["dimension"] = qagen::to_string(r.dimension);
  j["question"] = r.question;
  j["gold"] = r.gold;
  j["prediction"] = r.prediction;
  j["match"] = r.match;
  j["f1"] = r.f1;
  if (r.route) {
    Json route;
    if (r.route->cluster) route = Json{{"kind", "cluster"}, {"id", *r.route->cluster}};
    else route = Json{{"kind", "defer"}};
    route["scores"] = r.route->scores;
    route["threshold"] = r.route->threshold;
    j["route"] = std::move(route);
  }
  if (r.error) j["error"] = *r.error;
  return j;
}

EvalRecord eval_record_from_json(const Json& j) {
  EvalRecord r;
  try {
    r.index = j.at("index").get<std::size_t>();
    r.fact_id = j.at("fact_id").get<std::string>();
    r.dimension = qagen::dimension_from_string(j.at("dimension").get<std::string>());
    r.question = j.at("question").get<std::string>();
    r.gold = j.at("gold").get<std::string>();
    r.prediction = j.at("prediction").get<std::string>();
    r.match = j.at("match").get<bool>();
    r.f1 = j.at("f1").get<double>();
    if (j.contains("route")) {
      const Json& route = j["route"];
      RouteSummary s;
      if (route.at("kind") == "cluster") s.cluster = route.at("id").get<int>();
      s.scores = route.value("scores", std::vector<double>{});
      s.threshold = route.value("threshold", 0.0);
      r.route = std::move(s);
    }
    if (j.contains("error")) r.error = j["error"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed eval record: ") + e.what());
  }
  return r;
}

std::vector<EvalRecord> load_records(const std::filesystem::path& path) {
  std::vector<EvalRecord> out;
  read_jsonl(path, [&](const Json& j, std::size_t) { out.push_back(eval_record_from_json(j)); });
  return out;
}

EvalReport aggregate(const std::vector<EvalRecord>& records, std::string system) {
  EvalReport report;
  report.system = std::move(system);
  report.n_total = records.size();
  std::map<qagen::Dimension, std::pair<double, double>> sums;
  for (const auto& r : records) {
    if (r.error) {
      ++report.n_errored;
      continue;
    }
    auto& agg = report.dimensions[r.dimension];
    ++agg.n;
    if (r.route && !r.route->cluster) ++agg.deferred;
    auto& [m, f] = sums[r.dimension];
    m += r.match ? 1.0 : 0.0;
    f += r.f1;
  }
  for (auto& [dim, agg] : report.dimensions) {
    const auto& [m, f] = sums[dim];
    agg.match_pct = 100.0 * m / static_cast<double>(agg.n);
    agg.f1_pct = 100.0 * f / static_cast<double>(agg.n);
  }
  return report;
}

EvalRun run_eval(const std::vector<qagen::QAItem>& questions, const AnswerFn& answer_fn, const EvalOptions& options) {
  const auto started = std::chrono::steady_clock::now();
  for (const auto& q : questions) {
    if (q.answer.empty()) throw InvalidInput("question for fact " + q.fact_id + " has an empty gold answer");
  }

  std::vector<std::optional<EvalRecord>> slots(questions.size());
  if (options.records_path && std::filesystem::exists(*options.records_path)) {
    for (auto& r : load_records(*options.records_path)) {
      if (r.index >= questions.size() || questions[r.index].question != r.question) {
        throw InvalidInput("records file " + options.records_path->string() + " does not match the question set");
      }
      slots[r.index] = std::move(r);
    }
  }
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    if (!slots[i]) pending.push_back(i);
  }

  std::optional<JsonlWriter> writer;
  if (options.records_path) writer.emplace(*options.records_path, /*append=*/true);
  std::mutex sink_mutex;
  std::size_t next_to_write = 0;
  std::vector<bool> done(pending.size(), false);

  parallel_for(pending.size(), options.parallelism, [&](std::size_t p) {
    const std::size_t i = pending[p];
    const auto& q = questions[i];
    EvalRecord r;
    r.index = i;
    r.fact_id = q.fact_id;
    r.dimension = q.dimension;
    r.question = q.question;
    r.gold = q.answer;
    try {
      Answer a = answer_fn(q);
      r.prediction = std::move(a.prediction);
      r.route = std::move(a.route);
      r.match = match_metric(r.prediction, r.gold);
      r.f1 = token_f1(r.prediction, r.gold);
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    std::lock_guard lock(sink_mutex);
    slots[i] = std::move(r);
    done[p] = true;
    while (next_to_write < pending.size() && done[next_to_write]) {
      if (writer) writer->write(to_json(*slots[pending[next_to_write]]));
      ++next_to_write;
    }
  });
  if (writer) writer->flush();

  EvalRun run;
  run.records.reserve(questions.size());
  for (auto& s : slots) run.records.push_back(std::move(*s));
  run.report = aggregate(run.records, options.system);
  run.report.elapsed_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  if (!run.records.empty()) {
    const double rate = static_cast<double>(run.report.n_errored) / static_cast<double>(run.records.size());
    if (rate > options.max_error_rate) {
      throw ErrorRateExceeded("eval: " + std::to_string(run.report.n_errored) + " of " +
                              std::to_string(run.records.size()) + " questions errored (ceiling " +
                              std::to_string(options.max_error_rate) + ")");
    }
  }
  return run;
}

AnswerFn static_answer_fn(std::shared_ptr<backends::CompletionBackend> backend, int max_new_tokens) {
  if (!backend) throw InvalidInput("static system needs a completion backend");
  return [backend, max_new_tokens](const qagen::QAItem& q) {
    return Answer{backend->complete(q.question, max_new_tokens), std::nullopt};
  };
}

AnswerFn rag_answer_fn(std::shared_ptr<const rag::RagIndex> index, std::shared_ptr<backends::EmbeddingBackend> embedder,
                       std::shared_ptr<backends::CompletionBackend> backend, std::size_t top_k, std::size_t char_budget,
                       int max_new_tokens) {
  if (!index || !embedder || !backend) throw InvalidInput("rag system needs an index, an embedder and a backend");
  return [=](const qagen::QAItem& q) {
    auto retrieval = rag::retrieve_topk(*index, q.question, top_k, *embedder);
    std::vector<rag::ContextDoc> docs;
    for (const auto& hit : retrieval.hits) {
      auto it = index->meta.find(hit.doc_id);
      if (it == index->meta.end()) docs.push_back({hit.doc_id, ""});
      else docs.push_back({it->second.first, it->second.second});
    }
    auto prompt = rag::assemble_rag_prompt(q.question, docs, char_budget, backend->prompt_template());
    return Answer{backend->complete_raw(prompt, max_new_tokens), std::nullopt};
  };
}

AnswerFn router_answer_fn(std::shared_ptr<const routing::EnsembleRouter> router) {
  if (!router) throw InvalidInput("router system needs a router");
  return [router](const qagen::QAItem& q) {
    auto routed = router->answer(q.question);
    return Answer{std::move(routed.answer), RouteSummary::from(routed.decision)};
  };
}

AnswerFn oracle_router_answer_fn(std::shared_ptr<const routing::EnsembleRouter> router,
                                 cluster::ClusterAssignment assignment, std::set<std::string> out_of_scope) {
  if (!router) throw InvalidInput("router system needs a router");
  return [router, assignment = std::move(assignment), out_of_scope = std::move(out_of_scope)](const qagen::QAItem& q) {
    auto routed = router->answer_with(q.question, routing::route_with_oracle(q, assignment, out_of_scope));
    return Answer{std::move(routed.answer), RouteSummary::from(routed.decision)};
  };
}

namespace {

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

Json report_json(const EvalReport& report) {
  Json j;
  j["system"] = report.system;
  j["config_fingerprint"] = report.config_fingerprint;
  j["n_total"] = report.n_total;
  j["n_errored"] = report.n_errored;
  j["dimensions"] = Json::object();
  for (qagen::Dimension d : qagen::kAllDimensions) {
    auto it = report.dimensions.find(d);
    if (it == report.dimensions.end() || it->second.n == 0) continue;
    j["dimensions"][std::string(qagen::to_string(d))] = Json{{"match_pct", it->second.match_pct},
                                                             {"f1_pct", it->second.f1_pct},
                                                             {"n", it->second.n},
                                                             {"deferred", it->second.deferred}};
  }
  return j;
}

EvalReport report_from_json(const Json& j) {
  EvalReport r;
  try {
    r.system = j.at("system").get<std::string>();
    r.config_fingerprint = j.value("config_fingerprint", std::string{});
    r.n_total = j.at("n_total").get<std::size_t>();
    r.n_errored = j.at("n_errored").get<std::size_t>();
    for (const auto& [name, d] : j.at("dimensions").items()) {
      DimensionAggregate agg;
      agg.match_pct = d.at("match_pct").get<double>();
      agg.f1_pct = d.at("f1_pct").get<double>();
      agg.n = d.at("n").get<std::size_t>();
      agg.deferred = d.value("deferred", std::size_t{0});
      r.dimensions[qagen::dimension_from_string(name)] = agg;
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed report: ") + e.what());
  }
  return r;
}

std::string report_markdown(const std::vector<EvalReport>& reports) {
  std::vector<qagen::Dimension> dims;
  for (qagen::Dimension d : qagen::kAllDimensions) {
    for (const auto& r : reports) {
      auto it = r.dimensions.find(d);
      if (it != r.dimensions.end() && it->second.n > 0) {
        dims.push_back(d);
        break;
      }
    }
  }
  std::string header = "| System |";
  std::string rule = "|---|";
  for (auto d : dims) {
    header += " " + std::string(qagen::to_string(d)) + " Match | " + std::string(qagen::to_string(d)) + " F1 |";
    rule += "---:|---:|";
  }
  std::string out = header + "\n" + rule + "\n";
  for (const auto& r : reports) {
    out += "| " + (r.system.empty() ? std::string("system") : r.system) + " |";
    for (auto d : dims) {
      auto it = r.dimensions.find(d);
      if (it == r.dimensions.end() || it->second.n == 0) {
        out += " - | - |";
      } else {
        out += " " + fixed2(it->second.match_pct) + " | " + fixed2(it->second.f1_pct) + " |";
      }
    }
    out += "\n";
  }
  return out;
}

void emit_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir / "report.json", report_json(report).dump(2) + "\n");
  write_file(dir / "report.md", report_markdown({report}));
}

}  // namespace wikidyk::eval

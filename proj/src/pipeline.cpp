#include "wikidyk/pipeline.hpp"

#include <chrono>
#include <cstdlib>
#include <iostream>
#include <regex>
#include <set>

#include "wikidyk/clusterer.hpp"
#include "wikidyk/corpus.hpp"
#include "wikidyk/corpusbuilder.hpp"
#include "wikidyk/error.hpp"
#include "wikidyk/evalharness.hpp"
#include "wikidyk/qagen.hpp"
#include "wikidyk/ragstore.hpp"
#include "wikidyk/scoperouter.hpp"

namespace wikidyk::pipeline {

namespace fs = std::filesystem;

namespace {

constexpr std::array<std::pair<Stage, std::string_view>, 9> kStageNames = {{
    {Stage::Ingest, "ingest"},
    {Stage::Questions, "questions"},
    {Stage::Corpus, "corpus"},
    {Stage::Cluster, "cluster"},
    {Stage::ScopeData, "scope-data"},
    {Stage::RouteServe, "route-serve"},
    {Stage::RagIndex, "rag-index"},
    {Stage::Eval, "eval"},
    {Stage::Report, "report"},
}};

const std::set<std::string> kSystems = {"static", "rag", "router", "mock"};
const std::set<std::string> kScorers = {"oracle", "remote", "gmm", "centroid"};

template <typename T>
T get_or(const Json& section, const char* key, T fallback) {
  if (!section.is_object() || !section.contains(key) || section[key].is_null()) return fallback;
  try {
    return section[key].get<T>();
  } catch (const nlohmann::json::exception&) {
    throw InvalidInput(std::string("config: field '") + key + "' has the wrong type");
  }
}

const Json& section_of(const Json& root, const char* name) {
  static const Json empty = Json::object();
  if (!root.contains(name)) return empty;
  if (!root[name].is_object()) throw InvalidInput(std::string("config: '") + name + "' must be an object");
  return root[name];
}

void interpolate_all(Json& node) {
  if (node.is_string()) {
    node = interpolate_env(node.get<std::string>());
  } else if (node.is_structured()) {
    for (auto& child : node) interpolate_all(child);
  }
}

std::optional<std::pair<std::string, std::string>> window_of(const Json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  const Json& w = j[key];
  if (!w.is_object() || !w.contains("start") || !w.contains("end")) {
    throw InvalidInput(std::string("config: ") + key + " needs start and end dates");
  }
  auto start = w["start"].get<std::string>();
  auto end = w["end"].get<std::string>();
  corpus::DateWindow(corpus::Date::from_string(start), corpus::Date::from_string(end));
  return std::make_pair(start, end);
}

fs::path sidecar_path(const fs::path& output) { return build::CorpusWriter::meta_path(output); }

void write_sidecar(const fs::path& output, const Json& meta) { write_file(sidecar_path(output), meta.dump(2) + "\n"); }

const fs::path& require_path(const fs::path& p, const char* what) {
  if (p.empty()) throw InvalidInput(std::string("config: paths.") + what + " is not set");
  return p;
}

const fs::path& require_file(const fs::path& p, const char* what) {
  require_path(p, what);
  if (!fs::exists(p)) throw MissingInput(std::string("missing ") + what + ": " + p.string());
  return p;
}

std::map<std::string, std::string> load_title_text(const fs::path& path) {
  std::map<std::string, std::string> out;
  read_jsonl(path, [&](const Json& j, std::size_t line) {
    if (!j.contains("title") || !j.contains("text")) {
      throw InvalidInput(path.string() + ":" + std::to_string(line) + ": expected {\"title\",\"text\"}");
    }
    out.emplace(j["title"].get<std::string>(), j["text"].get<std::string>());
  });
  return out;
}

cluster::Matrix embed_facts(const std::vector<corpus::FactRecord>& facts, backends::EmbeddingBackend& embedder) {
  std::vector<std::string> texts;
  texts.reserve(facts.size());
  for (const auto& f : facts) texts.push_back(f.text);
  return cluster::Matrix::from_rows(embedder.embed(texts));
}

std::vector<std::string> fact_ids(const std::vector<corpus::FactRecord>& facts) {
  std::vector<std::string> ids;
  ids.reserve(facts.size());
  for (const auto& f : facts) ids.push_back(f.id);
  return ids;
}

std::shared_ptr<qagen::TextGenerator> make_generator(const PipelineConfig& c, const std::string& name) {
  if (name.empty() || name == "stub") return std::make_shared<qagen::StubGenerator>();
  return std::make_shared<qagen::CompletionGenerator>(backends::make_completion_backend(c.backend(name)));
}

std::shared_ptr<backends::EmbeddingBackend> embedding_backend(const PipelineConfig& c, const std::string& name,
                                                              const char* field) {
  if (name.empty()) throw InvalidInput(std::string("config: ") + field + " names no embedding backend");
  return backends::make_embedding_backend(c.backend(name));
}

fs::path questions_path(const PipelineConfig& c, const StageOptions& o) {
  return o.questions ? *o.questions : c.paths.questions;
}

// ---- stages -----------------------------------------------------------------

Json run_ingest(const PipelineConfig& c) {
  require_file(c.paths.archive, "archive");
  require_path(c.paths.facts, "facts");
  std::vector<corpus::FactRecord> all;
  std::set<std::string> seen;
  corpus::ParseReport totals;
  read_jsonl(c.paths.archive, [&](const Json& page, std::size_t line) {
    if (!page.contains("date") || !page.contains("markup")) {
      throw InvalidInput(c.paths.archive.string() + ":" + std::to_string(line) + ": expected {\"date\",\"markup\"}");
    }
    auto result = corpus::parse_dyk_page(page["markup"].get<std::string>(), page["date"].get<std::string>(),
                                         page.value("source_url", std::string{}));
    totals.entries += result.report.entries;
    totals.skipped_no_bold += result.report.skipped_no_bold;
    totals.skipped_malformed += result.report.skipped_malformed;
    totals.skipped_not_fact += result.report.skipped_not_fact;
    for (const auto& d : result.report.diagnostics) {
      std::cerr << "ingest: " << page["date"].get<std::string>() << " entry " << d.entry << ": " << d.reason << "\n";
    }
    for (auto& f : result.facts) {
      if (seen.insert(f.id).second) all.push_back(std::move(f));
    }
  });
  if (!c.paths.articles.empty()) corpus::attach_articles(all, load_title_text(require_file(c.paths.articles, "articles")));

  std::vector<corpus::FactRecord> facts = all;
  if (c.window) {
    facts = corpus::filter_facts(all, corpus::DateWindow(corpus::Date::from_string(c.window->first),
                                                         corpus::Date::from_string(c.window->second)));
  }
  corpus::save_facts(c.paths.facts, facts);
  Json meta{{"config_fingerprint", c.fingerprint},
            {"n_facts", facts.size()},
            {"entries", totals.entries},
            {"skipped_no_bold", totals.skipped_no_bold},
            {"skipped_malformed", totals.skipped_malformed},
            {"skipped_not_fact", totals.skipped_not_fact}};
  write_sidecar(c.paths.facts, meta);

  Json summary{{"stage", "ingest"}, {"facts", facts.size()}, {"entries", totals.entries},
               {"skipped", totals.skipped_no_bold + totals.skipped_malformed + totals.skipped_not_fact}};
  if (!c.paths.negative_facts.empty()) {
    auto negatives = corpus::filter_facts(all, corpus::DateWindow(corpus::Date::from_string(c.negative_window.first),
                                                                  corpus::Date::from_string(c.negative_window.second)));
    corpus::save_facts(c.paths.negative_facts, negatives);
    write_sidecar(c.paths.negative_facts, Json{{"config_fingerprint", c.fingerprint}, {"n_facts", negatives.size()}});
    summary["negative_facts"] = negatives.size();
  }
  summary["output"] = c.paths.facts.string();
  return summary;
}

Json run_questions(const PipelineConfig& c) {
  auto facts = corpus::load_facts(require_file(c.paths.facts, "facts"));
  require_path(c.paths.questions, "questions");

  auto gens = qagen::GeneratorSet::uniform(make_generator(c, c.generator));
  for (const auto& [dim, name] : c.generator_overrides) {
    gens.per_dimension[qagen::dimension_from_string(dim)] = make_generator(c, name);
  }
  if (!c.description_generator.empty()) gens.description = make_generator(c, c.description_generator);

  qagen::QuestionRunOptions opts;
  opts.parallelism = c.question_parallelism;
  opts.policy.max_attempts = c.max_attempts;
  opts.strict_pages = c.strict_pages;
  if (!c.paths.entity_pages.empty()) opts.pages = load_title_text(require_file(c.paths.entity_pages, "entity_pages"));
  if (!c.dimensions.empty()) {
    opts.dimensions.clear();
    for (const auto& d : c.dimensions) opts.dimensions.push_back(qagen::dimension_from_string(d));
  }

  auto run = qagen::generate_question_file(facts, gens, opts, c.paths.questions);
  auto items = qagen::load_questions(c.paths.questions);
  auto violations = qagen::validate_question_set(items, facts);
  for (const auto& v : violations) std::cerr << "questions: " << v << "\n";
  if (!violations.empty()) {
    throw InvalidInput(std::to_string(violations.size()) + " question(s) violate their dimension's contract");
  }

  std::map<std::string, std::size_t> by_dimension;
  for (const auto& q : items) ++by_dimension[std::string(qagen::to_string(q.dimension))];
  write_sidecar(c.paths.questions,
                Json{{"config_fingerprint", c.fingerprint}, {"n_items", items.size()}, {"by_dimension", by_dimension}});

  return Json{{"stage", "questions"},    {"facts", run.facts},           {"existing", run.existing},
              {"generated", run.generated}, {"dropped", run.dropped}, {"skipped_portability", run.skipped_portability},
              {"items", items.size()},     {"output", c.paths.questions.string()}};
}

Json run_corpus(const PipelineConfig& c) {
  auto facts = corpus::load_facts(require_file(c.paths.facts, "facts"));
  require_path(c.paths.corpus, "corpus");
  const auto objective = build::objective_from_string(c.objective);
  std::vector<qagen::QAItem> training;
  if (objective == build::Objective::SyntheticQA) {
    for (auto& q : qagen::load_questions(require_file(c.paths.questions, "questions"))) {
      if (q.dimension == qagen::Dimension::Training) training.push_back(std::move(q));
    }
  }

  build::CorpusWriter writer(c.paths.corpus);
  build::CorpusMeta meta;
  switch (objective) {
    case build::Objective::SpanPrediction: {
      build::SpanOptions so;
      so.s = c.s;
      so.flavor = build::flavor_from_string(c.flavor);
      so.min_len = c.min_len;
      so.max_len = c.max_len;
      so.seed = c.corpus_seed;
      so.bilm_sentinel = c.sentinel;
      so.clm_mask = c.mask;
      meta = build::build_span_corpus(facts, so, writer.sink());
      break;
    }
    case build::Objective::NTP:
      meta = build::build_ntp_corpus(facts, c.s, c.corpus_seed, writer.sink());
      break;
    case build::Objective::SyntheticQA:
      meta = build::build_qa_corpus(facts, training, c.s, c.corpus_seed, writer.sink());
      break;
  }
  writer.finish(meta, c.fingerprint);
  return Json{{"stage", "corpus"},
              {"objective", build::to_string(objective)},
              {"facts", meta.n_facts},
              {"records", meta.n_records},
              {"excluded", meta.excluded.size()},
              {"output", c.paths.corpus.string()}};
}

Json run_cluster(const PipelineConfig& c) {
  auto facts = corpus::load_facts(require_file(c.paths.facts, "facts"));
  require_path(c.paths.clusters, "clusters");
  if (c.k > facts.size()) {
    throw InvalidInput("clustering: k=" + std::to_string(c.k) + " exceeds " + std::to_string(facts.size()) + " facts");
  }
  cluster::ClusterFile file;
  file.seed = c.cluster_seed;
  file.config_fingerprint = c.fingerprint;
  Json summary{{"stage", "cluster"}, {"kind", c.cluster_kind}, {"k", c.k}};
  if (c.cluster_kind == "temporal") {
    file.assignment = cluster::temporal_partition(facts, c.k);
  } else {
    auto embedder = embedding_backend(c, c.cluster_embedding, "clustering.embedding");
    auto X = embed_facts(facts, *embedder);
    cluster::GmmFitOptions fo;
    fo.k = c.k;
    fo.seed = c.cluster_seed;
    fo.max_iter = c.max_iter;
    fo.tol = c.tol;
    auto fit = cluster::fit_gmm(X, fo);
    file.assignment = cluster::gmm_assign(X, fact_ids(facts), fit.params).assignment;
    file.gmm = fit.params;
    file.loglik_trace = fit.loglik_trace;
    summary["iterations"] = fit.iterations;
    summary["converged"] = fit.converged;
  }
  cluster::save_clusters(c.paths.clusters, file);
  summary["sizes"] = file.assignment.sizes();
  summary["output"] = c.paths.clusters.string();
  return summary;
}

Json run_scope_data(const PipelineConfig& c, const StageOptions& o) {
  auto clusters = cluster::load_clusters(require_file(o.clusters ? *o.clusters : c.paths.clusters, "clusters"));
  require_path(c.paths.scope, "scope");
  std::vector<qagen::QAItem> positives;
  for (auto& q : qagen::load_questions(require_file(questions_path(c, o), "questions"))) {
    // Locality probes pretrained knowledge, so it is never a positive.
    if (q.dimension != qagen::Dimension::Locality) positives.push_back(std::move(q));
  }
  std::vector<qagen::QAItem> negatives;
  if (!c.paths.negative_questions.empty()) {
    negatives = qagen::load_questions(require_file(c.paths.negative_questions, "negative_questions"));
  }
  auto rows = routing::build_scope_dataset(clusters.assignment, positives, negatives, {c.scope_seed, c.val_fraction});
  routing::save_scope(c.paths.scope, rows);
  std::size_t val = 0;
  for (const auto& r : rows) val += r.split == "val" ? 1 : 0;
  write_sidecar(c.paths.scope, Json{{"config_fingerprint", c.fingerprint},
                                    {"k", clusters.assignment.k},
                                    {"n_rows", rows.size()},
                                    {"n_val", val}});
  return Json{{"stage", "scope-data"},       {"rows", rows.size()}, {"positives", positives.size()},
              {"negatives", negatives.size()}, {"val", val},          {"output", c.paths.scope.string()}};
}

std::vector<rag::Article> articles_of(const std::vector<corpus::FactRecord>& facts) {
  std::vector<rag::Article> out;
  std::set<std::string> seen;
  for (const auto& f : facts) {
    if (f.article_text.empty() || !seen.insert(f.article_title).second) continue;
    out.push_back({f.article_title, f.article_title, f.article_text});
  }
  return out;
}

Json run_rag_index(const PipelineConfig& c) {
  auto facts = corpus::load_facts(require_file(c.paths.facts, "facts"));
  require_path(c.paths.index, "index");
  auto embedder = embedding_backend(c, c.rag_embedding, "rag.embedding");
  auto articles = articles_of(facts);
  if (articles.empty()) throw MissingInput("rag-index: no fact carries article text; set paths.articles and rerun ingest");
  auto index = rag::build_index(articles, *embedder, {c.char_budget, 2});
  rag::save_index(c.paths.index, index);
  write_sidecar(c.paths.index,
                Json{{"config_fingerprint", c.fingerprint}, {"n", index.size()}, {"d", index.dim()}});
  return Json{{"stage", "rag-index"}, {"docs", index.size()}, {"dim", index.dim()}, {"output", c.paths.index.string()}};
}

std::shared_ptr<backends::MockMemorizer> memorizer_over(const std::vector<qagen::QAItem>& items,
                                                        const std::set<std::string>* facts, const std::string& fallback) {
  auto m = std::make_shared<backends::MockMemorizer>(fallback);
  for (const auto& q : items) {
    if (q.dimension == qagen::Dimension::Locality) continue;
    if (facts && !facts->contains(q.fact_id)) continue;
    m->add(q.question, q.answer);
  }
  return m;
}

eval::AnswerFn answer_fn_for(const PipelineConfig& c, const StageOptions& o, const std::string& system,
                             const std::vector<qagen::QAItem>& questions) {
  if (system == "static") {
    if (c.eval_backend.empty()) throw InvalidInput("config: eval.backend is required for the static system");
    return eval::static_answer_fn(backends::make_completion_backend(c.backend(c.eval_backend)), c.max_new_tokens);
  }
  if (system == "mock") {
    std::shared_ptr<backends::CompletionBackend> backend;
    if (!c.eval_backend.empty() && c.backend(c.eval_backend).kind == backends::BackendKind::MockMemorizer) {
      backend = backends::make_completion_backend(c.backend(c.eval_backend));
    } else {
      backend = memorizer_over(questions, nullptr, "UNKNOWN");
    }
    return eval::static_answer_fn(backend, c.max_new_tokens);
  }
  if (system == "rag") {
    if (c.eval_backend.empty()) throw InvalidInput("config: eval.backend is required for the rag system");
    auto facts = corpus::load_facts(require_file(c.paths.facts, "facts"));
    auto index = std::make_shared<rag::RagIndex>(rag::load_index(require_file(c.paths.index, "index")));
    for (const auto& a : articles_of(facts)) index->meta[a.doc_id] = {a.title, a.text};
    return eval::rag_answer_fn(index, embedding_backend(c, c.rag_embedding, "rag.embedding"),
                               backends::make_completion_backend(c.backend(c.eval_backend)), c.top_k, c.char_budget,
                               c.max_new_tokens);
  }
  auto router = make_router(c, o);
  if (router->scorer_name() == "oracle") {
    auto clusters = cluster::load_clusters(require_file(o.clusters ? *o.clusters : c.paths.clusters, "clusters"));
    return eval::oracle_router_answer_fn(router, clusters.assignment);
  }
  return eval::router_answer_fn(router);
}

Json run_eval_stage(const PipelineConfig& c, const StageOptions& o) {
  const auto qpath = questions_path(c, o);
  auto questions = qagen::load_questions(require_file(qpath, "questions"));
  const std::string system = o.system.value_or(c.system);
  if (!kSystems.contains(system)) throw InvalidInput("unknown eval system '" + system + "'");
  require_path(c.paths.reports, "reports");

  const fs::path dir = c.paths.reports / system;
  fs::create_directories(dir);
  eval::EvalOptions eo;
  eo.parallelism = c.eval_parallelism;
  eo.max_error_rate = c.max_error_rate;
  eo.records_path = dir / "records.jsonl";
  eo.system = system;
  if (!o.resume) fs::remove(*eo.records_path);

  // Training QAs are corpus material; only the five evaluation dimensions are scored.
  std::vector<qagen::QAItem> scored;
  for (const auto& q : questions) {
    if (q.dimension != qagen::Dimension::Training) scored.push_back(q);
  }
  auto run = eval::run_eval(scored, answer_fn_for(c, o, system, questions), eo);
  run.report.config_fingerprint = c.fingerprint;
  eval::emit_report(run.report, dir);
  {
    // Timing lives only in this side log so the report stays reproducible.
    std::ofstream log(dir / "timing.log", std::ios::app);
    const auto now = std::chrono::system_clock::now().time_since_epoch();
    log << std::chrono::duration_cast<std::chrono::seconds>(now).count() << " elapsed_ms=" << run.report.elapsed_ms
        << " n=" << run.report.n_total << "\n";
  }

  Json dims = Json::object();
  for (const auto& [d, agg] : run.report.dimensions) {
    dims[std::string(qagen::to_string(d))] = Json{{"match_pct", agg.match_pct}, {"f1_pct", agg.f1_pct}, {"n", agg.n}};
  }
  return Json{{"stage", "eval"},
              {"system", system},
              {"n_total", run.report.n_total},
              {"n_errored", run.report.n_errored},
              {"dimensions", dims},
              {"output", dir.string()}};
}

Json run_report(const PipelineConfig& c) {
  const fs::path& root = require_file(c.paths.reports, "reports");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory() && fs::exists(entry.path() / "report.json")) files.push_back(entry.path() / "report.json");
  }
  if (files.empty()) throw MissingInput("no report.json under " + root.string());
  std::sort(files.begin(), files.end());
  std::vector<eval::EvalReport> reports;
  Json all = Json::array();
  for (const auto& f : files) {
    Json j;
    try {
      j = Json::parse(read_file(f));
    } catch (const nlohmann::json::parse_error& e) {
      throw InvalidInput(f.string() + ": " + e.what());
    }
    reports.push_back(eval::report_from_json(j));
    all.push_back(std::move(j));
  }
  write_file(root / "summary.md", eval::report_markdown(reports));
  write_file(root / "summary.json", Json{{"config_fingerprint", c.fingerprint}, {"reports", all}}.dump(2) + "\n");
  return Json{{"stage", "report"}, {"systems", reports.size()}, {"output", (root / "summary.md").string()}};
}

}  // namespace

std::string_view to_string(Stage stage) {
  for (const auto& [s, name] : kStageNames) {
    if (s == stage) return name;
  }
  return "unknown";
}

Stage stage_from_string(std::string_view name) {
  for (const auto& [s, n] : kStageNames) {
    if (n == name) return s;
  }
  throw InvalidInput("unknown stage '" + std::string(name) + "'");
}

const backends::BackendSpec& PipelineConfig::backend(const std::string& name) const {
  auto it = backends.find(name);
  if (it == backends.end()) throw InvalidInput("config: no backend named '" + name + "'");
  return it->second;
}

std::string interpolate_env(std::string_view text) {
  static const std::regex var(R"(\$\{([A-Za-z_][A-Za-z0-9_]*)\})");
  std::string in(text);
  std::string out;
  auto last = in.cbegin();
  for (std::sregex_iterator it(in.begin(), in.end(), var), end; it != end; ++it) {
    const std::string name = (*it)[1].str();
    const char* value = std::getenv(name.c_str());
    if (!value) throw InvalidInput("config: environment variable " + name + " is not set");
    out.append(last, in.cbegin() + it->position());
    out += value;
    last = in.cbegin() + it->position() + it->length();
  }
  out.append(last, in.cend());
  return out;
}

PipelineConfig parse_config(const Json& raw_in, const fs::path& base_dir, std::optional<std::uint64_t> seed_override) {
  if (!raw_in.is_object()) throw InvalidInput("config must be a JSON object");
  PipelineConfig c;
  c.raw = raw_in;
  if (seed_override) {
    c.raw["seed"] = *seed_override;
    for (const char* s : {"clustering", "corpus", "scope"}) {
      if (c.raw.contains(s) && c.raw[s].is_object() && c.raw[s].contains("seed")) c.raw[s]["seed"] = *seed_override;
    }
  }
  c.fingerprint = stable_hash_hex(nlohmann::json::parse(c.raw.dump()).dump());

  Json j = c.raw;
  interpolate_all(j);
  c.seed = get_or<std::uint64_t>(j, "seed", 0);

  const Json& paths = section_of(j, "paths");
  auto path_of = [&](const char* key) -> fs::path {
    auto v = get_or<std::string>(paths, key, "");
    if (v.empty()) return {};
    fs::path p(v);
    return p.is_absolute() ? p : base_dir / p;
  };
  c.paths = Paths{path_of("archive"),   path_of("articles"),  path_of("entity_pages"),       path_of("facts"),
                  path_of("negative_facts"), path_of("questions"), path_of("negative_questions"), path_of("corpus"),
                  path_of("clusters"), path_of("scope"),     path_of("index"),               path_of("reports")};

  const Json& bs = section_of(j, "backends");
  for (const auto& [name, spec] : bs.items()) {
    auto b = backends::BackendSpec::from_json(name, spec);
    if (!b.store_path.empty() && fs::path(b.store_path).is_relative()) b.store_path = (base_dir / b.store_path).string();
    c.backends.emplace(name, std::move(b));
  }

  const Json& ingest = section_of(j, "ingest");
  c.window = window_of(ingest, "window");
  if (auto nw = window_of(ingest, "negative_window")) c.negative_window = *nw;

  const Json& q = section_of(j, "questions");
  c.generator = get_or<std::string>(q, "generator", c.generator);
  c.generator_overrides = get_or<std::map<std::string, std::string>>(q, "generators", {});
  c.description_generator = get_or<std::string>(q, "description_generator", "");
  c.question_parallelism = get_or<std::size_t>(q, "parallelism", c.question_parallelism);
  c.max_attempts = get_or<int>(q, "max_attempts", c.max_attempts);
  c.strict_pages = get_or<bool>(q, "strict_pages", c.strict_pages);
  c.dimensions = get_or<std::vector<std::string>>(q, "dimensions", {});

  const Json& cl = section_of(j, "clustering");
  c.cluster_kind = get_or<std::string>(cl, "kind", c.cluster_kind);
  c.k = get_or<std::size_t>(cl, "k", c.k);
  c.cluster_seed = get_or<std::uint64_t>(cl, "seed", c.seed);
  c.cluster_embedding = get_or<std::string>(cl, "embedding", "");
  c.max_iter = get_or<std::size_t>(cl, "max_iter", c.max_iter);
  c.tol = get_or<double>(cl, "tol", c.tol);

  const Json& sc = section_of(j, "scope");
  c.val_fraction = get_or<double>(sc, "val_fraction", c.val_fraction);
  c.scope_seed = get_or<std::uint64_t>(sc, "seed", c.seed);

  const Json& r = section_of(j, "router");
  c.scorer = get_or<std::string>(r, "scorer", c.scorer);
  c.threshold = get_or<double>(r, "threshold", c.threshold);
  c.cluster_backends = get_or<std::vector<std::string>>(r, "cluster_backends", {});
  c.base_backend = get_or<std::string>(r, "base", "");
  c.router_embedding = get_or<std::string>(r, "embedding", c.cluster_embedding);
  c.classifier = get_or<std::string>(r, "classifier", "");
  c.host = get_or<std::string>(r, "host", c.host);
  c.port = get_or<int>(r, "port", c.port);
  c.defer_on_error = get_or<bool>(r, "defer_on_error", c.defer_on_error);
  c.temperature = get_or<double>(r, "temperature", c.temperature);
  c.gate_percentile = get_or<double>(r, "gate_percentile", c.gate_percentile);

  const Json& co = section_of(j, "corpus");
  c.objective = get_or<std::string>(co, "objective", c.objective);
  c.s = get_or<std::uint64_t>(co, "s", c.s);
  c.min_len = get_or<std::size_t>(co, "min_len", c.min_len);
  c.max_len = get_or<std::size_t>(co, "max_len", c.max_len);
  c.flavor = get_or<std::string>(co, "flavor", c.flavor);
  c.corpus_seed = get_or<std::uint64_t>(co, "seed", c.seed);
  c.sentinel = get_or<std::string>(co, "sentinel", c.sentinel);
  c.mask = get_or<std::string>(co, "mask", c.mask);

  const Json& rg = section_of(j, "rag");
  c.rag_embedding = get_or<std::string>(rg, "embedding", "");
  c.top_k = get_or<std::size_t>(rg, "top_k", c.top_k);
  c.char_budget = get_or<std::size_t>(rg, "char_budget", c.char_budget);

  const Json& ev = section_of(j, "eval");
  c.system = get_or<std::string>(ev, "system", c.system);
  c.eval_parallelism = get_or<std::size_t>(ev, "parallelism", c.eval_parallelism);
  c.max_new_tokens = get_or<int>(ev, "max_new_tokens", c.max_new_tokens);
  c.eval_backend = get_or<std::string>(ev, "backend", "");
  c.max_error_rate = get_or<double>(ev, "max_error_rate", c.max_error_rate);

  // Invariants.
  if (c.s < 1) throw InvalidInput("config: corpus.s must be >= 1");
  if (c.min_len < 1 || c.max_len < c.min_len) throw InvalidInput("config: need 1 <= corpus.min_len <= corpus.max_len");
  if (!(c.threshold >= 0.0 && c.threshold <= 1.0)) throw InvalidInput("config: router.threshold must be in [0, 1]");
  if (c.k < 1) throw InvalidInput("config: clustering.k must be >= 1");
  if (c.cluster_kind != "semantic" && c.cluster_kind != "temporal") {
    throw InvalidInput("config: clustering.kind must be semantic or temporal");
  }
  if (!kScorers.contains(c.scorer)) throw InvalidInput("config: unknown router.scorer '" + c.scorer + "'");
  if (!kSystems.contains(c.system)) throw InvalidInput("config: unknown eval.system '" + c.system + "'");
  if (!(c.val_fraction >= 0.0 && c.val_fraction < 1.0)) throw InvalidInput("config: scope.val_fraction must be in [0, 1)");
  if (!(c.max_error_rate >= 0.0 && c.max_error_rate <= 1.0)) throw InvalidInput("config: eval.max_error_rate must be in [0, 1]");
  if (c.max_attempts < 1) throw InvalidInput("config: questions.max_attempts must be >= 1");
  if (c.max_new_tokens < 1) throw InvalidInput("config: eval.max_new_tokens must be >= 1");
  build::objective_from_string(c.objective);
  build::flavor_from_string(c.flavor);
  for (const auto& d : c.dimensions) qagen::dimension_from_string(d);

  std::vector<std::string> referenced = {c.description_generator, c.cluster_embedding, c.base_backend,
                                         c.router_embedding,      c.classifier,        c.rag_embedding,
                                         c.eval_backend};
  if (c.generator != "stub") referenced.push_back(c.generator);
  for (const auto& [dim, name] : c.generator_overrides) {
    qagen::dimension_from_string(dim);
    if (name != "stub") referenced.push_back(name);
  }
  referenced.insert(referenced.end(), c.cluster_backends.begin(), c.cluster_backends.end());
  for (const auto& name : referenced) {
    if (!name.empty()) c.backend(name);
  }
  return c;
}

PipelineConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed_override) {
  if (!fs::exists(path)) throw MissingInput("missing config: " + path.string());
  Json raw;
  try {
    raw = Json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput("config " + path.string() + ": " + e.what());
  }
  return parse_config(raw, fs::absolute(path).parent_path(), seed_override);
}

std::shared_ptr<const routing::EnsembleRouter> make_router(const PipelineConfig& c, const StageOptions& o) {
  auto clusters = cluster::load_clusters(require_file(o.clusters ? *o.clusters : c.paths.clusters, "clusters"));
  const std::size_t k = clusters.assignment.k;
  const std::string scorer_kind = o.scorer.value_or(c.scorer);
  if (!kScorers.contains(scorer_kind)) throw InvalidInput("unknown scorer '" + scorer_kind + "'");
  const double threshold = o.threshold.value_or(c.threshold);
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw InvalidInput("threshold must be in [0, 1]");

  std::vector<std::shared_ptr<backends::CompletionBackend>> cluster_backends;
  if (c.cluster_backends.empty()) {
    // Desk mode: one exact-recall memorizer per cluster over its facts' questions.
    auto questions = qagen::load_questions(require_file(questions_path(c, o), "questions"));
    std::vector<std::set<std::string>> members(k);
    for (const auto& [id, cid] : clusters.assignment.map) members.at(static_cast<std::size_t>(cid)).insert(id);
    for (std::size_t i = 0; i < k; ++i) cluster_backends.push_back(memorizer_over(questions, &members[i], "UNKNOWN"));
  } else {
    if (c.cluster_backends.size() != k) {
      throw InvalidInput("router.cluster_backends lists " + std::to_string(c.cluster_backends.size()) +
                         " backends for k=" + std::to_string(k));
    }
    for (const auto& name : c.cluster_backends) cluster_backends.push_back(backends::make_completion_backend(c.backend(name)));
  }
  std::shared_ptr<backends::CompletionBackend> base;
  if (c.base_backend.empty()) base = std::make_shared<backends::MockMemorizer>("UNKNOWN");
  else base = backends::make_completion_backend(c.backend(c.base_backend));

  std::shared_ptr<const routing::Scorer> scorer;
  if (scorer_kind == "remote") {
    if (c.classifier.empty()) throw InvalidInput("config: router.classifier is required for the remote scorer");
    scorer = std::make_shared<routing::RemoteClassifierScorer>(backends::make_classifier_backend(c.backend(c.classifier)), k);
  } else if (scorer_kind == "gmm" || scorer_kind == "centroid") {
    auto facts = corpus::load_facts(require_file(c.paths.facts, "facts"));
    auto embedder = embedding_backend(c, c.router_embedding, "router.embedding");
    auto X = embed_facts(facts, *embedder);
    if (scorer_kind == "gmm") {
      if (!clusters.gmm) throw InvalidInput("the gmm scorer needs semantic clusters with mixture parameters");
      const double gate = routing::GmmPosteriorScorer::percentile_gate(X, *clusters.gmm, c.gate_percentile);
      scorer = std::make_shared<routing::GmmPosteriorScorer>(embedder, *clusters.gmm, gate);
    } else {
      auto centroids = routing::NearestCentroidScorer::centroids_from(X, fact_ids(facts), clusters.assignment);
      scorer = std::make_shared<routing::NearestCentroidScorer>(embedder, std::move(centroids), c.temperature);
    }
  }
  return std::make_shared<const routing::EnsembleRouter>(
      scorer, std::move(cluster_backends), base,
      routing::EnsembleRouter::Options{threshold, c.defer_on_error, c.max_new_tokens});
}

std::unique_ptr<routing::RoutingService> make_routing_service(const PipelineConfig& c, const StageOptions& o) {
  if (o.scorer.value_or(c.scorer) == "oracle") {
    throw InvalidInput("route-serve needs a scorer (remote, gmm or centroid); oracle routing needs gold labels");
  }
  return std::make_unique<routing::RoutingService>(make_router(c, o));
}

Json run_stage(const PipelineConfig& config, Stage stage, const StageOptions& options) {
  switch (stage) {
    case Stage::Ingest:
      return run_ingest(config);
    case Stage::Questions:
      return run_questions(config);
    case Stage::Corpus:
      return run_corpus(config);
    case Stage::Cluster:
      return run_cluster(config);
    case Stage::ScopeData:
      return run_scope_data(config, options);
    case Stage::RagIndex:
      return run_rag_index(config);
    case Stage::Eval:
      return run_eval_stage(config, options);
    case Stage::Report:
      return run_report(config);
    case Stage::RouteServe:
      break;
  }
  throw InvalidInput("route-serve is a long-running stage; start it with make_routing_service");
}

int exit_code_for(const std::exception& e) noexcept {
  if (dynamic_cast<const MissingInput*>(&e)) return 2;
  if (dynamic_cast<const InvalidInput*>(&e)) return 3;
  return 1;
}

}  // namespace wikidyk::pipeline

// wikidyk: one pipeline stage per invocation. Logs go to stderr, the stage
// summary to stdout as a single JSON line.
#include <csignal>
#include <iostream>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "wikidyk/error.hpp"
#include "wikidyk/pipeline.hpp"

namespace pl = wikidyk::pipeline;

namespace {

int serve(const pl::PipelineConfig& config, const pl::StageOptions& options) {
  // Block the stop signals before any thread starts so only sigwait sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  auto service = pl::make_routing_service(config, options);
  if (!service->bind(config.host, config.port)) {
    throw wikidyk::Error("route-serve: cannot bind " + config.host + ":" + std::to_string(config.port));
  }
  std::jthread server([&] { service->serve(); });
  service->wait_until_ready();
  std::cout << wikidyk::Json{{"stage", "route-serve"}, {"host", config.host}, {"port", config.port}, {"status", "listening"}}
                   .dump()
            << std::endl;

  int sig = 0;
  sigwait(&signals, &sig);
  std::cerr << "route-serve: signal " << sig << ", stopping\n";
  service->stop();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Knowledge-injection data, routing and evaluation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  pl::StageOptions options;
  std::string questions, system, scorer, clusters;
  double threshold = -1.0;

  std::map<std::string, CLI::App*> commands;
  const std::vector<std::pair<std::string, std::string>> stages = {
      {"ingest", "parse archive pages into facts.jsonl"},
      {"questions", "generate evaluation and training QAs"},
      {"corpus", "build the injection training corpus"},
      {"cluster", "partition facts semantically or by date"},
      {"scope-data", "write scope-classifier training data"},
      {"route-serve", "serve the ensemble router over HTTP"},
      {"rag-index", "embed articles into the retrieval index"},
      {"eval", "score one answer system on the question file"},
      {"report", "merge per-system reports into summary tables"},
  };
  for (const auto& [name, description] : stages) {
    auto* cmd = app.add_subcommand(name, description);
    cmd->add_option("--config", config_path, "pipeline config (JSON)")->required();
    cmd->add_option("--seed", seed, "overrides every seed in the config");
    commands[name] = cmd;
  }
  auto* eval = commands["eval"];
  eval->add_option("--questions", questions, "question file (defaults to paths.questions)");
  eval->add_option("--system", system, "answer system")->check(CLI::IsMember({"static", "rag", "router", "mock"}));
  eval->add_flag("--resume", options.resume, "continue an interrupted records file");
  for (auto* cmd : {eval, commands["route-serve"]}) {
    cmd->add_option("--threshold", threshold, "router confidence threshold")->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--scorer", scorer, "router scorer")->check(CLI::IsMember({"oracle", "remote", "gmm", "centroid"}));
    cmd->add_option("--clusters", clusters, "clusters.json (defaults to paths.clusters)");
  }
  commands["scope-data"]->add_option("--clusters", clusters, "clusters.json (defaults to paths.clusters)");
  commands["scope-data"]->add_option("--questions", questions, "question file (defaults to paths.questions)");

  CLI11_PARSE(app, argc, argv);

  if (!questions.empty()) options.questions = questions;
  if (!system.empty()) options.system = system;
  if (!scorer.empty()) options.scorer = scorer;
  if (!clusters.empty()) options.clusters = clusters;
  if (threshold >= 0.0) options.threshold = threshold;

  const std::string stage_name = app.get_subcommands().front()->get_name();
  try {
    const auto config = pl::load_config(config_path, seed);
    const auto stage = pl::stage_from_string(stage_name);
    if (stage == pl::Stage::RouteServe) return serve(config, options);
    std::cout << pl::run_stage(config, stage, options).dump() << std::endl;
    return 0;
  } catch (const std::exception& e) {
    const int code = pl::exit_code_for(e);
    std::cerr << stage_name << ": " << e.what() << "\n";
    std::cout << wikidyk::Json{{"stage", stage_name}, {"status", "error"}, {"exit_code", code}, {"error", e.what()}}.dump()
              << std::endl;
    return code;
  }
}

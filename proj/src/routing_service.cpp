#include "wikidyk/routing_service.hpp"

#include "httplib.h"
#include "wikidyk/error.hpp"

namespace wikidyk::routing {

namespace {

ServiceResponse error_response(int status, const std::string& message) {
  return {status, Json{{"error", message}}.dump()};
}

}  // namespace

Json answer_json(const RoutedAnswer& answer) {
  Json j;
  j["answer"] = answer.answer;
  if (answer.decision.cluster) {
    j["route"] = Json{{"kind", "cluster"}, {"id", *answer.decision.cluster}};
  } else {
    j["route"] = Json{{"kind", "defer"}};
  }
  j["scores"] = answer.decision.scores;
  return j;
}

RoutingService::RoutingService(std::shared_ptr<const EnsembleRouter> router)
    : router_(std::move(router)), server_(std::make_unique<httplib::Server>()) {
  if (!router_) throw InvalidInput("routing service needs a router");
  server_->Post("/v1/answer", [this](const httplib::Request& req, httplib::Response& res) {
    auto out = handle_answer(req.body);
    res.status = out.status;
    res.set_content(out.body, "application/json");
  });
  server_->Get("/v1/health", [this](const httplib::Request&, httplib::Response& res) {
    auto out = handle_health();
    res.status = out.status;
    res.set_content(out.body, "application/json");
  });
}

RoutingService::~RoutingService() { stop(); }

ServiceResponse RoutingService::handle_answer(const std::string& request_body) const {
  Json req;
  try {
    req = Json::parse(request_body);
  } catch (const nlohmann::json::parse_error&) {
    return error_response(400, "request body is not JSON");
  }
  if (!req.is_object() || !req.contains("question") || !req["question"].is_string()) {
    return error_response(400, "expected {\"question\": str}");
  }
  const std::string question = req["question"].get<std::string>();
  if (trim(question).empty()) return error_response(400, "question is empty");
  try {
    return {200, answer_json(router_->answer(question)).dump()};
  } catch (const InvalidInput& e) {
    return error_response(400, e.what());
  } catch (const std::exception& e) {
    return error_response(502, e.what());
  }
}

ServiceResponse RoutingService::handle_health() const {
  Json j;
  j["status"] = "ok";
  j["k"] = router_->k();
  j["scorer"] = router_->scorer_name();
  return {200, j.dump()};
}

bool RoutingService::listen(const std::string& host, int port) { return server_->listen(host, port); }

int RoutingService::bind_any_port(const std::string& host) {
  const int port = server_->bind_to_any_port(host);
  return port < 0 ? 0 : port;
}

bool RoutingService::bind(const std::string& host, int port) { return server_->bind_to_port(host, port); }

bool RoutingService::serve() { return server_->listen_after_bind(); }

void RoutingService::stop() {
  if (server_) server_->stop();
}

void RoutingService::wait_until_ready() const { server_->wait_until_ready(); }

}  // namespace wikidyk::routing

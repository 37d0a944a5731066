#pragma once

#include <memory>
#include <string>
#include <utility>

#include "wikidyk/scoperouter.hpp"

namespace httplib {
class Server;
}

namespace wikidyk::routing {

struct ServiceResponse {
  int status = 200;
  std::string body;
};

/// HTTP front of an EnsembleRouter:
///   POST /v1/answer {"question"} -> {"answer","route","scores"}
///   GET  /v1/health              -> {"status":"ok","k","scorer"}
class RoutingService {
 public:
  explicit RoutingService(std::shared_ptr<const EnsembleRouter> router);
  ~RoutingService();

  ServiceResponse handle_answer(const std::string& request_body) const;
  ServiceResponse handle_health() const;

  /// Binds and serves until stop(); returns false if the bind failed.
  bool listen(const std::string& host, int port);
  /// Binds to an ephemeral port and returns it (0 on failure); call serve() next.
  int bind_any_port(const std::string& host);
  /// Binds to a fixed port; call serve() next.
  bool bind(const std::string& host, int port);
  bool serve();
  void stop();
  void wait_until_ready() const;

 private:
  std::shared_ptr<const EnsembleRouter> router_;
  std::unique_ptr<httplib::Server> server_;
};

/// Body of a successful /v1/answer response.
Json answer_json(const RoutedAnswer& answer);

}  // namespace wikidyk::routing

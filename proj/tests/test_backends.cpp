#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <thread>

#include "httplib.h"
#include "wikidyk/backends.hpp"
#include "wikidyk/error.hpp"

using namespace wikidyk;
using namespace wikidyk::backends;

namespace {

// A scriptable endpoint on an ephemeral port.
class FakeServer {
 public:
  struct Seen {
    std::string path;
    std::string body;
    std::string auth;
  };

  FakeServer() {
    server_.Post(".*", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex_);
      seen_.push_back({req.path, req.body, req.get_header_value("Authorization")});
      handler_(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }

  void on(std::function<void(const httplib::Request&, httplib::Response&)> h) { handler_ = std::move(h); }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  std::vector<Seen> seen() {
    std::lock_guard lock(mutex_);
    return seen_;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  std::mutex mutex_;
  std::vector<Seen> seen_;
  std::function<void(const httplib::Request&, httplib::Response&)> handler_;
};

BackendSpec spec_for(const std::string& url, BackendKind kind) {
  BackendSpec s;
  s.name = "test";
  s.kind = kind;
  s.endpoint = url;
  s.timeout_ms = 2000;
  s.max_retries = 2;
  s.backoff_ms = 1;
  return s;
}

}  // namespace

TEST_CASE("prompt rendering is a single exact substitution") {
  CHECK(render_prompt(kDefaultPromptTemplate, "Who has ferried planes to points on five continents?") ==
        "Who has ferried planes to points on five continents?\nAnswer:");
  CHECK(render_prompt("Q: {question} (A)", "{question} ") == "Q: {question}  (A)");
  CHECK_THROWS_AS(render_prompt("no placeholder", "x"), InvalidInput);

  BackendSpec s;
  s.prompt_template = "{question}{question}";
  CHECK_THROWS_AS(s.validate(), InvalidInput);
  s.prompt_template = "{question}";
  s.timeout_ms = 0;
  CHECK_THROWS_AS(s.validate(), InvalidInput);
}

TEST_CASE("spec parsing") {
  auto s = BackendSpec::from_json("m", Json{{"kind", "completion"}, {"endpoint", "http://x:1"}, {"max_retries", 5}});
  CHECK(s.kind == BackendKind::Completion);
  CHECK(s.max_retries == 5);
  CHECK(s.max_new_tokens == 32);
  CHECK(s.prompt_template == "{question}\nAnswer:");
  CHECK_THROWS_AS(BackendSpec::from_json("m", Json{{"kind", "teleport"}}), InvalidInput);
  CHECK_THROWS_AS(BackendSpec::from_json("m", Json{{"endpoint", "x"}}), InvalidInput);
}

TEST_CASE("completion sends the exact wire body and strips one leading space") {
  FakeServer server;
  server.on([](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"text":"  Gold Digger"})", "application/json");
  });
  auto spec = spec_for(server.url(), BackendKind::Completion);
  auto backend = make_completion_backend(spec);
  CHECK(backend->complete("Who has ferried planes?", 16) == " Gold Digger");
  auto seen = server.seen();
  REQUIRE(seen.size() == 1);
  CHECK(seen[0].path == "/complete");
  CHECK(seen[0].body == R"({"prompt":"Who has ferried planes?\nAnswer:","max_new_tokens":16})");
  CHECK(seen[0].auth.empty());

  // Identical input, identical bytes.
  backend->complete("Who has ferried planes?", 16);
  CHECK(server.seen()[1].body == seen[0].body);
}

TEST_CASE("endpoint path prefix and bearer token") {
  FakeServer server;
  server.on([](const httplib::Request&, httplib::Response& res) { res.set_content(R"({"text":"ok"})", "application/json"); });
  ::setenv("WIKIDYK_TEST_TOKEN", "s3cret", 1);
  auto spec = spec_for(server.url() + "/v2/", BackendKind::Completion);
  spec.auth_env = "WIKIDYK_TEST_TOKEN";
  make_completion_backend(spec)->complete_raw("p", 1);
  auto seen = server.seen();
  REQUIRE(seen.size() == 1);
  CHECK(seen[0].path == "/v2/complete");
  CHECK(seen[0].auth == "Bearer s3cret");
}

TEST_CASE("retries on 5xx and 429, then succeeds") {
  FakeServer server;
  std::atomic<int> calls{0};
  server.on([&](const httplib::Request&, httplib::Response& res) {
    const int n = calls++;
    if (n == 0) {
      res.status = 503;
      res.set_content("busy", "text/plain");
    } else if (n == 1) {
      res.status = 429;
      res.set_content("slow down", "text/plain");
    } else {
      res.set_content(R"({"text":"fine"})", "application/json");
    }
  });
  auto backend = make_completion_backend(spec_for(server.url(), BackendKind::Completion));
  CHECK(backend->complete_raw("p", 1) == "fine");
  CHECK(calls.load() == 3);
}

TEST_CASE("retry budget exhausted on persistent 5xx surfaces the status") {
  FakeServer server;
  std::atomic<int> calls{0};
  server.on([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 500;
    res.set_content("internal failure", "text/plain");
  });
  auto backend = make_completion_backend(spec_for(server.url(), BackendKind::Completion));
  try {
    backend->complete_raw("p", 1);
    FAIL("expected an error");
  } catch (const HttpStatusError& e) {
    CHECK(e.status() == 500);
    CHECK(std::string(e.what()).find("internal failure") != std::string::npos);
  }
  CHECK(calls.load() == 3);  // 1 + max_retries
}

TEST_CASE("4xx is not retried") {
  FakeServer server;
  std::atomic<int> calls{0};
  server.on([&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 400;
    res.set_content("bad", "text/plain");
  });
  auto backend = make_completion_backend(spec_for(server.url(), BackendKind::Completion));
  CHECK_THROWS_AS(backend->complete_raw("p", 1), HttpStatusError);
  CHECK(calls.load() == 1);
}

TEST_CASE("transport failure retries then raises a transport error") {
  auto spec = spec_for("http://127.0.0.1:1", BackendKind::Completion);
  spec.timeout_ms = 200;
  CHECK_THROWS_AS(make_completion_backend(spec)->complete_raw("p", 1), TransportError);
}

TEST_CASE("malformed response bodies are contract errors") {
  FakeServer server;
  server.on([](const httplib::Request& req, httplib::Response& res) {
    if (req.body.find("notjson") != std::string::npos) res.set_content("<html>", "text/html");
    else res.set_content(R"({"txt":"x"})", "application/json");
  });
  auto backend = make_completion_backend(spec_for(server.url(), BackendKind::Completion));
  CHECK_THROWS_AS(backend->complete_raw("notjson", 1), ContractError);
  CHECK_THROWS_AS(backend->complete_raw("fieldless", 1), ContractError);
}

TEST_CASE("embedding batches of 64 preserve order") {
  FakeServer server;
  server.on([](const httplib::Request& req, httplib::Response& res) {
    auto body = Json::parse(req.body);
    Json out = Json::array();
    for (const auto& t : body["texts"]) out.push_back({std::stod(t.get<std::string>()), 1.0});
    res.set_content(Json{{"embeddings", out}}.dump(), "application/json");
  });
  std::vector<std::string> texts;
  for (int i = 0; i < 130; ++i) texts.push_back(std::to_string(i));
  auto backend = make_embedding_backend(spec_for(server.url(), BackendKind::Embedding));
  auto vecs = backend->embed(texts);
  REQUIRE(vecs.size() == 130);
  for (int i = 0; i < 130; ++i) CHECK(vecs[i][0] == doctest::Approx(i));
  auto seen = server.seen();
  REQUIRE(seen.size() == 3);
  CHECK(Json::parse(seen[0].body)["texts"].size() == 64);
  CHECK(Json::parse(seen[1].body)["texts"].size() == 64);
  CHECK(Json::parse(seen[2].body)["texts"].size() == 2);
  CHECK_THROWS_AS(backend->embed({}), InvalidInput);
}

TEST_CASE("embedding dimension drift across batches is rejected") {
  FakeServer server;
  std::atomic<int> calls{0};
  server.on([&](const httplib::Request& req, httplib::Response& res) {
    const std::size_t dim = calls++ == 0 ? 2 : 3;
    Json out = Json::array();
    for (std::size_t i = 0; i < Json::parse(req.body)["texts"].size(); ++i) out.push_back(std::vector<double>(dim, 0.5));
    res.set_content(Json{{"embeddings", out}}.dump(), "application/json");
  });
  auto spec = spec_for(server.url(), BackendKind::Embedding);
  spec.batch_size = 2;
  CHECK_THROWS_AS(make_embedding_backend(spec)->embed({"a", "b", "c"}), ContractError);
}

TEST_CASE("classifier shape and range checks") {
  FakeServer server;
  server.on([](const httplib::Request& req, httplib::Response& res) {
    auto texts = Json::parse(req.body)["texts"];
    Json out = Json::array();
    for (std::size_t i = 0; i < texts.size(); ++i) {
      if (texts[i] == "bad") out.push_back({0.1, 1.3, 0.0});
      else out.push_back({static_cast<double>(i) / 10.0, 0.0, 1.0});
    }
    res.set_content(Json{{"scores", out}}.dump(), "application/json");
  });
  auto spec = spec_for(server.url(), BackendKind::Classifier);
  spec.k = 3;
  auto clf = make_classifier_backend(spec);
  auto one = clf->classify({"q"});
  REQUIRE(one.size() == 1);
  CHECK(one[0].size() == 3);
  auto many = clf->classify({"a", "b", "c", "d"});
  for (std::size_t i = 0; i < many.size(); ++i) CHECK(many[i][0] == doctest::Approx(i / 10.0));
  CHECK_THROWS_AS(clf->classify({"bad"}), ContractError);

  spec.k = 4;
  CHECK_THROWS_AS(make_classifier_backend(spec)->classify({"q"}), ContractError);
}

TEST_CASE("in-flight requests never exceed the configured bound") {
  FakeServer server;
  std::atomic<int> current{0}, peak{0};
  server.on([&](const httplib::Request&, httplib::Response& res) {
    const int now = ++current;
    int p = peak.load();
    while (now > p && !peak.compare_exchange_weak(p, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    --current;
    res.set_content(R"({"text":"x"})", "application/json");
  });
  auto spec = spec_for(server.url(), BackendKind::Completion);
  spec.max_in_flight = 2;
  auto backend = make_completion_backend(spec);
  std::vector<std::jthread> clients;
  for (int i = 0; i < 8; ++i) clients.emplace_back([&] { backend->complete_raw("p", 1); });
  clients.clear();
  CHECK(peak.load() <= 2);
  CHECK(peak.load() >= 1);
}

TEST_CASE("mock memorizer: exact recall on normalized text, fallback otherwise") {
  MockMemorizer m;
  m.add("  Who sang   Gold Digger? ", "Kanye West");
  CHECK(m.complete("Who sang Gold Digger?", 32) == "Kanye West");
  CHECK(m.complete_raw("Who sang Gold Digger?\nAnswer:", 32) == "Kanye West");
  CHECK(m.complete("who sang gold digger?", 32) == "UNKNOWN");

  const auto path = std::filesystem::temp_directory_path() / "wikidyk_mock_store.jsonl";
  write_file(path, R"({"question":"q1","answer":"a1"})" "\n" R"({"question":"q2","answer":"a2"})" "\n");
  BackendSpec s;
  s.name = "mem";
  s.kind = BackendKind::MockMemorizer;
  s.store_path = path.string();
  s.fallback = "NOPE";
  auto b = make_completion_backend(s);
  CHECK(b->complete("q2", 1) == "a2");
  CHECK(b->complete("q3", 1) == "NOPE");
  std::filesystem::remove(path);
}

TEST_CASE("mock embedding is deterministic and unit norm") {
  HashEmbedding e(32);
  auto v = e.embed({"The same text", "The same text", "", "other words"});
  CHECK(v[0] == v[1]);
  CHECK(v[0] != v[3]);
  for (const auto& row : v) {
    double n = 0;
    for (double x : row) n += x * x;
    CHECK(n == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(e.embed({}), InvalidInput);
}

TEST_CASE("factories refuse the wrong kind") {
  BackendSpec s;
  s.name = "x";
  s.kind = BackendKind::Embedding;
  s.endpoint = "mock://hash";
  CHECK_THROWS_AS(make_completion_backend(s), InvalidInput);
  CHECK_NOTHROW(make_embedding_backend(s));
  s.kind = BackendKind::Completion;
  s.endpoint = "mock://echo";
  CHECK(make_completion_backend(s)->complete("q", 1) == "q\nAnswer:");
  s.endpoint = "https://api.example.org/v1";
  CHECK_THROWS_AS(make_completion_backend(s), InvalidInput);
  s.endpoint = "ftp://host";
  CHECK_THROWS_AS(s.validate(), InvalidInput);
}

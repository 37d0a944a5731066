#include "wikidyk/backends.hpp"

#include <cmath>
#include <cstdlib>
#include <thread>

#include "httplib.h"
#include "wikidyk/error.hpp"

namespace wikidyk::backends {

std::string_view to_string(BackendKind kind) {
  switch (kind) {
    case BackendKind::Completion: return "completion";
    case BackendKind::Embedding: return "embedding";
    case BackendKind::Classifier: return "classifier";
    case BackendKind::MockMemorizer: return "mock_memorizer";
  }
  return "unknown";
}

BackendKind backend_kind_from_string(std::string_view name) {
  const std::string n = to_lower(name);
  if (n == "completion") return BackendKind::Completion;
  if (n == "embedding") return BackendKind::Embedding;
  if (n == "classifier") return BackendKind::Classifier;
  if (n == "mock_memorizer" || n == "mockmemorizer" || n == "mock") return BackendKind::MockMemorizer;
  throw InvalidInput("unknown backend kind '" + std::string(name) + "'");
}

void BackendSpec::validate() const {
  if (count_occurrences(prompt_template, "{question}") != 1) {
    throw InvalidInput("backend " + name + ": prompt_template must contain {question} exactly once");
  }
  if (timeout_ms <= 0) throw InvalidInput("backend " + name + ": timeout_ms must be > 0");
  if (max_retries < 0) throw InvalidInput("backend " + name + ": max_retries must be >= 0");
  if (max_in_flight < 1 || max_in_flight > 1024) {
    throw InvalidInput("backend " + name + ": max_in_flight must be in [1, 1024]");
  }
  if (batch_size == 0) throw InvalidInput("backend " + name + ": batch_size must be > 0");
  if (kind != BackendKind::MockMemorizer && endpoint.empty()) {
    throw InvalidInput("backend " + name + ": endpoint required");
  }
  if (!endpoint.empty() && !endpoint.starts_with("http://") && !endpoint.starts_with("mock://")) {
    throw InvalidInput("backend " + name + ": endpoint must use http:// or mock:// (TLS is not built in)");
  }
}

BackendSpec BackendSpec::from_json(std::string name, const Json& j) {
  BackendSpec s;
  s.name = std::move(name);
  try {
    s.kind = backend_kind_from_string(j.at("kind").get<std::string>());
    s.endpoint = j.value("endpoint", std::string{});
    s.auth_env = j.value("auth_env", std::string{});
    s.timeout_ms = j.value("timeout_ms", s.timeout_ms);
    s.max_retries = j.value("max_retries", s.max_retries);
    s.backoff_ms = j.value("backoff_ms", s.backoff_ms);
    s.prompt_template = j.value("prompt_template", s.prompt_template);
    s.max_in_flight = j.value("max_in_flight", s.max_in_flight);
    s.requests_per_second = j.value("requests_per_second", s.requests_per_second);
    s.batch_size = j.value("batch_size", s.batch_size);
    s.max_new_tokens = j.value("max_new_tokens", s.max_new_tokens);
    s.k = j.value("k", s.k);
    s.embedding_dim = j.value("embedding_dim", s.embedding_dim);
    s.store_path = j.value("store_path", std::string{});
    s.fallback = j.value("fallback", s.fallback);
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("backend " + s.name + ": " + e.what());
  }
  s.validate();
  return s;
}

std::string render_prompt(std::string_view prompt_template, std::string_view question) {
  const auto pos = prompt_template.find("{question}");
  if (pos == std::string_view::npos) throw InvalidInput("prompt template lacks {question}");
  std::string out;
  out.reserve(prompt_template.size() + question.size());
  out.append(prompt_template.substr(0, pos));
  out.append(question);
  out.append(prompt_template.substr(pos + 10));
  return out;
}

std::string CompletionBackend::complete(const std::string& question, int max_new_tokens) {
  return complete_raw(render_prompt(prompt_template(), question), max_new_tokens);
}

// ---------------------------------------------------------------------------
// HTTP transport

namespace {

class HttplibTransport final : public Transport {
 public:
  explicit HttplibTransport(const BackendSpec& spec) {
    std::string endpoint = spec.endpoint;
    const auto scheme_end = endpoint.find("://");
    const auto path_start = endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    base_ = endpoint.substr(0, path_start);
    if (path_start != std::string::npos) prefix_ = endpoint.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
    timeout_ = std::chrono::milliseconds(spec.timeout_ms);
    if (!spec.auth_env.empty()) {
      if (const char* token = std::getenv(spec.auth_env.c_str())) {
        headers_.emplace("Authorization", std::string("Bearer ") + token);
      }
    }
  }

  HttpResponse post(const std::string& path, const std::string& body) override {
    httplib::Client client(base_);
    client.set_connection_timeout(timeout_);
    client.set_read_timeout(timeout_);
    client.set_write_timeout(timeout_);
    auto res = client.Post(prefix_ + path, headers_, body, "application/json");
    if (!res) {
      throw TransportError("POST " + base_ + prefix_ + path + " failed: " + httplib::to_string(res.error()));
    }
    return {res->status, res->body};
  }

 private:
  std::string base_;
  std::string prefix_;
  std::chrono::milliseconds timeout_{30000};
  httplib::Headers headers_;
};

bool retryable_status(int status) { return status == 429 || status >= 500; }

}  // namespace

std::shared_ptr<Transport> make_http_transport(const BackendSpec& spec) {
  return std::make_shared<HttplibTransport>(spec);
}

RateLimiter::RateLimiter(double per_second)
    : interval_s_(per_second > 0 ? 1.0 / per_second : 0.0), next_(std::chrono::steady_clock::now()) {}

void RateLimiter::acquire() {
  if (interval_s_ <= 0) return;
  std::chrono::steady_clock::time_point slot;
  {
    std::lock_guard lock(mutex_);
    const auto now = std::chrono::steady_clock::now();
    slot = std::max(now, next_);
    next_ = slot + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                       std::chrono::duration<double>(interval_s_));
  }
  std::this_thread::sleep_until(slot);
}

JsonEndpoint::JsonEndpoint(const BackendSpec& spec, std::shared_ptr<Transport> transport)
    : spec_(spec),
      transport_(std::move(transport)),
      in_flight_(spec.max_in_flight),
      limiter_(spec.requests_per_second) {}

Json JsonEndpoint::post(const std::string& path, const Json& body) {
  const std::string payload = body.dump();
  for (int attempt = 0;; ++attempt) {
    limiter_.acquire();
    HttpResponse res;
    bool transient = false;
    std::string failure;
    in_flight_.acquire();
    try {
      ++requests_;
      res = transport_->post(path, payload);
      in_flight_.release();
    } catch (const TransportError& e) {
      in_flight_.release();
      transient = true;
      failure = e.what();
    } catch (...) {
      in_flight_.release();
      throw;
    }
    if (!transient && retryable_status(res.status) && attempt < spec_.max_retries) transient = true;
    if (transient) {
      if (attempt >= spec_.max_retries) {
        throw TransportError(spec_.name + ": giving up after " + std::to_string(attempt + 1) +
                             " attempts: " + failure);
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(spec_.backoff_ms) * (1LL << std::min(attempt, 20)));
      continue;
    }
    if (res.status < 200 || res.status >= 300) {
      throw HttpStatusError(res.status, res.body.substr(0, 200));
    }
    try {
      return Json::parse(res.body);
    } catch (const nlohmann::json::parse_error&) {
      throw ContractError(spec_.name + ": response is not JSON: " + res.body.substr(0, 200));
    }
  }
}

HttpCompletion::HttpCompletion(const BackendSpec& spec, std::shared_ptr<Transport> transport)
    : template_(spec.prompt_template), endpoint_(spec, std::move(transport)) {}

std::string HttpCompletion::complete_raw(const std::string& prompt, int max_new_tokens) {
  Json body;
  body["prompt"] = prompt;
  body["max_new_tokens"] = max_new_tokens;
  Json res = endpoint_.post("/complete", body);
  if (!res.is_object() || !res.contains("text") || !res["text"].is_string()) {
    throw ContractError("completion response lacks string field 'text'");
  }
  std::string text = res["text"].get<std::string>();
  if (!text.empty() && text.front() == ' ') text.erase(0, 1);
  return text;
}

namespace {

std::vector<std::vector<double>> parse_matrix(const Json& res, const char* field, std::size_t rows) {
  if (!res.is_object() || !res.contains(field) || !res[field].is_array()) {
    throw ContractError(std::string("response lacks array field '") + field + "'");
  }
  const Json& arr = res[field];
  if (arr.size() != rows) {
    throw ContractError(std::string(field) + ": expected " + std::to_string(rows) + " rows, got " +
                        std::to_string(arr.size()));
  }
  std::vector<std::vector<double>> out;
  out.reserve(rows);
  for (const auto& row : arr) {
    if (!row.is_array()) throw ContractError(std::string(field) + ": row is not an array");
    std::vector<double> v;
    v.reserve(row.size());
    for (const auto& x : row) {
      if (!x.is_number()) throw ContractError(std::string(field) + ": non-numeric entry");
      const double d = x.get<double>();
      if (!std::isfinite(d)) throw ContractError(std::string(field) + ": non-finite entry");
      v.push_back(d);
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace

HttpEmbedding::HttpEmbedding(const BackendSpec& spec, std::shared_ptr<Transport> transport)
    : batch_size_(spec.batch_size), endpoint_(spec, std::move(transport)) {}

std::vector<std::vector<double>> HttpEmbedding::embed(const std::vector<std::string>& texts) {
  if (texts.empty()) throw InvalidInput("embed: empty text list");
  std::vector<std::vector<double>> out;
  out.reserve(texts.size());
  for (std::size_t start = 0; start < texts.size(); start += batch_size_) {
    const std::size_t stop = std::min(texts.size(), start + batch_size_);
    Json body;
    body["texts"] = std::vector<std::string>(texts.begin() + static_cast<std::ptrdiff_t>(start),
                                             texts.begin() + static_cast<std::ptrdiff_t>(stop));
    auto rows = parse_matrix(endpoint_.post("/embed", body), "embeddings", stop - start);
    for (auto& row : rows) {
      const std::size_t dim = out.empty() ? row.size() : out.front().size();
      if (row.empty() || row.size() != dim) {
        throw ContractError("embed: inconsistent embedding dimension " + std::to_string(row.size()) +
                            " vs " + std::to_string(dim));
      }
      out.push_back(std::move(row));
    }
  }
  return out;
}

HttpClassifier::HttpClassifier(const BackendSpec& spec, std::shared_ptr<Transport> transport)
    : k_(spec.k), endpoint_(spec, std::move(transport)) {}

std::vector<std::vector<double>> HttpClassifier::classify(const std::vector<std::string>& texts) {
  if (texts.empty()) throw InvalidInput("classify: empty text list");
  Json body;
  body["texts"] = texts;
  auto rows = parse_matrix(endpoint_.post("/classify", body), "scores", texts.size());
  const std::size_t k = k_ ? k_ : rows.front().size();
  for (const auto& row : rows) {
    if (row.size() != k) {
      throw ContractError("classify: expected " + std::to_string(k) + " scores, got " + std::to_string(row.size()));
    }
    for (double x : row) {
      if (x < 0.0 || x > 1.0) throw ContractError("classify: score " + std::to_string(x) + " outside [0,1]");
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// In-process backends

MockMemorizer::MockMemorizer(std::string fallback, std::string prompt_template)
    : fallback_(std::move(fallback)), template_(std::move(prompt_template)) {}

void MockMemorizer::add(std::string_view question, std::string answer) {
  entries_[normalize_space(question)] = std::move(answer);
}

void MockMemorizer::load(const std::filesystem::path& path) {
  read_jsonl(path, [&](const Json& j, std::size_t line) {
    if (!j.contains("question") || !j.contains("answer")) {
      throw InvalidInput(path.string() + ":" + std::to_string(line) + ": expected question and answer");
    }
    add(j["question"].get<std::string>(), j["answer"].get<std::string>());
  });
}

std::string MockMemorizer::complete(const std::string& question, int) {
  auto it = entries_.find(normalize_space(question));
  return it == entries_.end() ? fallback_ : it->second;
}

std::string MockMemorizer::complete_raw(const std::string& prompt, int max_new_tokens) {
  // Undo the template when the prompt was rendered from it.
  const auto pos = template_.find("{question}");
  const std::string_view head = std::string_view(template_).substr(0, pos);
  const std::string_view tail = std::string_view(template_).substr(pos + 10);
  std::string_view p = prompt;
  if (p.size() >= head.size() + tail.size() && p.substr(0, head.size()) == head &&
      p.substr(p.size() - tail.size()) == tail) {
    p = p.substr(head.size(), p.size() - head.size() - tail.size());
  }
  return complete(std::string(p), max_new_tokens);
}

HashEmbedding::HashEmbedding(int dim) : dim_(dim) {
  if (dim < 2) throw InvalidInput("hash embedding dimension must be >= 2");
}

std::vector<double> HashEmbedding::embed_one(std::string_view text) const {
  std::vector<double> v(static_cast<std::size_t>(dim_), 0.0);
  for (const auto& token : split_whitespace(to_lower(text))) {
    std::string word;
    for (char c : token) {
      if (std::isalnum(static_cast<unsigned char>(c)) || static_cast<unsigned char>(c) >= 0x80) word.push_back(c);
    }
    if (word.empty()) continue;
    const std::uint64_t h = fnv1a64(word);
    v[h % static_cast<std::uint64_t>(dim_)] += ((h >> 63) ? -1.0 : 1.0);
  }
  double norm = 0;
  for (double x : v) norm += x * x;
  if (norm == 0) {
    v[0] = 1.0;
    return v;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;
  return v;
}

std::vector<std::vector<double>> HashEmbedding::embed(const std::vector<std::string>& texts) {
  if (texts.empty()) throw InvalidInput("embed: empty text list");
  std::vector<std::vector<double>> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(embed_one(t));
  return out;
}

namespace {
bool is_mock(const BackendSpec& spec, std::string_view what) {
  return spec.endpoint == std::string("mock://") + std::string(what);
}
}  // namespace

std::shared_ptr<CompletionBackend> make_completion_backend(const BackendSpec& spec) {
  spec.validate();
  if (spec.kind == BackendKind::MockMemorizer) {
    auto mock = std::make_shared<MockMemorizer>(spec.fallback, spec.prompt_template);
    if (!spec.store_path.empty()) mock->load(spec.store_path);
    return mock;
  }
  if (spec.kind != BackendKind::Completion) {
    throw InvalidInput("backend " + spec.name + " is not a completion backend");
  }
  if (is_mock(spec, "echo")) return std::make_shared<EchoCompletion>(spec.prompt_template);
  return std::make_shared<HttpCompletion>(spec, make_http_transport(spec));
}

std::shared_ptr<EmbeddingBackend> make_embedding_backend(const BackendSpec& spec) {
  spec.validate();
  if (spec.kind != BackendKind::Embedding) {
    throw InvalidInput("backend " + spec.name + " is not an embedding backend");
  }
  if (is_mock(spec, "hash")) return std::make_shared<HashEmbedding>(spec.embedding_dim);
  return std::make_shared<HttpEmbedding>(spec, make_http_transport(spec));
}

std::shared_ptr<ClassifierBackend> make_classifier_backend(const BackendSpec& spec) {
  spec.validate();
  if (spec.kind != BackendKind::Classifier) {
    throw InvalidInput("backend " + spec.name + " is not a classifier backend");
  }
  return std::make_shared<HttpClassifier>(spec, make_http_transport(spec));
}

}  // namespace wikidyk::backends

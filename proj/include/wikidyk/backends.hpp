#pragma once

#include <atomic>
#include <chrono>
#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <vector>

#include "wikidyk/util.hpp"

namespace wikidyk::backends {

enum class BackendKind { Completion, Embedding, Classifier, MockMemorizer };

std::string_view to_string(BackendKind kind);
BackendKind backend_kind_from_string(std::string_view name);

inline constexpr std::string_view kDefaultPromptTemplate = "{question}\nAnswer:";

/// Configuration of one backend. Endpoints with the "mock://" scheme select
/// in-process implementations (mock://echo, mock://hash) for desk runs.
struct BackendSpec {
  std::string name;
  BackendKind kind = BackendKind::Completion;
  std::string endpoint;
  /// Name of the environment variable holding a bearer token, if any.
  std::string auth_env;
  int timeout_ms = 30000;
  int max_retries = 3;
  int backoff_ms = 200;
  std::string prompt_template{kDefaultPromptTemplate};
  int max_in_flight = 8;
  double requests_per_second = 0.0;  // 0 = unlimited
  std::size_t batch_size = 64;
  int max_new_tokens = 32;
  /// Classifier output width; 0 = accept any consistent width.
  std::size_t k = 0;
  int embedding_dim = 64;
  /// MockMemorizer: questions.jsonl-shaped file to load.
  std::string store_path;
  std::string fallback = "UNKNOWN";

  void validate() const;
  static BackendSpec from_json(std::string name, const Json& j);
};

/// Substitutes the single "{question}" placeholder; nothing else changes.
std::string render_prompt(std::string_view prompt_template, std::string_view question);

class CompletionBackend {
 public:
  virtual ~CompletionBackend() = default;
  /// Sends a fully formed prompt.
  virtual std::string complete_raw(const std::string& prompt, int max_new_tokens) = 0;
  /// Renders the question through the prompt template, then completes.
  virtual std::string complete(const std::string& question, int max_new_tokens);
  virtual const std::string& prompt_template() const = 0;
};

class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) = 0;
};

class ClassifierBackend {
 public:
  virtual ~ClassifierBackend() = default;
  virtual std::vector<std::vector<double>> classify(const std::vector<std::string>& texts) = 0;
};

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// One POST of a JSON body. Throws TransportError on connection failure.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpResponse post(const std::string& path, const std::string& body) = 0;
};

std::shared_ptr<Transport> make_http_transport(const BackendSpec& spec);

/// Token bucket; acquire() blocks until a request may be sent.
class RateLimiter {
 public:
  explicit RateLimiter(double per_second);
  void acquire();

 private:
  double interval_s_;
  std::mutex mutex_;
  std::chrono::steady_clock::time_point next_;
};

/// Shared request path for the HTTP clients: in-flight cap, rate limit,
/// retry with exponential backoff on transport errors, 429 and 5xx.
class JsonEndpoint {
 public:
  JsonEndpoint(const BackendSpec& spec, std::shared_ptr<Transport> transport);
  Json post(const std::string& path, const Json& body);
  std::size_t requests_sent() const noexcept { return requests_; }

 private:
  BackendSpec spec_;
  std::shared_ptr<Transport> transport_;
  std::counting_semaphore<1024> in_flight_;
  RateLimiter limiter_;
  std::atomic<std::size_t> requests_{0};
};

class HttpCompletion final : public CompletionBackend {
 public:
  HttpCompletion(const BackendSpec& spec, std::shared_ptr<Transport> transport);
  std::string complete_raw(const std::string& prompt, int max_new_tokens) override;
  const std::string& prompt_template() const override { return template_; }

 private:
  std::string template_;
  JsonEndpoint endpoint_;
};

class HttpEmbedding final : public EmbeddingBackend {
 public:
  HttpEmbedding(const BackendSpec& spec, std::shared_ptr<Transport> transport);
  std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) override;

 private:
  std::size_t batch_size_;
  JsonEndpoint endpoint_;
};

class HttpClassifier final : public ClassifierBackend {
 public:
  HttpClassifier(const BackendSpec& spec, std::shared_ptr<Transport> transport);
  std::vector<std::vector<double>> classify(const std::vector<std::string>& texts) override;

 private:
  std::size_t k_;
  JsonEndpoint endpoint_;
};

/// Exact-recall store keyed by whitespace-normalized question text.
class MockMemorizer final : public CompletionBackend {
 public:
  explicit MockMemorizer(std::string fallback = "UNKNOWN",
                         std::string prompt_template = std::string(kDefaultPromptTemplate));

  void add(std::string_view question, std::string answer);
  /// Loads every {"question","answer"} object from a JSONL file.
  void load(const std::filesystem::path& path);

  std::string complete(const std::string& question, int max_new_tokens) override;
  std::string complete_raw(const std::string& prompt, int max_new_tokens) override;
  const std::string& prompt_template() const override { return template_; }
  std::size_t size() const noexcept { return entries_.size(); }

 private:
  std::map<std::string, std::string> entries_;
  std::string fallback_;
  std::string template_;
};

/// Returns the prompt itself; useful to check what reached the model.
class EchoCompletion final : public CompletionBackend {
 public:
  explicit EchoCompletion(std::string prompt_template = std::string(kDefaultPromptTemplate))
      : template_(std::move(prompt_template)) {}
  std::string complete_raw(const std::string& prompt, int) override { return prompt; }
  const std::string& prompt_template() const override { return template_; }

 private:
  std::string template_;
};

/// Deterministic bag-of-words feature hashing onto the unit sphere.
class HashEmbedding final : public EmbeddingBackend {
 public:
  explicit HashEmbedding(int dim = 64);
  std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) override;
  std::vector<double> embed_one(std::string_view text) const;

 private:
  int dim_;
};

std::shared_ptr<CompletionBackend> make_completion_backend(const BackendSpec& spec);
std::shared_ptr<EmbeddingBackend> make_embedding_backend(const BackendSpec& spec);
std::shared_ptr<ClassifierBackend> make_classifier_backend(const BackendSpec& spec);

}  // namespace wikidyk::backends

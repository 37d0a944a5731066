#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "wikidyk/error.hpp"
#include "wikidyk/ragstore.hpp"
#include "wikidyk/rng.hpp"

using namespace wikidyk;
using namespace wikidyk::rag;

namespace {

// Looks vectors up by exact text; optionally fails whole batches.
class TableEmbedding final : public backends::EmbeddingBackend {
 public:
  std::map<std::string, std::vector<double>> table;
  bool fail_batches = false;
  int fail_single_times = 0;
  int calls = 0;

  std::vector<std::vector<double>> embed(const std::vector<std::string>& texts) override {
    ++calls;
    if (fail_batches && texts.size() > 1) throw TransportError("batch refused");
    if (texts.size() == 1 && fail_single_times > 0) {
      --fail_single_times;
      throw TransportError("flaky");
    }
    std::vector<std::vector<double>> out;
    for (const auto& t : texts) out.push_back(table.at(t));
    return out;
  }
};

std::vector<Hit> brute_force(const RagIndex& index, const std::vector<double>& q, std::size_t k) {
  double qn = 0;
  for (double x : q) qn += x * x;
  qn = std::sqrt(qn);
  std::vector<Hit> all;
  for (std::size_t i = 0; i < index.size(); ++i) {
    double dot = 0;
    for (std::size_t c = 0; c < q.size(); ++c) dot += static_cast<double>(index.vector(i)[c]) * q[c];
    all.push_back({index.doc_ids()[i], dot / qn});
  }
  std::stable_sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) {
    return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
  });
  all.resize(std::min(k, all.size()));
  return all;
}

}  // namespace

TEST_CASE("utf-8 truncation never splits a code point") {
  CHECK(truncate_utf8("hello", 10) == "hello");
  CHECK(truncate_utf8("hello", 3) == "hel");
  const std::string s = "ab\xC3\xA9" "cd";  // "abécd"
  CHECK(truncate_utf8(s, 3) == "ab");
  CHECK(truncate_utf8(s, 4) == "ab\xC3\xA9");
  const std::string emoji = "\xF0\x9F\x98\x80z";
  CHECK(truncate_utf8(emoji, 2).empty());
  CHECK(truncate_utf8(emoji, 4) == "\xF0\x9F\x98\x80");
}

TEST_CASE("build_index normalizes rows and records metadata") {
  TableEmbedding emb;
  emb.table = {{"alpha text", {3, 4}}, {"beta text", {0, 2}}};
  auto index = build_index({{"A", "Alpha", "alpha text"}, {"B", "Beta", "beta text"}}, emb);
  REQUIRE(index.size() == 2);
  CHECK(index.dim() == 2);
  CHECK(index.vector(0)[0] == doctest::Approx(0.6));
  CHECK(index.vector(0)[1] == doctest::Approx(0.8));
  CHECK(index.vector(1)[1] == doctest::Approx(1.0));
  CHECK(index.meta.at("B").first == "Beta");
  CHECK(emb.calls == 1);
}

TEST_CASE("build_index rejects duplicates, empty text and zero vectors") {
  TableEmbedding emb;
  emb.table = {{"x", {1, 0}}, {"zero", {0, 0}}};
  CHECK_THROWS_AS(build_index({{"A", "A", "x"}, {"A", "A", "x"}}, emb), InvalidInput);
  CHECK_THROWS_AS(build_index({{"A", "A", "  "}}, emb), InvalidInput);
  CHECK_THROWS_AS(build_index({{"Z", "Z", "zero"}}, emb), ContractError);
  CHECK(build_index({}, emb).empty());
}

TEST_CASE("a refused batch falls back to per-document embedding with retries") {
  TableEmbedding emb;
  emb.table = {{"a", {1, 0}}, {"b", {0, 1}}};
  emb.fail_batches = true;
  emb.fail_single_times = 2;
  auto index = build_index({{"A", "A", "a"}, {"B", "B", "b"}}, emb);
  CHECK(index.size() == 2);
  // one batch call, two failures plus two successes one document at a time
  CHECK(emb.calls == 5);

  TableEmbedding hopeless;
  hopeless.table = emb.table;
  hopeless.fail_batches = true;
  hopeless.fail_single_times = 100;
  CHECK_THROWS_AS(build_index({{"A", "A", "a"}, {"B", "B", "b"}}, hopeless, {1500, 2}), Error);
}

TEST_CASE("texts are truncated to the char budget before embedding") {
  TableEmbedding emb;
  emb.table = {{"abcd", {1, 1}}};
  auto index = build_index({{"A", "A", "abcdefgh"}}, emb, {4, 0});
  CHECK(index.size() == 1);
  CHECK(index.meta.at("A").second == "abcdefgh");
}

TEST_CASE("top-k retrieval matches a brute-force ranking") {
  Rng rng(17);
  const std::size_t n = 200, d = 8;
  std::vector<std::string> ids;
  std::vector<float> blob;
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back("doc" + std::to_string(i));
    std::vector<double> v(d);
    double norm = 0;
    for (auto& x : v) {
      x = rng.normal();
      norm += x * x;
    }
    for (double x : v) blob.push_back(static_cast<float>(x / std::sqrt(norm)));
  }
  RagIndex index(ids, d, blob);
  for (int q = 0; q < 100; ++q) {
    std::vector<double> query(d);
    for (auto& x : query) x = rng.normal();
    const std::size_t k = 1 + rng.below(10);
    auto got = retrieve_topk(index, query, k);
    auto want = brute_force(index, query, k);
    REQUIRE(got.hits.size() == want.size());
    for (std::size_t i = 0; i < k; ++i) {
      CHECK(got.hits[i].doc_id == want[i].doc_id);
      CHECK(got.hits[i].score == doctest::Approx(want[i].score));
    }
    CHECK_FALSE(got.k_clamped);
  }
}

TEST_CASE("ties break by doc_id, oversize k is clamped, bad queries rejected") {
  RagIndex index({"b", "a", "c"}, 2, {1, 0, 1, 0, 0, 1});
  const std::vector<double> q = {2, 0};
  auto r = retrieve_topk(index, q, 5);
  CHECK(r.k_clamped);
  REQUIRE(r.hits.size() == 3);
  CHECK(r.hits[0].doc_id == "a");
  CHECK(r.hits[1].doc_id == "b");
  CHECK(r.hits[0].score == doctest::Approx(1.0));
  CHECK(r.hits[2].doc_id == "c");
  CHECK_THROWS_AS(retrieve_topk(index, q, 0), InvalidInput);
  CHECK_THROWS_AS(retrieve_topk(index, std::vector<double>{1, 0, 0}, 1), InvalidInput);
  CHECK_THROWS_AS(retrieve_topk(index, std::vector<double>{0, 0}, 1), InvalidInput);
  CHECK_THROWS_AS(retrieve_topk(RagIndex{}, q, 1), InvalidInput);
}

TEST_CASE("each article text retrieves itself first under the hash embedder") {
  backends::HashEmbedding emb(128);
  std::vector<Article> articles;
  for (int i = 0; i < 30; ++i) {
    articles.push_back({"d" + std::to_string(i), "Title " + std::to_string(i),
                        "entity" + std::to_string(i) + " lived in town" + std::to_string(i * 7) + " and wrote books"});
  }
  auto index = build_index(articles, emb);
  for (const auto& a : articles) {
    auto r = retrieve_topk(index, a.text, 3, emb);
    CHECK(r.hits.front().doc_id == a.doc_id);
  }
}

TEST_CASE("prompt assembly layout") {
  auto p = assemble_rag_prompt("Who?", {{"T1", "first text"}, {"T2", "second text"}}, 6);
  CHECK(p == "Context:\n[1] T1: first \n[2] T2: second\n\nWho?\nAnswer:");
  CHECK_THROWS_AS(assemble_rag_prompt("Who?", {}), InvalidInput);
  auto custom = assemble_rag_prompt("Why?", {{"T", "x"}}, 10, "Q: {question} A:");
  CHECK(custom == "Context:\n[1] T: x\n\nQ: Why? A:");
}

TEST_CASE("index file round trip and corruption") {
  RagIndex index({"x", "y\"quoted"}, 3, {0.1f, -0.2f, 0.3f, 1e-30f, 7.5f, -0.0f});
  const auto dir = std::filesystem::temp_directory_path() / "wikidyk_rag_rt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "index.bin";
  save_index(path, index);
  auto back = load_index(path);
  CHECK(back == index);
  const auto bytes = read_file(path);
  CHECK(bytes.starts_with("{\"n\":2,\"d\":3}\n{\"doc_id\":\"x\",\"vector_offset\":0}\n"));
  save_index(path, back);
  CHECK(read_file(path) == bytes);

  write_file(path, bytes.substr(0, bytes.size() - 1));
  CHECK_THROWS_AS(load_index(path), InvalidInput);
  write_file(path, "{\"n\":1}\n");
  CHECK_THROWS_AS(load_index(path), InvalidInput);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_index(path), MissingInput);
}

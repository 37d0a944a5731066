#include "wikidyk/qagen.hpp"

#include <algorithm>
#include <cctype>
#include <mutex>
#include <set>
#include <thread>
#include <variant>

#include "wikidyk/parallel.hpp"

namespace wikidyk::qagen {

using corpus::FactRecord;

std::string_view to_string(Dimension d) {
  switch (d) {
    case Dimension::Reliability: return "Reliability";
    case Dimension::Generality: return "Generality";
    case Dimension::Paraphrase: return "Paraphrase";
    case Dimension::Portability: return "Portability";
    case Dimension::Locality: return "Locality";
    case Dimension::Training: return "Training";
  }
  return "Unknown";
}

Dimension dimension_from_string(std::string_view name) {
  const std::string lowered = to_lower(name);
  for (Dimension d : kAllDimensions) {
    if (to_lower(to_string(d)) == lowered) return d;
  }
  throw InvalidInput("unknown dimension '" + std::string(name) + "'");
}

Json to_json(const QAItem& item) {
  Json j;
  j["fact_id"] = item.fact_id;
  j["dimension"] = to_string(item.dimension);
  j["question"] = item.question;
  j["answer"] = item.answer;
  j["meta"] = Json::object();
  for (const auto& [k, v] : item.meta) j["meta"][k] = v;
  return j;
}

QAItem qa_from_json(const Json& j) {
  QAItem item;
  try {
    item.fact_id = j.at("fact_id").get<std::string>();
    item.dimension = dimension_from_string(j.at("dimension").get<std::string>());
    item.question = j.at("question").get<std::string>();
    item.answer = j.at("answer").get<std::string>();
    if (j.contains("meta") && j["meta"].is_object()) {
      for (const auto& [k, v] : j["meta"].items()) item.meta[k] = v.is_string() ? v.get<std::string>() : v.dump();
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("malformed question record: ") + e.what());
  }
  return item;
}

std::vector<QAItem> load_questions(const std::filesystem::path& path) {
  std::vector<QAItem> items;
  read_jsonl(path, [&](const Json& j, std::size_t) { items.push_back(qa_from_json(j)); });
  return items;
}

void save_questions(const std::filesystem::path& path, const std::vector<QAItem>& items) {
  JsonlWriter out(path);
  for (const auto& item : items) out.write(to_json(item));
}

// ---------------------------------------------------------------------------
// Prompts

namespace {

constexpr std::string_view kReliabilityPrompt =
    R"(Given a DYK fact in JSON format containing 'text' and 'bold_entity' fields, generate a question. Your output should be a JSON object containing the question with its corresponding answer. Your response should follow these criteria:

1. The question should be answerable using only the information provided in the fact
2. The answer should be the bold_entity
3. The question should be clear, natural, and specific so that the answer can be easily identified (i.e., use as many details as possible from the fact)
4. The bold entity should not be mentioned in the question since it is the answer. But make sure that the question's answer is the bold entity.

Example:
Input:
{
   'text': 'that Margrit Waltz has ferried planes to points on five continents?',
   'bold_entity': 'Margrit Waltz',
}

Expected output:
{
    "question": {
        "text": "Who has ferried planes to points on five continents?",
        "answer": "Margrit Waltz"
    }
}

Now please generate a question with answer for this fact:
{test_example})";

constexpr std::string_view kParaphrasePrompt =
    R"(Given a pair of question and answer, generate three different paraphrases of the question. Make sure the answer is the same as before. Your output should be a JSON object with a list of dictionaries under the key "paraphrases". Each dictionary should have a "question" key and an "answer" key. Here is the pair of question and answer:

Question: {question}
Answer: {answer})";

constexpr std::string_view kGeneralityPrompt =
    R"(Given a pair of question and answer, generate three different alternative questions. Make sure the question asks about a different aspect of the same fact. Remember to follow the rules below:

1. The answer is one aspect of the fact (such as an entity / year / number etc.) apart from the original answer.
2. The answer should be concise and direct without any redundant words. And it shoud be a part of the fact.
3. The question should utilize all the information in the fact and be specific.
4. Do not use any information that is beyond the fact.
5. Your output should be a JSON object with a list of dictionaries under the key "alternatives". Each sub-dictionary should have a "question" key and an "answer" key.

Here is the pair of question and answer:

Fact: {fact}
Question: {question}
Answer: {answer})";

constexpr std::string_view kDescriptionPrompt =
    R"(Replace the entity name with a description of it without mentioning the entity name. The description should be unique and specific. Make sure that you can infer the entity name using the description. You might also be provided with the wikipedia page of the entity. The output should be a JSON object with the following format:

{
    "description": "The description of the entity",
}

Wikipedia page: {page}
Entity name: {entity})";

constexpr std::string_view kPortabilityPrompt =
    R"(Below are a few examples of natural, scenario-based questions where a user describes a scenario and then asks a question:

Example 1:
Alternative description: "a historic European city known for its iconic architecture and cobblestone streets."
User's natural question: "I recently visited a charming European city famous for its unique architecture and quaint streets. Can you tell me about a famous monument there?"
Entity name: Paris

Example 2:
Alternative description: "a groundbreaking technology company that revolutionized communication with its innovative products."
User's natural question: "I've been reading about a tech company that changed how we communicate through its innovative gadgets. What product are they best known for?"
Entity name: Apple

Now, given the alternative description and the original question below, generate a new, natural, scenario-based question. The new question should describe a scenario without mentioning the original entity name and then ask the question in a natural, conversational manner.

Alternative description: {description}
Entity name: {entity}
Original question: {question}

The output should be a JSON object with the following format:

{
    "question": "The modified question"
})";

constexpr std::string_view kLocalityPrompt =
    R"(You'll generate a question-answer pair based on the description of an entity.

For each statement, you'll return a JSON object containing:
1. "question": The question that corresponds to the statement
2. "answer": The answer to the question

Example outputs:

1. Input: Jupiter is the largest planet in our solar system.
Output:
{
  "question": "What is the largest planet in our solar system?",
  "answer": "Jupiter"
}
2. Input: The capital of France is Paris.
Output:
{
  "question": "What is the capital of France?",
  "answer": "Paris"
}

Entity: {entity}
Description: {description})";

constexpr std::string_view kTrainingPrompt =
    R"(Given a context, please generate related questions as comprehensively as possible with corresponding answers. The question has to be based on the context and the answer should be a short phrase.
This is an example:
Context: A small coastal town has a beach known for its colorful sea glass. The town hosts an annual festival celebrating this unique feature with art and conservation efforts.
Question: What attracts tourists to the small coastal town
annually? Answer: The unique sea glass beach.
Question: What is celebrated at the town's annual festival?
Answer: The natural phenomenon of sea glass.
Question: What type of activities are featured at the festival?

Format your output in a JSON object like the one below:
{
    "questions": [
        {
            "question": "What attracts tourists to the small coastal town annually?",
            "answer": "The unique sea glass beach."
        },
        {
            "question": "What is celebrated at the town's annual festival?",
            "answer": "The natural phenomenon of sea glass."
        },
        {
            "question": "What type of activities are featured at the festival?",
            "answer": "Art and conservation efforts."
        }
    ]
}
Context: {fact})";

// Single-pass substitution so inserted values are never re-scanned.
std::string fill(std::string_view tmpl, const std::vector<std::pair<std::string_view, std::string_view>>& values) {
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    bool replaced = false;
    if (tmpl[i] == '{') {
      for (const auto& [key, value] : values) {
        if (tmpl.compare(i + 1, key.size(), key) == 0 && i + 1 + key.size() < tmpl.size() &&
            tmpl[i + 1 + key.size()] == '}') {
          out.append(value);
          i += key.size() + 2;
          replaced = true;
          break;
        }
      }
    }
    if (!replaced) out.push_back(tmpl[i++]);
  }
  return out;
}

}  // namespace

std::string reliability_prompt(const FactRecord& fact) {
  Json example;
  example["text"] = fact.text;
  example["bold_entity"] = fact.bold_entity;
  const std::string rendered = example.dump(4);
  return fill(kReliabilityPrompt, {{"test_example", rendered}});
}

std::string paraphrase_prompt(const QAItem& reliability) {
  return fill(kParaphrasePrompt, {{"question", reliability.question}, {"answer", reliability.answer}});
}

std::string generality_prompt(const FactRecord& fact, const QAItem& reliability) {
  return fill(kGeneralityPrompt,
              {{"fact", fact.text}, {"question", reliability.question}, {"answer", reliability.answer}});
}

std::string description_prompt(std::string_view entity, std::string_view page) {
  return fill(kDescriptionPrompt, {{"page", page}, {"entity", entity}});
}

std::string portability_prompt(const EntityDescription& desc, const QAItem& reliability) {
  return fill(kPortabilityPrompt,
              {{"description", desc.description}, {"entity", desc.entity}, {"question", reliability.question}});
}

std::string locality_prompt(const EntityDescription& desc) {
  return fill(kLocalityPrompt, {{"entity", desc.entity}, {"description", desc.description}});
}

std::string training_prompt(const FactRecord& fact) { return fill(kTrainingPrompt, {{"fact", fact.text}}); }

// ---------------------------------------------------------------------------
// Response handling

std::optional<Json> extract_json_object(std::string_view response) {
  std::string text(response);
  // Drop ``` fences (with or without a language tag) but keep their content.
  for (std::size_t pos; (pos = text.find("```")) != std::string::npos;) {
    std::size_t end = pos + 3;
    while (end < text.size() && std::isalpha(static_cast<unsigned char>(text[end]))) ++end;
    text.erase(pos, end - pos);
  }
  for (std::size_t start = text.find('{'); start != std::string::npos; start = text.find('{', start + 1)) {
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = start; i < text.size(); ++i) {
      const char c = text[i];
      if (in_string) {
        if (c == '\\') ++i;
        else if (c == '"') in_string = false;
        continue;
      }
      if (c == '"') in_string = true;
      else if (c == '{') ++depth;
      else if (c == '}' && --depth == 0) {
        try {
          Json j = Json::parse(text.substr(start, i - start + 1));
          if (j.is_object()) return j;
        } catch (const nlohmann::json::parse_error&) {
        }
        break;
      }
    }
  }
  return std::nullopt;
}

std::optional<std::string> validate_qa(const QAItem& item, const FactRecord& fact, const QAItem* reliability) {
  if (trim(item.question).empty()) return "empty_question";
  if (trim(item.answer).empty()) return "empty_answer";
  if (item.fact_id != fact.id) return "fact_id_mismatch";
  switch (item.dimension) {
    case Dimension::Reliability:
      if (item.answer != fact.bold_entity) return "answer_not_bold_entity";
      if (item.question.find(fact.bold_entity) != std::string::npos) return "answer_leak";
      break;
    case Dimension::Paraphrase:
      if (reliability && item.answer != reliability->answer) return "paraphrase_answer_mismatch";
      break;
    case Dimension::Generality:
      if (fact.text.find(item.answer) == std::string::npos) return "answer_not_in_fact";
      if (reliability && item.answer == reliability->answer) return "same_as_reliability_answer";
      break;
    case Dimension::Portability: {
      if (reliability && item.answer != reliability->answer) return "portability_answer_mismatch";
      auto it = item.meta.find("entity");
      if (it != item.meta.end() && contains_ci(item.question, it->second)) return "entity_leak";
      break;
    }
    case Dimension::Locality: {
      auto it = item.meta.find("entity");
      if (it != item.meta.end() && item.answer != it->second) return "locality_answer_not_entity";
      break;
    }
    case Dimension::Training:
      break;
  }
  return std::nullopt;
}

namespace {

// Thrown by interpreters when the response does not have the declared shape.
struct ShapeError {
  std::string what;
};

using Outcome = std::variant<std::vector<QAItem>, std::string>;  // items or drop reason

std::string string_field(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_string()) {
    throw ShapeError{std::string("missing string field '") + key + "'"};
  }
  return std::string(trim(j[key].get<std::string>()));
}

const Json& array_field(const Json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_array() || j[key].empty()) {
    throw ShapeError{std::string("missing non-empty list '") + key + "'"};
  }
  return j[key];
}

// Drives the retry ladder: transport errors and shape errors are retried,
// then rethrown; validation failures are retried, then reported as a drop.
template <class Interpret>
Outcome with_retries(TextGenerator& generator, const std::string& prompt, const RetryPolicy& policy,
                     Interpret&& interpret) {
  const int attempts = std::max(1, policy.max_attempts);
  std::string last_reason;
  for (int attempt = 0; attempt < attempts; ++attempt) {
    const bool last = attempt + 1 == attempts;
    std::string raw;
    try {
      raw = generator.generate(prompt);
    } catch (const TransportError&) {
      if (last) throw;
      std::this_thread::sleep_for(policy.backoff * (1 << attempt));
      continue;
    } catch (const HttpStatusError&) {
      if (last) throw;
      std::this_thread::sleep_for(policy.backoff * (1 << attempt));
      continue;
    }
    auto parsed = extract_json_object(raw);
    try {
      if (!parsed) throw ShapeError{"no JSON object in response"};
      Outcome outcome = interpret(*parsed);
      if (std::holds_alternative<std::vector<QAItem>>(outcome)) return outcome;
      last_reason = std::get<std::string>(outcome);
    } catch (const ShapeError& e) {
      if (last) throw ResponseFormatError("generator response has unexpected shape: " + e.what, raw);
    }
  }
  return last_reason.empty() ? std::string("validation_failed") : last_reason;
}

const QAItem* find_reliability(const std::vector<QAItem>& seed_items) {
  for (const auto& item : seed_items) {
    if (item.dimension == Dimension::Reliability) return &item;
  }
  return nullptr;
}

Generated to_generated(Outcome outcome) {
  Generated g;
  if (auto* items = std::get_if<std::vector<QAItem>>(&outcome)) g.items = std::move(*items);
  else g.dropped_reason = std::get<std::string>(outcome);
  return g;
}

QAItem make_item(const FactRecord& fact, Dimension d, std::string question, std::string answer) {
  return QAItem{fact.id, d, std::move(question), std::move(answer), {}};
}

}  // namespace

Generated generate_questions(const FactRecord& fact, Dimension dimension, TextGenerator& generator,
                             const std::vector<QAItem>& seed_items, const RetryPolicy& policy) {
  const QAItem* reliability = find_reliability(seed_items);
  switch (dimension) {
    case Dimension::Reliability:
      return to_generated(with_retries(generator, reliability_prompt(fact), policy, [&](const Json& j) -> Outcome {
        if (!j.contains("question") || !j["question"].is_object()) throw ShapeError{"missing object 'question'"};
        QAItem item = make_item(fact, dimension, string_field(j["question"], "text"),
                                string_field(j["question"], "answer"));
        if (auto reason = validate_qa(item, fact, nullptr)) return *reason;
        return std::vector<QAItem>{std::move(item)};
      }));

    case Dimension::Paraphrase:
      if (!reliability) throw InvalidInput("Paraphrase generation needs the Reliability item");
      return to_generated(with_retries(generator, paraphrase_prompt(*reliability), policy, [&](const Json& j) -> Outcome {
        const Json& list = array_field(j, "paraphrases");
        QAItem item = make_item(fact, dimension, string_field(list.front(), "question"), reliability->answer);
        if (auto reason = validate_qa(item, fact, reliability)) return *reason;
        return std::vector<QAItem>{std::move(item)};
      }));

    case Dimension::Generality:
      if (!reliability) throw InvalidInput("Generality generation needs the Reliability item");
      return to_generated(
          with_retries(generator, generality_prompt(fact, *reliability), policy, [&](const Json& j) -> Outcome {
            std::string reason = "no_valid_alternative";
            for (const auto& alt : array_field(j, "alternatives")) {
              QAItem item = make_item(fact, dimension, string_field(alt, "question"), string_field(alt, "answer"));
              auto why = validate_qa(item, fact, reliability);
              if (!why) return std::vector<QAItem>{std::move(item)};
              reason = *why;
            }
            return reason;
          }));

    case Dimension::Training:
      return to_generated(with_retries(generator, training_prompt(fact), policy, [&](const Json& j) -> Outcome {
        std::vector<QAItem> items;
        for (const auto& qa : array_field(j, "questions")) {
          QAItem item = make_item(fact, dimension, string_field(qa, "question"), string_field(qa, "answer"));
          if (!validate_qa(item, fact, reliability)) items.push_back(std::move(item));
        }
        if (items.empty()) return std::string("no_valid_training_qa");
        return items;
      }));

    case Dimension::Portability:
    case Dimension::Locality:
      throw InvalidInput("use generate_portability_and_locality for " + std::string(to_string(dimension)));
  }
  throw InvalidInput("unknown dimension");
}

std::optional<std::string> select_portability_entity(const FactRecord& fact) {
  for (const auto& link : fact.links) {
    if (link.empty() || link == fact.bold_entity || link == fact.article_title) continue;
    return link;
  }
  return std::nullopt;
}

std::optional<EntityDescription> generate_entity_description(const std::string& entity, const std::string& page,
                                                             TextGenerator& generator, const RetryPolicy& policy,
                                                             bool strict) {
  if (trim(entity).empty()) return std::nullopt;
  if (strict && trim(page).empty()) return std::nullopt;
  std::optional<EntityDescription> result;
  Outcome outcome;
  try {
    outcome = with_retries(generator, description_prompt(entity, page), policy, [&](const Json& j) -> Outcome {
      std::string description = string_field(j, "description");
      if (description.empty()) return std::string("empty_description");
      if (contains_ci(description, entity)) return std::string("description_leaks_entity");
      result = EntityDescription{entity, std::move(description), {}};
      return std::vector<QAItem>{};
    });
  } catch (const ResponseFormatError&) {
    return std::nullopt;
  }
  if (!std::holds_alternative<std::vector<QAItem>>(outcome)) return std::nullopt;
  return result;
}

PortabilityLocality generate_portability_and_locality(const FactRecord& fact,
                                                      const std::optional<EntityDescription>& desc,
                                                      const QAItem& reliability, TextGenerator& generator,
                                                      const RetryPolicy& policy) {
  if (!desc) throw InvalidInput("portability/locality generation needs an entity description");
  if (reliability.dimension != Dimension::Reliability) throw InvalidInput("expected the Reliability item");
  const std::map<std::string, std::string> meta = {
      {"entity", desc->entity}, {"description", desc->description}, {"source_page", desc->source_page}};

  PortabilityLocality out;
  auto port = with_retries(generator, portability_prompt(*desc, reliability), policy, [&](const Json& j) -> Outcome {
    QAItem item = make_item(fact, Dimension::Portability, string_field(j, "question"), reliability.answer);
    item.meta = meta;
    if (auto reason = validate_qa(item, fact, &reliability)) return *reason;
    return std::vector<QAItem>{std::move(item)};
  });
  if (auto* items = std::get_if<std::vector<QAItem>>(&port)) out.portability = items->front();
  else out.portability_dropped = std::get<std::string>(port);

  auto loc = with_retries(generator, locality_prompt(*desc), policy, [&](const Json& j) -> Outcome {
    std::string question = string_field(j, "question");
    string_field(j, "answer");
    QAItem item = make_item(fact, Dimension::Locality, std::move(question), desc->entity);
    item.meta = meta;
    if (auto reason = validate_qa(item, fact, &reliability)) return *reason;
    return std::vector<QAItem>{std::move(item)};
  });
  if (auto* items = std::get_if<std::vector<QAItem>>(&loc)) out.locality = items->front();
  else out.locality_dropped = std::get<std::string>(loc);
  return out;
}

// ---------------------------------------------------------------------------
// Stub generator

namespace {

std::string after_marker(std::string_view prompt, std::string_view marker, std::string_view stop = "\n") {
  auto pos = prompt.rfind(marker);
  if (pos == std::string_view::npos) return {};
  pos += marker.size();
  auto end = stop.empty() ? std::string_view::npos : prompt.find(stop, pos);
  return std::string(trim(prompt.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos)));
}

std::string strip_punct(std::string_view word) {
  while (!word.empty() && std::ispunct(static_cast<unsigned char>(word.back()))) word.remove_suffix(1);
  while (!word.empty() && std::ispunct(static_cast<unsigned char>(word.front()))) word.remove_prefix(1);
  return std::string(word);
}

std::string replace_ci(std::string text, std::string_view needle, std::string_view with) {
  if (needle.empty()) return text;
  const std::string lowered_needle = to_lower(needle);
  for (std::size_t pos = 0;;) {
    pos = to_lower(text).find(lowered_needle, pos);
    if (pos == std::string::npos) break;
    text.replace(pos, needle.size(), with);
    pos += with.size();
  }
  return text;
}

// Blanks one word of `text` (by whitespace token index) and returns (question, answer).
std::optional<std::pair<std::string, std::string>> cloze(const std::string& text, std::size_t index) {
  auto tokens = split_whitespace(text);
  if (index >= tokens.size()) return std::nullopt;
  std::string answer = strip_punct(tokens[index]);
  if (answer.empty()) return std::nullopt;
  tokens[index] = replace_all(tokens[index], answer, "___");
  return std::make_pair("Which word fills the blank: " + join(tokens, " ") + "?", answer);
}

Json qa_json(const std::string& q, const std::string& a) { return Json{{"question", q}, {"answer", a}}; }

}  // namespace

std::string StubGenerator::generate(const std::string& prompt) {
  Json out;
  if (prompt.starts_with("Given a DYK fact")) {
    const auto marker = prompt.rfind("for this fact:\n");
    Json input = Json::parse(prompt.substr(marker + 15));
    const std::string text = input["text"];
    const std::string entity = input["bold_entity"];
    std::string q = "Who or what is described here: " + replace_all(text, entity, "this subject") + "?";
    out["question"] = Json{{"text", q}, {"answer", entity}};
  } else if (prompt.starts_with("Given a pair of question and answer, generate three different paraphrases")) {
    const std::string q = after_marker(prompt, "Question: ");
    const std::string a = after_marker(prompt, "Answer: ");
    out["paraphrases"] = Json::array({qa_json("In other words, " + q, a), qa_json("Put differently, " + q, a),
                                      qa_json("Restated: " + q, a)});
  } else if (prompt.starts_with("Given a pair of question and answer, generate three different alternative")) {
    const std::string fact = after_marker(prompt, "Fact: ");
    const std::string answer = after_marker(prompt, "Answer: ");
    const auto tokens = split_whitespace(fact);
    out["alternatives"] = Json::array();
    for (std::size_t i = tokens.size(); i-- > 0 && out["alternatives"].size() < 3;) {
      auto c = cloze(fact, i);
      if (!c || c->second.size() < 3 || answer.find(c->second) != std::string::npos) continue;
      out["alternatives"].push_back(qa_json(c->first, c->second));
    }
  } else if (prompt.starts_with("Replace the entity name")) {
    const std::string page = after_marker(prompt, "Wikipedia page: ", "\nEntity name: ");
    const std::string entity = after_marker(prompt, "Entity name: ");
    auto words = split_whitespace(replace_ci(page, entity, ""));
    if (words.size() > 12) words.resize(12);
    out["description"] = "the subject of an article that begins: " + join(words, " ");
  } else if (prompt.starts_with("Below are a few examples of natural, scenario-based questions")) {
    const std::string desc = after_marker(prompt, "Alternative description: ");
    const std::string entity = after_marker(prompt, "Entity name: ");
    const std::string question = after_marker(prompt, "Original question: ");
    out["question"] = "I was reading about " + desc + ". " + replace_ci(question, entity, "that subject");
  } else if (prompt.starts_with("You'll generate a question-answer pair")) {
    const std::string entity = after_marker(prompt, "Entity: ");
    const std::string desc = after_marker(prompt, "Description: ", "");
    out = qa_json("What is " + desc + "?", entity);
  } else if (prompt.starts_with("Given a context, please generate related questions")) {
    const std::string fact = after_marker(prompt, "Context: ", "");
    const auto n = split_whitespace(fact).size();
    out["questions"] = Json::array();
    std::set<std::size_t> used;
    for (std::size_t index : {n ? n - 1 : 0, std::size_t{0}, n / 2}) {
      if (!used.insert(index).second) continue;
      if (auto c = cloze(fact, index)) out["questions"].push_back(qa_json(c->first, c->second));
    }
  } else {
    return "I cannot help with that.";
  }
  return out.dump(2);
}

// ---------------------------------------------------------------------------
// Question file pipeline

TextGenerator& GeneratorSet::for_dimension(Dimension d) const {
  if (auto it = per_dimension.find(d); it != per_dimension.end() && it->second) return *it->second;
  throw InvalidInput("no generator configured for " + std::string(to_string(d)));
}

GeneratorSet GeneratorSet::uniform(std::shared_ptr<TextGenerator> generator) {
  GeneratorSet set;
  for (Dimension d : kAllDimensions) set.per_dimension[d] = generator;
  set.description = generator;
  return set;
}

namespace {

struct FactOutcome {
  std::vector<QAItem> items;
  std::vector<std::string> dropped;
  bool skipped_portability = false;
};

}  // namespace

QuestionRunSummary generate_question_file(const std::vector<FactRecord>& facts, const GeneratorSet& generators,
                                          const QuestionRunOptions& options, const std::filesystem::path& path) {
  QuestionRunSummary summary;
  summary.facts = facts.size();

  std::map<std::pair<std::string, Dimension>, std::vector<QAItem>> existing;
  if (std::filesystem::exists(path)) {
    for (auto& item : load_questions(path)) {
      existing[{item.fact_id, item.dimension}].push_back(item);
      ++summary.existing;
    }
  }
  const std::set<Dimension> wanted(options.dimensions.begin(), options.dimensions.end());
  auto missing = [&](const FactRecord& f, Dimension d) { return wanted.count(d) && !existing.count({f.id, d}); };

  auto process = [&](const FactRecord& fact) {
    FactOutcome out;
    auto record_drop = [&](Dimension d, const std::string& reason) {
      out.dropped.push_back(std::string(to_string(d)) + ":" + reason);
    };
    auto guarded = [&](Dimension d, auto&& fn) {
      try {
        fn();
      } catch (const ResponseFormatError&) {
        record_drop(d, "unparseable_response");
      } catch (const TransportError&) {
        record_drop(d, "transport_error");
      } catch (const HttpStatusError&) {
        record_drop(d, "http_error");
      }
    };

    std::optional<QAItem> reliability;
    if (auto it = existing.find({fact.id, Dimension::Reliability}); it != existing.end()) {
      reliability = it->second.front();
    } else if (missing(fact, Dimension::Reliability) || missing(fact, Dimension::Paraphrase) ||
               missing(fact, Dimension::Generality) || missing(fact, Dimension::Portability) ||
               missing(fact, Dimension::Locality)) {
      guarded(Dimension::Reliability, [&] {
        auto g = generate_questions(fact, Dimension::Reliability, generators.for_dimension(Dimension::Reliability), {},
                                    options.policy);
        if (g.dropped_reason) record_drop(Dimension::Reliability, *g.dropped_reason);
        else reliability = g.items.front();
      });
      if (reliability && wanted.count(Dimension::Reliability)) out.items.push_back(*reliability);
    }

    const std::vector<QAItem> seed = reliability ? std::vector<QAItem>{*reliability} : std::vector<QAItem>{};
    for (Dimension d : {Dimension::Paraphrase, Dimension::Generality, Dimension::Training}) {
      if (!missing(fact, d)) continue;
      if (d != Dimension::Training && !reliability) continue;
      guarded(d, [&] {
        auto g = generate_questions(fact, d, generators.for_dimension(d), seed, options.policy);
        if (g.dropped_reason) record_drop(d, *g.dropped_reason);
        for (auto& item : g.items) out.items.push_back(std::move(item));
      });
    }

    const bool need_port = missing(fact, Dimension::Portability);
    const bool need_loc = missing(fact, Dimension::Locality);
    if ((need_port || need_loc) && reliability) {
      auto entity = select_portability_entity(fact);
      std::string page;
      if (entity) {
        if (auto it = options.pages.find(*entity); it != options.pages.end()) page = it->second;
      }
      std::optional<EntityDescription> desc;
      if (entity) {
        TextGenerator& gen = generators.description ? *generators.description
                                                    : generators.for_dimension(Dimension::Portability);
        guarded(Dimension::Portability, [&] {
          desc = generate_entity_description(*entity, page, gen, options.policy, options.strict_pages);
        });
        if (desc) desc->source_page = *entity;
      }
      if (!desc) {
        out.skipped_portability = true;
      } else {
        guarded(Dimension::Portability, [&] {
          auto pl = generate_portability_and_locality(fact, desc, *reliability,
                                                      generators.for_dimension(Dimension::Portability), options.policy);
          if (need_port) {
            if (pl.portability) out.items.push_back(*pl.portability);
            else record_drop(Dimension::Portability, pl.portability_dropped.value_or("dropped"));
          }
          if (need_loc) {
            if (pl.locality) out.items.push_back(*pl.locality);
            else record_drop(Dimension::Locality, pl.locality_dropped.value_or("dropped"));
          }
        });
      }
    }
    return out;
  };

  JsonlWriter writer(path, /*append=*/true);
  constexpr std::size_t kChunk = 64;
  for (std::size_t begin = 0; begin < facts.size(); begin += kChunk) {
    const std::size_t end = std::min(facts.size(), begin + kChunk);
    std::vector<FactOutcome> outcomes(end - begin);
    parallel_for(end - begin, options.parallelism, [&](std::size_t i) { outcomes[i] = process(facts[begin + i]); });
    for (auto& outcome : outcomes) {
      for (const auto& item : outcome.items) {
        writer.write(to_json(item));
        ++summary.generated[std::string(to_string(item.dimension))];
      }
      for (const auto& reason : outcome.dropped) ++summary.dropped[reason];
      if (outcome.skipped_portability) ++summary.skipped_portability;
    }
    writer.flush();
  }
  return summary;
}

std::vector<std::string> validate_question_set(const std::vector<QAItem>& items, const std::vector<FactRecord>& facts) {
  std::map<std::string, const FactRecord*> by_id;
  for (const auto& f : facts) by_id[f.id] = &f;
  std::map<std::string, const QAItem*> reliability;
  std::map<std::pair<std::string, Dimension>, int> counts;
  for (const auto& item : items) {
    if (item.dimension == Dimension::Reliability) reliability.emplace(item.fact_id, &item);
  }
  std::vector<std::string> problems;
  for (const auto& item : items) {
    auto fact = by_id.find(item.fact_id);
    if (fact == by_id.end()) {
      problems.push_back("unknown fact " + item.fact_id);
      continue;
    }
    auto rel = reliability.find(item.fact_id);
    if (auto reason = validate_qa(item, *fact->second, rel == reliability.end() ? nullptr : rel->second)) {
      problems.push_back(item.fact_id + "/" + std::string(to_string(item.dimension)) + ": " + *reason);
    }
    if (item.dimension != Dimension::Training && ++counts[{item.fact_id, item.dimension}] > 1) {
      problems.push_back(item.fact_id + "/" + std::string(to_string(item.dimension)) + ": duplicate");
    }
  }
  return problems;
}

}  // namespace wikidyk::qagen

#include "neglab/annotate.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "neglab/errors.hpp"
#include "neglab/rng.hpp"

namespace neglab {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string quote(const std::string& s) { return ordered_json(s).dump(); }

const char* kPromotedInstruction = R"(#### Instruction

You will be given a prompt involving negation and a list of attention output tokens from different layers of a language model.

#### Prompt format

The prompt will be of the form **"A that are not B"**.

Example prompt:

- Here is a list of materials that are not biodegradable:

In this prompt:
* **A** = "materials"
* **B** = "biodegradable"

#### What to look for

Your task is to identify **evidence that the model represents the semantic concept "not B"**, rather than merely attending to unrelated or noisy tokens.

Valid evidence should fall into at least one of the following categories:

* **Direct antonyms or negations of B**
* **Properties or categories logically incompatible with B**
* **Concepts that strongly imply not B (via world knowledge)**

Do **NOT** count:

* Formatting artifacts, punctuation, or multilingual noise
* Tokens whose connection to not B is speculative or weak
* General topical tokens unrelated to B

If evidence is ambiguous or uncertain, **do not include it**.

#### Example attention outputs

10_attn_out: [" waste", " the", " of", " material"]
14_attn_out: [" commercial", " Remaining", " products", " stock"]
17_attn_out: [" items", " goods", " to", " supply"]

#### Example reasoning chain

- the negation part in the prompt is "not biodegradable"
- going through the attention outputs, `14_attn_out` contains " commercial" and " Remaining". " commercial" could be related to unnatural. " Remaining" could be related to not decomposing.

Side note: Other examples contain easier cases. For example:
- " solid" relates to "not gas"
- " inland" relates to "not located near the ocean"
- " American" relates to "not in Asia"

#### Expected output

Output a JSON list. Each entry should include:

* the layer index
* the evidence tokens
* a brief justification explaining why they indicate "not B"

Example:

```json
[
    {
        "layer": 14,
        "tokens": [" commercial", " Remaining"],
        "justification": "These tokens suggest non-natural, persistent materials, which are incompatible with biodegradability."
    }
]
```

If **no convincing evidence exists**, output:

```json
[]
```
)";

const char* kDemotedInstruction = R"(#### Instruction

You will be given a prompt involving negation and a list of the most strongly demoted vocabulary tokens from different layers of a language model.

#### Prompt format

The prompt will be of the form **"A that are not B"**.

In this prompt, **A** names the subject category and **B** names the concept being negated.

#### What to look for

Your task is to identify **evidence that the model suppresses the semantic concept "B"**: demoted tokens that are directly related to B itself.

Valid evidence should fall into at least one of the following categories:

* **The word B or its inflections**
* **Near-synonyms or instances of B**
* **Concepts that strongly imply B (via world knowledge)**

Do **NOT** count:

* Formatting artifacts, punctuation, or multilingual noise
* Tokens whose connection to B is speculative or weak
* General topical tokens unrelated to B

If evidence is ambiguous or uncertain, **do not include it**.

#### Expected output

Output a JSON list. Each entry should include:

* the layer index
* the evidence tokens
* a brief justification explaining why they relate to "B"

If **no convincing evidence exists**, output:

```json
[]
```
)";

}  // namespace

std::string build_annotation_prompt(const DatasetEntry& entry,
                                    const std::vector<LensReadout>& readouts, const Tokenizer& tok,
                                    EvidenceMode mode) {
    if (readouts.empty()) {
        throw DataError("annotation prompt needs at least one lens readout");
    }
    std::ostringstream os;
    os << (mode == EvidenceMode::PromotedMatchesNotY ? kPromotedInstruction : kDemotedInstruction);
    os << "\n#### Your task\n\nPrompt:\n\n- " << entry.prompt_minus << "\n\nIn this prompt:\n"
       << "* **A** = \"" << entry.x << "\"\n* **B** = \"" << entry.y << "\"\n\n";
    os << (mode == EvidenceMode::PromotedMatchesNotY ? "Attention output tokens (top promoted per layer):"
                                                     : "Demoted tokens (bottom of the projection per layer):")
       << "\n\n";
    for (const auto& r : readouts) {
        const auto& list = mode == EvidenceMode::PromotedMatchesNotY ? r.promoted : r.demoted;
        os << (r.layer + 1) << "_attn_out: [";
        for (size_t i = 0; i < list.size(); ++i) {
            if (i) os << ", ";
            os << quote(tok.token_string(list[i].first));
        }
        os << "]\n";
    }
    return os.str();
}

std::pair<std::string, std::string> answer_generation_prompt(const DatasetEntry& entry,
                                                             Polarity side, int count) {
    const std::string system =
        "You are a helpful assistant that provides concise lists of single-word examples. "
        "Each example must be exactly one word. Use lowercase for common nouns, but "
        "capitalize proper nouns (countries, cities, brands, programming languages, planets, "
        "etc.). Return only comma-separated single words without numbering, bullets, or "
        "explanations.";
    std::ostringstream user;
    user << "List exactly " << count << " ONE-WORD examples of " << entry.x << " that are "
         << (side == Polarity::Negative ? "NOT " : "") << entry.y
         << ". Each example must be a single word in lowercase (except proper nouns like "
            "countries, cities, brands, which should be capitalized). Return ONLY a "
            "comma-separated list, no explanations or numbering.";
    return {system, user.str()};
}

uint64_t request_hash(const std::string& request_text) { return fnv1a64(request_text); }

std::string fixture_lookup(const std::string& fixtures_path, uint64_t hash) {
    std::ifstream in(fixtures_path);
    if (!in) throw DataError("cannot open fixtures file: " + fixtures_path);
    const std::string want = hex64(hash);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw DataError("malformed fixture line: " + std::string(e.what()));
        }
        if (j.at("request_hash").get<std::string>() == want) {
            return j.at("response").get<std::string>();
        }
    }
    throw DataError("no recorded fixture for request hash " + want + " in " + fixtures_path);
}

void fixture_append(const std::string& fixtures_path, uint64_t hash, const std::string& response) {
    std::ofstream out(fixtures_path, std::ios::app);
    if (!out) throw DataError("cannot append to fixtures file: " + fixtures_path);
    ordered_json j;
    j["request_hash"] = hex64(hash);
    j["response"] = response;
    out << j.dump() << "\n";
}

std::string call_chat(const std::string& request_text, const ChatEndpoint& endpoint) {
    if (endpoint.fixtures_path) {
        return fixture_lookup(*endpoint.fixtures_path, request_hash(request_text));
    }
    if (endpoint.base_url.empty() || endpoint.model.empty()) {
        throw ConfigError("chat endpoint needs a base URL and model name (or fixture mode)");
    }
    const char* key = std::getenv(endpoint.api_key_env.c_str());
    if (!key || !*key) {
        throw ConfigError("missing credential: set " + endpoint.api_key_env);
    }

    ordered_json body;
    body["model"] = endpoint.model;
    body["messages"] = ordered_json::array({ordered_json{{"role", "user"},
                                                         {"content", request_text}}});

    std::string last_error;
    for (int attempt = 0; attempt < endpoint.max_attempts; ++attempt) {
        if (attempt > 0) {
            std::this_thread::sleep_for(std::chrono::milliseconds(500 << (attempt - 1)));
        }
        httplib::Client client(endpoint.base_url);
        client.set_connection_timeout(10);
        client.set_read_timeout(120);
        httplib::Headers headers = {{"Authorization", std::string("Bearer ") + key}};
        auto res = client.Post(endpoint.path, headers, body.dump(), "application/json");
        if (!res) {
            last_error = "transport failure: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status < 200 || res->status >= 300) {
            last_error = "HTTP status " + std::to_string(res->status);
            continue;
        }
        try {
            const ordered_json reply = ordered_json::parse(res->body);
            std::string content =
                reply.at("choices").at(0).at("message").at("content").get<std::string>();
            if (endpoint.record_path) {
                fixture_append(*endpoint.record_path, request_hash(request_text), content);
            }
            return content;
        } catch (const std::exception& e) {
            last_error = std::string("malformed chat reply: ") + e.what();
        }
    }
    throw NetworkError("chat request failed after " + std::to_string(endpoint.max_attempts) +
                       " attempts: " + last_error);
}

namespace {

// First balanced JSON array in the text, respecting strings and escapes.
std::optional<std::string> first_json_array(const std::string& text) {
    for (size_t start = 0; start < text.size(); ++start) {
        if (text[start] != '[') continue;
        int depth = 0;
        bool in_string = false;
        for (size_t i = start; i < text.size(); ++i) {
            const char c = text[i];
            if (in_string) {
                if (c == '\\') {
                    ++i;
                } else if (c == '"') {
                    in_string = false;
                }
                continue;
            }
            if (c == '"') in_string = true;
            else if (c == '[' || c == '{') ++depth;
            else if (c == ']' || c == '}') {
                --depth;
                if (depth == 0) {
                    return text.substr(start, i - start + 1);
                }
            }
        }
    }
    return std::nullopt;
}

}  // namespace

std::vector<EvidenceItem> parse_evidence(const std::string& raw) {
    const auto extent = first_json_array(raw);
    if (!extent) {
        throw DataError("annotator reply contains no JSON array");
    }
    ordered_json arr;
    try {
        arr = ordered_json::parse(*extent);
    } catch (const std::exception& e) {
        throw DataError("annotator reply array does not parse: " + std::string(e.what()));
    }
    if (!arr.is_array()) {
        throw DataError("annotator reply is not a JSON array");
    }
    std::vector<EvidenceItem> items;
    for (const auto& j : arr) {
        if (!j.is_object() || !j.contains("layer") || !j.contains("tokens")) {
            throw DataError("evidence item missing layer/tokens fields");
        }
        EvidenceItem item;
        if (!j["layer"].is_number_integer()) {
            throw DataError("evidence item layer must be an integer");
        }
        item.layer = j["layer"].get<int>();
        if (!j["tokens"].is_array() || j["tokens"].empty()) {
            throw DataError("evidence item tokens must be a non-empty array");
        }
        for (const auto& t : j["tokens"]) {
            if (!t.is_string()) throw DataError("evidence token must be a string");
            item.tokens.push_back(t.get<std::string>());
        }
        if (j.contains("justification")) {
            if (!j["justification"].is_string()) {
                throw DataError("evidence justification must be a string");
            }
            item.justification = j["justification"].get<std::string>();
        }
        items.push_back(std::move(item));
    }
    return items;
}

std::vector<std::string> parse_word_list(const std::string& raw) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    std::string current;
    auto flush = [&]() {
        const size_t b = current.find_first_not_of(" \t\r\n");
        if (b != std::string::npos) {
            const size_t e = current.find_last_not_of(" \t\r\n.");
            std::string word = current.substr(b, e >= b ? e - b + 1 : 0);
            if (!word.empty() && word.find(' ') == std::string::npos &&
                seen.insert(word).second) {
                out.push_back(word);
            }
        }
        current.clear();
    };
    for (char c : raw) {
        if (c == ',' || c == '\n') flush();
        else current.push_back(c);
    }
    flush();
    return out;
}

EvidenceCurve evidence_curve(const std::vector<std::vector<EvidenceItem>>& per_sample,
                             int layer_begin, int layer_end, EvidenceMode mode) {
    EvidenceCurve curve;
    curve.mode = mode;
    curve.layer_begin = layer_begin;
    curve.layer_end = layer_end;
    curve.sample_count = per_sample.size();
    const int span = layer_end - layer_begin + 1;
    curve.fraction.assign(span > 0 ? static_cast<size_t>(span) : 0, 0.0);
    if (per_sample.empty() || span <= 0) return curve;

    size_t any = 0;
    for (const auto& items : per_sample) {
        std::vector<bool> hit(static_cast<size_t>(span), false);
        bool any_hit = false;
        for (const auto& item : items) {
            if (item.layer >= layer_begin && item.layer <= layer_end) {
                hit[static_cast<size_t>(item.layer - layer_begin)] = true;
                any_hit = true;
            }
        }
        for (size_t l = 0; l < hit.size(); ++l) {
            if (hit[l]) curve.fraction[l] += 1.0;
        }
        if (any_hit) ++any;
    }
    for (auto& f : curve.fraction) f /= static_cast<double>(per_sample.size());
    curve.any_layer_fraction = static_cast<double>(any) / static_cast<double>(per_sample.size());
    return curve;
}

}  // namespace neglab

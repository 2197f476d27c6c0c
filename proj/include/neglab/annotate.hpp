#pragma once

#include <optional>
#include <string>
#include <vector>

#include "neglab/corpus.hpp"
#include "neglab/lenses.hpp"

namespace neglab {

struct EvidenceItem {
    int layer = 0;  // 1-based, as the annotator reports it
    std::vector<std::string> tokens;
    std::string justification;
};

enum class EvidenceMode { PromotedMatchesNotY, DemotedMatchesY };

struct EvidenceCurve {
    EvidenceMode mode = EvidenceMode::PromotedMatchesNotY;
    int layer_begin = 0;  // 1-based inclusive
    int layer_end = 0;
    std::vector<double> fraction;  // per layer, samples with >= 1 evidence
    double any_layer_fraction = 0.0;
    size_t sample_count = 0;
};

// Chat endpoint configuration. Credentials come from the environment; in
// fixture mode no network is ever touched and no credential is needed.
struct ChatEndpoint {
    std::string base_url;     // e.g. http://host:port
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string api_key_env = "NEGLAB_API_KEY";
    std::optional<std::string> fixtures_path;  // JSONL of {request_hash, response}
    std::optional<std::string> record_path;    // append live replies here
    int max_attempts = 3;
};

// Instruction prompt asking the annotator for evidence that the readouts
// represent the negated concept (promoted mode) or still carry the plain
// concept (demoted mode).
std::string build_annotation_prompt(const DatasetEntry& entry,
                                    const std::vector<LensReadout>& readouts, const Tokenizer& tok,
                                    EvidenceMode mode = EvidenceMode::PromotedMatchesNotY);

// Single-word answer generation prompts (system, user) for one entry side.
std::pair<std::string, std::string> answer_generation_prompt(const DatasetEntry& entry,
                                                             Polarity side, int count = 5);

// POST to a chat-completions style endpoint with retry/backoff, or replay a
// recorded fixture. Returns the assistant message content.
std::string call_chat(const std::string& request_text, const ChatEndpoint& endpoint);

uint64_t request_hash(const std::string& request_text);

// Extracts the first JSON array in the reply (fenced blocks handled) and
// validates {layer, tokens, justification} items.
std::vector<EvidenceItem> parse_evidence(const std::string& raw);

// Comma-separated single-word parser for the answer generation replies.
std::vector<std::string> parse_word_list(const std::string& raw);

EvidenceCurve evidence_curve(const std::vector<std::vector<EvidenceItem>>& per_sample,
                             int layer_begin, int layer_end,
                             EvidenceMode mode = EvidenceMode::PromotedMatchesNotY);

// Fixture store helpers (JSONL of {"request_hash": hex, "response": text}).
std::string fixture_lookup(const std::string& fixtures_path, uint64_t hash);
void fixture_append(const std::string& fixtures_path, uint64_t hash, const std::string& response);

}  // namespace neglab

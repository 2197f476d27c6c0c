#pragma once

#include <string>
#include <vector>

#include "neglab/config.hpp"
#include "neglab/tokenizer.hpp"

namespace neglab {

enum class Polarity { Positive, Negative };

// One prompt pair. `x` names the subject category ("animal"), `y` the phrase
// being negated ("amphibian"); the prompts differ only by the negation
// indicator versus the affirmative marker. `suffix` is an optional shared
// tail appended to both prompts (e.g. " a") so single-token answers follow
// naturally.
struct DatasetEntry {
    std::string id;
    std::string x;
    std::string y;
    std::string neg_indicator = "not";
    std::string affirm_marker = "indeed";
    int template_id = 0;  // 1..4
    std::string suffix;
    std::string category;

    std::string prompt_plus;   // rendered at load
    std::string prompt_minus;

    std::string y_plus;
    std::string y_minus;
    std::vector<std::string> y_plus_set;   // includes y_plus when present
    std::vector<std::string> y_minus_set;

    const std::string& prompt(Polarity p) const {
        return p == Polarity::Positive ? prompt_plus : prompt_minus;
    }
};

// The four prompt templates. Articles (a/an) are chosen by the first letter
// of the slotted word; an empty indicator omits the slot cleanly.
std::string render(const std::string& x, const std::string& y, int template_id, Polarity polarity,
                   const std::string& neg_indicator, const std::string& affirm_marker);

int template_count();

// JSONL loader with per-line diagnostics. Rejects duplicate (x, y, template)
// triples, y_plus == y_minus, and unknown template ids.
std::vector<DatasetEntry> load_corpus(const std::string& path);
std::vector<DatasetEntry> parse_corpus(const std::string& jsonl_text, const std::string& origin);

std::string entry_to_jsonl(const DatasetEntry& e);

// Token index of the final token of `y` in the rendered prompt (last
// occurrence if repeated), in the same token space the model consumes
// (BOS included when configured).
int locate_y_span(const DatasetEntry& entry, const Tokenizer& tok, const ModelConfig& config,
                  Polarity polarity);

// Attach generated answer sets: trims, deduplicates, drops multi-word
// strings, prepends the leading space answers carry.
void expand_answers(DatasetEntry& entry, const std::vector<std::string>& plus_list,
                    const std::vector<std::string>& minus_list);

}  // namespace neglab

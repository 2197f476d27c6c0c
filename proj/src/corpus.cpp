#include "neglab/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "neglab/errors.hpp"
#include "neglab/model.hpp"

namespace neglab {

using ordered_json = nlohmann::ordered_json;

namespace {

bool starts_with_vowel(const std::string& word) {
    if (word.empty()) return false;
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(word[0])));
    return c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u';
}

std::string article(const std::string& word, bool capitalized) {
    const bool an = starts_with_vowel(word);
    if (capitalized) return an ? "An" : "A";
    return an ? "an" : "a";
}

std::string indicator_slot(const std::string& ind) {
    return ind.empty() ? "" : " " + ind;
}

}  // namespace

int template_count() { return 4; }

std::string render(const std::string& x, const std::string& y, int template_id, Polarity polarity,
                   const std::string& neg_indicator, const std::string& affirm_marker) {
    if (x.empty() || y.empty()) {
        throw DataError("render: empty X or Y slot");
    }
    const std::string ind =
        indicator_slot(polarity == Polarity::Negative ? neg_indicator : affirm_marker);
    switch (template_id) {
        case 1:
            return "Here is a list of " + x + " that are" + ind + " " + y + ":";
        case 2:
            return article(x, true) + " " + x + " that is" + ind + " " + article(y, false) + " " +
                   y + " is";
        case 3:
            return "Something that is " + article(x, false) + " " + x + " and" + ind + " " +
                   article(y, false) + " " + y + " is";
        case 4:
            return "What is " + article(x, false) + " " + x + " that is" + ind + " " +
                   article(y, false) + " " + y + "? It is";
        default:
            throw DataError("unknown template id " + std::to_string(template_id));
    }
}

namespace {

DatasetEntry entry_from_json(const ordered_json& j, const std::string& where) {
    DatasetEntry e;
    try {
        e.id = j.at("id").get<std::string>();
        e.x = j.at("x").get<std::string>();
        e.y = j.at("y").get<std::string>();
        e.neg_indicator = j.value("neg_indicator", std::string("not"));
        e.affirm_marker = j.value("affirm_marker", std::string("indeed"));
        e.template_id = j.at("template").get<int>();
        e.suffix = j.value("suffix", std::string());
        e.category = j.value("category", std::string());
        e.y_plus = j.at("y_plus").get<std::string>();
        e.y_minus = j.at("y_minus").get<std::string>();
        if (j.contains("y_plus_set")) e.y_plus_set = j["y_plus_set"].get<std::vector<std::string>>();
        if (j.contains("y_minus_set")) {
            e.y_minus_set = j["y_minus_set"].get<std::vector<std::string>>();
        }
    } catch (const std::exception& ex) {
        throw DataError(where + ": bad entry: " + ex.what());
    }
    if (e.template_id < 1 || e.template_id > template_count()) {
        throw DataError(where + ": unknown template id " + std::to_string(e.template_id));
    }
    if (e.y_plus == e.y_minus) {
        throw DataError(where + ": degenerate answers, y_plus == y_minus (" + e.y_plus + ")");
    }
    if (e.neg_indicator.empty()) {
        throw DataError(where + ": empty negation indicator");
    }
    if (e.neg_indicator == e.affirm_marker) {
        throw DataError(where + ": negation indicator equals affirmative marker");
    }
    e.prompt_plus = render(e.x, e.y, e.template_id, Polarity::Positive, e.neg_indicator,
                           e.affirm_marker) +
                    e.suffix;
    e.prompt_minus = render(e.x, e.y, e.template_id, Polarity::Negative, e.neg_indicator,
                            e.affirm_marker) +
                     e.suffix;
    return e;
}

}  // namespace

std::vector<DatasetEntry> parse_corpus(const std::string& jsonl_text, const std::string& origin) {
    std::vector<DatasetEntry> entries;
    std::set<std::tuple<std::string, std::string, int>> seen;
    std::set<std::string> seen_ids;
    std::istringstream in(jsonl_text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = origin + ":" + std::to_string(line_no);
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw DataError(where + ": malformed JSON: " + e.what());
        }
        DatasetEntry entry = entry_from_json(j, where);
        const auto key = std::make_tuple(entry.x, entry.y, entry.template_id);
        if (!seen.insert(key).second) {
            throw DataError(where + ": duplicate (X, Y) tuple '" + entry.x + "' / '" + entry.y +
                            "' for template " + std::to_string(entry.template_id));
        }
        if (!seen_ids.insert(entry.id).second) {
            throw DataError(where + ": duplicate entry id " + entry.id);
        }
        entries.push_back(std::move(entry));
    }
    if (entries.empty()) {
        throw DataError(origin + ": corpus has no entries");
    }
    return entries;
}

std::vector<DatasetEntry> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open corpus: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_corpus(text, path);
}

std::string entry_to_jsonl(const DatasetEntry& e) {
    ordered_json j;
    j["id"] = e.id;
    j["x"] = e.x;
    j["y"] = e.y;
    j["neg_indicator"] = e.neg_indicator;
    j["affirm_marker"] = e.affirm_marker;
    j["template"] = e.template_id;
    if (!e.suffix.empty()) j["suffix"] = e.suffix;
    j["y_plus"] = e.y_plus;
    j["y_minus"] = e.y_minus;
    if (!e.y_plus_set.empty()) j["y_plus_set"] = e.y_plus_set;
    if (!e.y_minus_set.empty()) j["y_minus_set"] = e.y_minus_set;
    j["category"] = e.category;
    return j.dump();
}

int locate_y_span(const DatasetEntry& entry, const Tokenizer& tok, const ModelConfig& config,
                  Polarity polarity) {
    const std::string& prompt = entry.prompt(polarity);
    const size_t found = prompt.rfind(entry.y);
    if (found == std::string::npos) {
        throw DataError("entry " + entry.id + ": Y phrase '" + entry.y +
                        "' not found in rendered prompt");
    }
    const size_t y_last_byte = found + entry.y.size() - 1;

    const std::vector<int> ids = encode_prompt(tok, config, prompt);
    size_t offset = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
        const size_t len = tok.token_byte_len(ids[i]);
        if (y_last_byte >= offset && y_last_byte < offset + len) {
            return static_cast<int>(i);
        }
        offset += len;
    }
    throw DataError("entry " + entry.id + ": Y phrase lost in tokenization alignment");
}

void expand_answers(DatasetEntry& entry, const std::vector<std::string>& plus_list,
                    const std::vector<std::string>& minus_list) {
    auto clean = [&](const std::vector<std::string>& list, const char* side) {
        std::vector<std::string> out;
        std::set<std::string> seen;
        for (std::string s : list) {
            const size_t b = s.find_first_not_of(" \t\r\n");
            const size_t e = s.find_last_not_of(" \t\r\n");
            if (b == std::string::npos) continue;
            s = s.substr(b, e - b + 1);
            if (s.find(' ') != std::string::npos) continue;  // one word only
            s = " " + s;
            if (seen.insert(s).second) out.push_back(s);
        }
        if (out.empty()) {
            throw DataError("entry " + entry.id + ": no usable " + side +
                            " answers after filtering");
        }
        return out;
    };
    entry.y_plus_set = clean(plus_list, "positive");
    entry.y_minus_set = clean(minus_list, "negative");
}

}  // namespace neglab

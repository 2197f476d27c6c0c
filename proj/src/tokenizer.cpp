#include "neglab/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "neglab/errors.hpp"

namespace neglab {

namespace bytemap {

// Printable byte ranges keep their own codepoint; everything else is shifted
// to 256+i so every byte has a visible, unambiguous stand-in character.
static std::vector<std::string> build_byte_to_unicode() {
    std::vector<int> cps(256, -1);
    auto printable = [](int b) {
        return (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF);
    };
    int n = 0;
    for (int b = 0; b < 256; ++b) {
        if (printable(b)) {
            cps[b] = b;
        } else {
            cps[b] = 256 + n;
            ++n;
        }
    }
    auto encode_utf8 = [](int cp) {
        std::string out;
        if (cp < 0x80) {
            out.push_back(static_cast<char>(cp));
        } else if (cp < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else {
            out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
        return out;
    };
    std::vector<std::string> table(256);
    for (int b = 0; b < 256; ++b) table[b] = encode_utf8(cps[b]);
    return table;
}

const std::vector<std::string>& byte_to_unicode() {
    static const std::vector<std::string> table = build_byte_to_unicode();
    return table;
}

std::string map_bytes(const std::string& raw) {
    const auto& table = byte_to_unicode();
    std::string out;
    out.reserve(raw.size() * 2);
    for (unsigned char b : raw) out += table[b];
    return out;
}

std::string unmap_bytes(const std::string& mapped) {
    static const std::unordered_map<std::string, unsigned char> reverse = [] {
        std::unordered_map<std::string, unsigned char> m;
        const auto& table = byte_to_unicode();
        for (int b = 0; b < 256; ++b) m[table[b]] = static_cast<unsigned char>(b);
        return m;
    }();
    std::string out;
    out.reserve(mapped.size());
    size_t i = 0;
    while (i < mapped.size()) {
        const unsigned char lead = static_cast<unsigned char>(mapped[i]);
        size_t len = 1;
        if (lead >= 0xE0) len = 3;
        else if (lead >= 0xC0) len = 2;
        if (i + len > mapped.size()) {
            throw DataError("token string is not valid mapped-byte text");
        }
        auto it = reverse.find(mapped.substr(i, len));
        if (it == reverse.end()) {
            throw DataError("token string contains a character outside the byte alphabet");
        }
        out.push_back(static_cast<char>(it->second));
        i += len;
    }
    return out;
}

}  // namespace bytemap

namespace {

struct Codepoint {
    uint32_t cp;
    size_t byte_len;
};

Codepoint decode_utf8_at(const std::string& s, size_t i) {
    const unsigned char b0 = static_cast<unsigned char>(s[i]);
    if (b0 < 0x80) return {b0, 1};
    size_t len = 1;
    uint32_t cp = b0;
    if ((b0 >> 5) == 0x6) {
        len = 2;
        cp = b0 & 0x1F;
    } else if ((b0 >> 4) == 0xE) {
        len = 3;
        cp = b0 & 0x0F;
    } else if ((b0 >> 3) == 0x1E) {
        len = 4;
        cp = b0 & 0x07;
    } else {
        // stray continuation byte: treat as a standalone unit
        return {b0, 1};
    }
    if (i + len > s.size()) return {b0, 1};
    for (size_t k = 1; k < len; ++k) {
        const unsigned char bk = static_cast<unsigned char>(s[i + k]);
        if ((bk >> 6) != 0x2) return {b0, 1};
        cp = (cp << 6) | (bk & 0x3F);
    }
    return {cp, len};
}

bool is_space_cp(uint32_t cp) {
    return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\f' || cp == '\v' ||
           cp == 0xA0 || cp == 0x2028 || cp == 0x2029 || (cp >= 0x2000 && cp <= 0x200A);
}

bool is_digit_cp(uint32_t cp) { return cp >= '0' && cp <= '9'; }

bool is_letter_cp(uint32_t cp) {
    if ((cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z')) return true;
    // Pragmatic non-ASCII classing: treat anything outside spaces, digits
    // and the Latin-1 punctuation block as a letter. Exact only for ASCII,
    // which is all the bundled corpus uses.
    if (cp < 0x80) return false;
    if (is_space_cp(cp)) return false;
    if (cp >= 0xA1 && cp <= 0xBF) return false;
    return true;
}

}  // namespace

std::vector<std::string> pretokenize(const std::string& text) {
    // Mirrors the usual byte-level BPE split:
    //   's 't 're 've 'm 'll 'd | ?L+ | ?N+ | ?[^ L N s]+ | s+(?!\S) | s+
    std::vector<Codepoint> cps;
    std::vector<size_t> offsets;
    size_t i = 0;
    while (i < text.size()) {
        Codepoint c = decode_utf8_at(text, i);
        cps.push_back(c);
        offsets.push_back(i);
        i += c.byte_len;
    }
    offsets.push_back(text.size());

    std::vector<std::string> out;
    const size_t n = cps.size();
    size_t p = 0;
    auto slice = [&](size_t from, size_t to) {
        return text.substr(offsets[from], offsets[to] - offsets[from]);
    };
    while (p < n) {
        // contractions ('s 't 're 've 'm 'll 'd, lowercase only)
        if (cps[p].cp == '\'' && p + 1 < n) {
            const uint32_t c1 = cps[p + 1].cp;
            if (c1 == 's' || c1 == 't' || c1 == 'm' || c1 == 'd') {
                out.push_back(slice(p, p + 2));
                p += 2;
                continue;
            }
            if (p + 2 < n) {
                const uint32_t c2 = cps[p + 2].cp;
                if ((c1 == 'r' && c2 == 'e') || (c1 == 'v' && c2 == 'e') ||
                    (c1 == 'l' && c2 == 'l')) {
                    out.push_back(slice(p, p + 3));
                    p += 3;
                    continue;
                }
            }
        }
        const bool leading_space = cps[p].cp == ' ' && p + 1 < n && !is_space_cp(cps[p + 1].cp);
        const size_t q = leading_space ? p + 1 : p;
        if (q < n && is_letter_cp(cps[q].cp)) {
            size_t e = q;
            while (e < n && is_letter_cp(cps[e].cp)) ++e;
            out.push_back(slice(p, e));
            p = e;
            continue;
        }
        if (q < n && is_digit_cp(cps[q].cp)) {
            size_t e = q;
            while (e < n && is_digit_cp(cps[e].cp)) ++e;
            out.push_back(slice(p, e));
            p = e;
            continue;
        }
        if (q < n && !is_space_cp(cps[q].cp)) {
            size_t e = q;
            while (e < n && !is_space_cp(cps[e].cp) && !is_letter_cp(cps[e].cp) &&
                   !is_digit_cp(cps[e].cp)) {
                ++e;
            }
            out.push_back(slice(p, e));
            p = e;
            continue;
        }
        // whitespace run
        size_t e = p;
        while (e < n && is_space_cp(cps[e].cp)) ++e;
        if (e == n) {
            out.push_back(slice(p, e));
            p = e;
        } else if (cps[e - 1].cp == ' ') {
            // the final space prefixes the next word; emit the rest, if any
            if (e - 1 > p) out.push_back(slice(p, e - 1));
            p = e - 1;
        } else {
            if (e - 1 > p) out.push_back(slice(p, e - 1));
            out.push_back(slice(e - 1, e));
            p = e;
        }
    }
    return out;
}

Tokenizer Tokenizer::from_tables(std::map<std::string, int> vocab,
                                 std::vector<std::pair<std::string, std::string>> merges) {
    Tokenizer t;
    int max_id = -1;
    for (const auto& [tok, id] : vocab) {
        if (id < 0) throw DataError("vocabulary id must be non-negative: " + tok);
        max_id = std::max(max_id, id);
    }
    t.id_to_token_.assign(static_cast<size_t>(max_id + 1), "");
    t.special_.assign(static_cast<size_t>(max_id + 1), false);
    for (const auto& [tok, id] : vocab) {
        if (!t.id_to_token_[static_cast<size_t>(id)].empty()) {
            throw DataError("duplicate vocabulary id " + std::to_string(id));
        }
        t.id_to_token_[static_cast<size_t>(id)] = tok;
        t.token_to_id_[tok] = id;
        if (tok.size() >= 2 && tok.front() == '<' && tok.back() == '>') {
            t.special_[static_cast<size_t>(id)] = true;
        }
    }
    for (size_t i = 0; i < merges.size(); ++i) {
        t.merge_rank_[merges[i]] = static_cast<int>(i);
    }
    return t;
}

Tokenizer Tokenizer::load(const std::string& vocab_path, const std::string& merges_path) {
    std::ifstream vf(vocab_path);
    if (!vf) throw DataError("cannot open vocabulary file: " + vocab_path);
    nlohmann::json vocab_json;
    try {
        vf >> vocab_json;
    } catch (const std::exception& e) {
        throw DataError("malformed vocabulary JSON: " + std::string(e.what()));
    }
    std::map<std::string, int> vocab;
    for (auto& [tok, id] : vocab_json.items()) {
        vocab[tok] = id.get<int>();
    }

    std::ifstream mf(merges_path);
    if (!mf) throw DataError("cannot open merges file: " + merges_path);
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    while (std::getline(mf, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const size_t sp = line.find(' ');
        if (sp == std::string::npos) {
            throw DataError("malformed merges line: " + line);
        }
        merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return from_tables(std::move(vocab), std::move(merges));
}

std::vector<int> Tokenizer::bpe_word(const std::string& mapped_word) const {
    // start from single mapped characters
    std::vector<std::string> parts;
    size_t i = 0;
    while (i < mapped_word.size()) {
        const unsigned char lead = static_cast<unsigned char>(mapped_word[i]);
        size_t len = 1;
        if (lead >= 0xE0) len = 3;
        else if (lead >= 0xC0) len = 2;
        parts.push_back(mapped_word.substr(i, len));
        i += len;
    }
    while (parts.size() > 1) {
        int best_rank = -1;
        size_t best_pos = 0;
        for (size_t j = 0; j + 1 < parts.size(); ++j) {
            auto it = merge_rank_.find({parts[j], parts[j + 1]});
            if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
                best_rank = it->second;
                best_pos = j;
            }
        }
        if (best_rank < 0) break;
        parts[best_pos] += parts[best_pos + 1];
        parts.erase(parts.begin() + static_cast<long>(best_pos) + 1);
    }
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (const auto& part : parts) {
        auto it = token_to_id_.find(part);
        if (it == token_to_id_.end()) {
            throw DataError("token piece not in vocabulary: " + part);
        }
        ids.push_back(it->second);
    }
    return ids;
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
    std::vector<int> out;
    for (const auto& word : pretokenize(text)) {
        const std::vector<int> ids = bpe_word(bytemap::map_bytes(word));
        out.insert(out.end(), ids.begin(), ids.end());
    }
    return out;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
    std::string mapped;
    for (int id : ids) {
        if (id < 0 || id >= vocab_size() || id_to_token_[static_cast<size_t>(id)].empty()) {
            throw DataError("unknown token id on decode: " + std::to_string(id));
        }
        if (special_[static_cast<size_t>(id)]) continue;
        mapped += id_to_token_[static_cast<size_t>(id)];
    }
    return bytemap::unmap_bytes(mapped);
}

namespace {

bool is_valid_utf8(const std::string& s) {
    size_t i = 0;
    while (i < s.size()) {
        const unsigned char b = static_cast<unsigned char>(s[i]);
        size_t len = 0;
        if (b < 0x80) len = 1;
        else if ((b >> 5) == 0x6) len = 2;
        else if ((b >> 4) == 0xE) len = 3;
        else if ((b >> 3) == 0x1E) len = 4;
        else return false;
        if (i + len > s.size()) return false;
        for (size_t k = 1; k < len; ++k) {
            if ((static_cast<unsigned char>(s[i + k]) >> 6) != 0x2) return false;
        }
        i += len;
    }
    return true;
}

}  // namespace

std::string Tokenizer::token_string(int id) const {
    if (id < 0 || id >= vocab_size() || id_to_token_[static_cast<size_t>(id)].empty()) {
        throw DataError("unknown token id: " + std::to_string(id));
    }
    if (special_[static_cast<size_t>(id)]) return id_to_token_[static_cast<size_t>(id)];
    // decoded bytes when they are displayable text; raw byte tokens keep
    // their mapped stand-in so the string stays valid UTF-8
    const std::string decoded = bytemap::unmap_bytes(id_to_token_[static_cast<size_t>(id)]);
    if (is_valid_utf8(decoded)) return decoded;
    return id_to_token_[static_cast<size_t>(id)];
}

size_t Tokenizer::token_byte_len(int id) const {
    if (id < 0 || id >= vocab_size()) {
        throw DataError("unknown token id: " + std::to_string(id));
    }
    if (special_[static_cast<size_t>(id)]) return 0;
    return bytemap::unmap_bytes(id_to_token_[static_cast<size_t>(id)]).size();
}

std::optional<int> Tokenizer::token_id(const std::string& token) const {
    auto it = token_to_id_.find(token);
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
}

std::optional<int> Tokenizer::piece_id(const std::string& raw_piece) const {
    return token_id(bytemap::map_bytes(raw_piece));
}

bool Tokenizer::is_special(int id) const {
    if (id < 0 || id >= vocab_size()) return false;
    return special_[static_cast<size_t>(id)];
}

}  // namespace neglab

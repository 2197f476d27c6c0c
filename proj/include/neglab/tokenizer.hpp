#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace neglab {

// Byte-level BPE tokenizer (GPT-2 file conventions): a vocabulary JSON of
// token string -> id over the byte-to-unicode alphabet, plus an ordered
// merges text file. decode(encode(s)) == s for every byte string.
class Tokenizer {
  public:
    static Tokenizer load(const std::string& vocab_path, const std::string& merges_path);
    static Tokenizer from_tables(std::map<std::string, int> vocab,
                                 std::vector<std::pair<std::string, std::string>> merges);

    std::vector<int> encode(const std::string& text) const;
    std::string decode(const std::vector<int>& ids) const;

    // Printable form of a single token (specials keep their literal name).
    std::string token_string(int id) const;

    // Byte length of a token when decoded; 0 for special tokens.
    size_t token_byte_len(int id) const;

    int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
    std::optional<int> token_id(const std::string& token) const;

    // Lookup over raw text (applies byte-to-unicode mapping first).
    std::optional<int> piece_id(const std::string& raw_piece) const;

    bool is_special(int id) const;

  private:
    Tokenizer() = default;

    std::vector<int> bpe_word(const std::string& mapped_word) const;

    std::unordered_map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
    // merge rank by pair of token strings, lower rank merges first
    std::map<std::pair<std::string, std::string>, int> merge_rank_;
    std::vector<bool> special_;
};

// GPT-2 style byte <-> unicode alphabet mapping.
namespace bytemap {
const std::vector<std::string>& byte_to_unicode();
std::string map_bytes(const std::string& raw);
std::string unmap_bytes(const std::string& mapped);
}  // namespace bytemap

// GPT-2 style pre-tokenizer split (contractions, letter runs, digit runs,
// punctuation runs, whitespace handling).
std::vector<std::string> pretokenize(const std::string& text);

}  // namespace neglab

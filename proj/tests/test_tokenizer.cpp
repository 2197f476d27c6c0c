#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <string>

#include "doctest.h"
#include "neglab/errors.hpp"
#include "neglab/rng.hpp"
#include "neglab/tokenizer.hpp"
#include "support.hpp"

using namespace neglab;

namespace {

Tokenizer toy() {
    return Tokenizer::load(testsup::asset("toy/vocab.json"), testsup::asset("toy/merges.txt"));
}

}  // namespace

TEST_CASE("pretokenizer splits") {
    CHECK(pretokenize("Hello world") == std::vector<std::string>{"Hello", " world"});
    CHECK(pretokenize("a  b") == std::vector<std::string>{"a", " ", " b"});
    CHECK(pretokenize("it's") == std::vector<std::string>{"it", "'s"});
    CHECK(pretokenize("no. 42") == std::vector<std::string>{"no", ".", " 42"});
    CHECK(pretokenize("tail ") == std::vector<std::string>{"tail", " "});
    CHECK(pretokenize("") == std::vector<std::string>{});
    CHECK(pretokenize("list:") == std::vector<std::string>{"list", ":"});
}

TEST_CASE("decode(encode()) is the identity on byte strings") {
    const Tokenizer tok = toy();
    const std::vector<std::string> samples = {
        "Here is a list of animals that are not amphibians:",
        "An animal that is indeed an amphibian is a frog.",
        "  double space, punctuation?! 123",
        "newline\nand\ttab",
        "unicode caf\xC3\xA9 \xE2\x82\xAC",
        "",
    };
    for (const auto& s : samples) {
        CHECK(tok.decode(tok.encode(s)) == s);
    }
    // random byte strings, printable-heavy
    Rng rng(17);
    for (int trial = 0; trial < 30; ++trial) {
        std::string s;
        const size_t len = rng.below(40);
        for (size_t i = 0; i < len; ++i) {
            s.push_back(static_cast<char>(32 + rng.below(95)));
        }
        CHECK(tok.decode(tok.encode(s)) == s);
    }
}

TEST_CASE("encode of the empty string is empty") {
    CHECK(toy().encode("").empty());
}

TEST_CASE("golden ids on the bundled vocabulary") {
    const Tokenizer tok = toy();
    CHECK(tok.encode(" frog") == std::vector<int>{413});
    CHECK(tok.encode(" New York") == std::vector<int>{636, 220, 675, 74});
    CHECK(tok.encode(" New Delhi") == std::vector<int>{636, 220, 674});
    CHECK(tok.token_id("<s>") == 676);
}

TEST_CASE("unknown id on decode") {
    const Tokenizer tok = toy();
    CHECK_THROWS_AS(tok.decode({999999}), DataError);
    CHECK_THROWS_AS(tok.decode({-1}), DataError);
}

TEST_CASE("special tokens decode to nothing but print their names") {
    const Tokenizer tok = toy();
    const int bos = *tok.token_id("<s>");
    CHECK(tok.decode({bos}) == "");
    CHECK(tok.token_string(bos) == "<s>");
    CHECK(tok.token_byte_len(bos) == 0);
    CHECK(tok.is_special(bos));
}

TEST_CASE("token ids re-encode to themselves") {
    const Tokenizer tok = toy();
    // encode . decode == identity on id sequences produced by encode
    Rng rng(23);
    const std::vector<std::string> words = {" frog", " dog", " Paris", "Here", " is", " a"};
    for (int trial = 0; trial < 20; ++trial) {
        std::string s;
        for (int w = 0; w < 4; ++w) {
            s += words[rng.below(static_cast<uint32_t>(words.size()))];
        }
        const std::vector<int> ids = tok.encode(s);
        CHECK(tok.encode(tok.decode(ids)) == ids);
    }
}

TEST_CASE("byte mapping round-trips all 256 bytes") {
    std::string all;
    for (int b = 0; b < 256; ++b) all.push_back(static_cast<char>(b));
    CHECK(bytemap::unmap_bytes(bytemap::map_bytes(all)) == all);
}

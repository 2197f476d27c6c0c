#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <set>

#include "doctest.h"
#include "neglab/corpus.hpp"
#include "neglab/errors.hpp"
#include "support.hpp"

using namespace neglab;

TEST_CASE("the four templates render the canonical forms") {
    CHECK(render("animals", "amphibians", 1, Polarity::Negative, "not", "indeed") ==
          "Here is a list of animals that are not amphibians:");
    CHECK(render("animal", "amphibian", 2, Polarity::Negative, "not", "indeed") ==
          "An animal that is not an amphibian is");
    CHECK(render("animal", "amphibian", 3, Polarity::Negative, "not", "indeed") ==
          "Something that is an animal and not an amphibian is");
    CHECK(render("animal", "amphibian", 4, Polarity::Negative, "not", "indeed") ==
          "What is an animal that is not an amphibian? It is");
    CHECK(render("animal", "amphibian", 2, Polarity::Positive, "not", "indeed") ==
          "An animal that is indeed an amphibian is");
    // articles follow the slotted word
    CHECK(render("sport", "team sport", 2, Polarity::Negative, "not", "indeed") ==
          "A sport that is not a team sport is");
}

TEST_CASE("positive and negative prompts differ only at the indicator") {
    for (int t = 1; t <= 4; ++t) {
        const std::string neg = render("animal", "amphibian", t, Polarity::Negative, "not", "indeed");
        const std::string pos = render("animal", "amphibian", t, Polarity::Positive, "not", "indeed");
        // replacing the marker with the indicator reproduces the negative
        const size_t at = pos.find("indeed");
        REQUIRE(at != std::string::npos);
        std::string swapped = pos;
        swapped.replace(at, 6, "not");
        CHECK(swapped == neg);
    }
}

TEST_CASE("render rejects bad input") {
    CHECK_THROWS_AS(render("", "y", 1, Polarity::Negative, "not", "indeed"), DataError);
    CHECK_THROWS_AS(render("x", "", 1, Polarity::Negative, "not", "indeed"), DataError);
    CHECK_THROWS_AS(render("x", "y", 9, Polarity::Negative, "not", "indeed"), DataError);
}

TEST_CASE("the amphibian entry loads with the answer lead-in") {
    const std::string line =
        R"({"id":"t","x":"animal","y":"amphibian","template":2,"suffix":" a","y_plus":" frog","y_minus":" dog","category":"living_things"})";
    const auto entries = parse_corpus(line, "inline");
    REQUIRE(entries.size() == 1);
    CHECK(entries[0].prompt_minus == "An animal that is not an amphibian is a");
    CHECK(entries[0].prompt_plus == "An animal that is indeed an amphibian is a");
    CHECK(entries[0].y_minus == " dog");
}

TEST_CASE("loader diagnostics carry line numbers") {
    const std::string base =
        R"({"id":"a","x":"animals","y":"amphibians","template":1,"y_plus":" frog","y_minus":" dog","category":"c"})";
    SUBCASE("duplicate (X, Y, template)") {
        const std::string dup =
            R"({"id":"b","x":"animals","y":"amphibians","template":1,"y_plus":" frog","y_minus":" cat","category":"c"})";
        CHECK_THROWS_WITH_AS(parse_corpus(base + "\n" + dup, "corpus"),
                             doctest::Contains("corpus:2"), DataError);
    }
    SUBCASE("degenerate answers") {
        const std::string bad =
            R"({"id":"b","x":"plants","y":"trees","template":1,"y_plus":" cat","y_minus":" cat","category":"c"})";
        CHECK_THROWS_WITH_AS(parse_corpus(base + "\n" + bad, "corpus"),
                             doctest::Contains("corpus:2"), DataError);
    }
    SUBCASE("unknown template id") {
        const std::string bad =
            R"({"id":"b","x":"plants","y":"trees","template":7,"y_plus":" a","y_minus":" b","category":"c"})";
        CHECK_THROWS_WITH_AS(parse_corpus(base + "\n" + bad, "corpus"),
                             doctest::Contains("template id 7"), DataError);
    }
    SUBCASE("malformed JSON") {
        CHECK_THROWS_WITH_AS(parse_corpus(base + "\nnot json", "corpus"),
                             doctest::Contains("corpus:2"), DataError);
    }
    SUBCASE("duplicate ids") {
        const std::string dup_id =
            R"({"id":"a","x":"plants","y":"trees","template":1,"y_plus":" a","y_minus":" b","category":"c"})";
        CHECK_THROWS_WITH_AS(parse_corpus(base + "\n" + dup_id, "corpus"),
                             doctest::Contains("duplicate entry id"), DataError);
    }
}

TEST_CASE("same question under different templates is not a duplicate") {
    const std::string a =
        R"({"id":"a","x":"animal","y":"amphibian","template":2,"y_plus":" frog","y_minus":" dog","category":"c"})";
    const std::string b =
        R"({"id":"b","x":"animal","y":"amphibian","template":3,"y_plus":" frog","y_minus":" dog","category":"c"})";
    CHECK(parse_corpus(a + "\n" + b, "corpus").size() == 2);
}

TEST_CASE("bundled seed corpus loads cleanly and covers the taxonomy") {
    const auto entries = load_corpus(testsup::asset("corpus/seed.jsonl"));
    CHECK(entries.size() >= 40);
    std::set<std::string> categories;
    std::set<int> templates;
    for (const auto& e : entries) {
        categories.insert(e.category);
        templates.insert(e.template_id);
        CHECK(!e.prompt_plus.empty());
        CHECK(e.y_plus != e.y_minus);
        CHECK(e.y_plus[0] == ' ');  // answers keep their leading space
    }
    CHECK(categories.size() == 8);
    CHECK(templates == std::set<int>{1, 2, 3, 4});
}

TEST_CASE("prompt pairs differ in one contiguous token span") {
    auto lab = testsup::load_toy_lab();
    for (const auto& e : lab.corpus) {
        const auto plus = lab.tokenizer->encode(e.prompt_plus);
        const auto minus = lab.tokenizer->encode(e.prompt_minus);
        size_t prefix = 0;
        while (prefix < std::min(plus.size(), minus.size()) && plus[prefix] == minus[prefix]) {
            ++prefix;
        }
        size_t suffix = 0;
        while (suffix < std::min(plus.size(), minus.size()) - prefix &&
               plus[plus.size() - 1 - suffix] == minus[minus.size() - 1 - suffix]) {
            ++suffix;
        }
        // everything outside [prefix, len - suffix) matches
        CHECK(prefix + suffix <= plus.size());
        CHECK(prefix + suffix <= minus.size());
        // the differing span decodes to the indicator region
        std::vector<int> span(minus.begin() + static_cast<long>(prefix),
                              minus.end() - static_cast<long>(suffix));
        const std::string span_text = lab.tokenizer->decode(span);
        CHECK(span_text.find(e.neg_indicator) != std::string::npos);
    }
}

TEST_CASE("locate_y_span finds the last token of Y") {
    auto lab = testsup::load_toy_lab();
    for (const auto& e : lab.corpus) {
        for (Polarity pol : {Polarity::Positive, Polarity::Negative}) {
            const int pos = locate_y_span(e, *lab.tokenizer, lab.config, pol);
            const auto ids = encode_prompt(*lab.tokenizer, lab.config, e.prompt(pol));
            REQUIRE(pos >= 0);
            REQUIRE(pos < static_cast<int>(ids.size()));
            // oracle: the decoded prefix through pos must end at or after the
            // last byte of Y's last occurrence, and the prefix through pos-1
            // must end before it
            const std::string& prompt = e.prompt(pol);
            const size_t y_end = prompt.rfind(e.y) + e.y.size();
            size_t bytes = 0;
            for (int i = 0; i <= pos; ++i) bytes += lab.tokenizer->token_byte_len(ids[i]);
            CHECK(bytes >= y_end);
            CHECK(bytes - lab.tokenizer->token_byte_len(ids[pos]) < y_end);
        }
    }
}

TEST_CASE("locate_y_span uses the last occurrence and errors when absent") {
    auto lab = testsup::load_toy_lab(false);
    DatasetEntry e;
    e.id = "dup";
    e.x = "word";
    e.y = "frog";
    e.template_id = 1;
    e.prompt_minus = "frog then frog again";
    e.prompt_plus = e.prompt_minus;
    e.y_plus = " a";
    e.y_minus = " b";
    const int pos = locate_y_span(e, *lab.tokenizer, lab.config, Polarity::Negative);
    const auto ids = encode_prompt(*lab.tokenizer, lab.config, e.prompt_minus);
    size_t bytes = 0;
    for (int i = 0; i <= pos; ++i) bytes += lab.tokenizer->token_byte_len(ids[i]);
    CHECK(bytes >= std::string("frog then frog").size());  // second occurrence

    e.y = "zebra";
    CHECK_THROWS_AS(locate_y_span(e, *lab.tokenizer, lab.config, Polarity::Negative), DataError);
}

TEST_CASE("expand_answers filters, deduplicates and prefixes") {
    DatasetEntry e;
    e.id = "x";
    SUBCASE("plain expansion") {
        expand_answers(e, {"cat", "dog", "horse"}, {"frog", "toad"});
        CHECK(e.y_plus_set == std::vector<std::string>{" cat", " dog", " horse"});
        CHECK(e.y_minus_set == std::vector<std::string>{" frog", " toad"});
    }
    SUBCASE("duplicates collapse") {
        expand_answers(e, {"dog", "dog"}, {"cat"});
        CHECK(e.y_plus_set == std::vector<std::string>{" dog"});
    }
    SUBCASE("multi-word answers are dropped; empty results error") {
        CHECK_THROWS_AS(expand_answers(e, {"multi word answer"}, {"ok"}), DataError);
    }
}

TEST_CASE("entry round-trips through its JSONL form") {
    const auto entries = load_corpus(testsup::asset("corpus/seed.jsonl"));
    const std::string line = entry_to_jsonl(entries[1]);
    const auto back = parse_corpus(line, "roundtrip");
    REQUIRE(back.size() == 1);
    CHECK(back[0].template_id == entries[1].template_id);
    CHECK(back[0].prompt_plus == entries[1].prompt_plus);
    CHECK(back[0].prompt_minus == entries[1].prompt_minus);
    CHECK(back[0].y_plus_set == entries[1].y_plus_set);
}

// Regenerates the bundled desk-scale assets: the byte-level BPE tokenizer
// trained on the seed corpus, seeded toy checkpoints, per-layer SAE files,
// the small-model config, and offline annotation fixtures. Outputs are
// deterministic: same inputs, same bytes.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "neglab/annotate.hpp"
#include "neglab/attribution.hpp"
#include "neglab/corpus.hpp"
#include "neglab/errors.hpp"
#include "neglab/lenses.hpp"
#include "neglab/model.hpp"
#include "neglab/rng.hpp"
#include "neglab/tokenizer.hpp"
#include "neglab/weights.hpp"

using namespace neglab;
namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

struct TrainedBpe {
    std::map<std::string, int> vocab;
    std::vector<std::pair<std::string, std::string>> merges;
};

uint32_t codepoint_of(const std::string& utf8) {
    const unsigned char b0 = static_cast<unsigned char>(utf8[0]);
    if (b0 < 0x80) return b0;
    if ((b0 >> 5) == 0x6) {
        return ((b0 & 0x1Fu) << 6) | (static_cast<unsigned char>(utf8[1]) & 0x3Fu);
    }
    return ((b0 & 0x0Fu) << 12) | ((static_cast<unsigned char>(utf8[1]) & 0x3Fu) << 6) |
           (static_cast<unsigned char>(utf8[2]) & 0x3Fu);
}

TrainedBpe train_bpe(const std::string& text, int max_merges) {
    // distinct pre-token words with counts, as mapped symbol sequences
    std::map<std::string, long> word_freq;
    for (const auto& w : pretokenize(text)) ++word_freq[bytemap::map_bytes(w)];

    struct Word {
        std::vector<std::string> symbols;
        long count;
    };
    std::vector<Word> words;
    for (const auto& [mapped, count] : word_freq) {
        Word w;
        w.count = count;
        size_t i = 0;
        while (i < mapped.size()) {
            const unsigned char lead = static_cast<unsigned char>(mapped[i]);
            size_t len = 1;
            if (lead >= 0xE0) len = 3;
            else if (lead >= 0xC0) len = 2;
            w.symbols.push_back(mapped.substr(i, len));
            i += len;
        }
        words.push_back(std::move(w));
    }

    TrainedBpe out;
    for (int round = 0; round < max_merges; ++round) {
        std::map<std::pair<std::string, std::string>, long> pair_counts;
        for (const auto& w : words) {
            for (size_t i = 0; i + 1 < w.symbols.size(); ++i) {
                pair_counts[{w.symbols[i], w.symbols[i + 1]}] += w.count;
            }
        }
        std::pair<std::string, std::string> best;
        long best_count = 0;
        for (const auto& [pair, count] : pair_counts) {
            if (count > best_count) {  // map order breaks ties lexicographically
                best_count = count;
                best = pair;
            }
        }
        if (best_count < 2) break;
        out.merges.push_back(best);
        const std::string merged = best.first + best.second;
        for (auto& w : words) {
            for (size_t i = 0; i + 1 < w.symbols.size();) {
                if (w.symbols[i] == best.first && w.symbols[i + 1] == best.second) {
                    w.symbols[i] = merged;
                    w.symbols.erase(w.symbols.begin() + static_cast<long>(i) + 1);
                } else {
                    ++i;
                }
            }
        }
    }

    // ids: byte alphabet by codepoint, then merge products, then <s>
    std::vector<std::pair<uint32_t, std::string>> alphabet;
    for (const auto& s : bytemap::byte_to_unicode()) alphabet.push_back({codepoint_of(s), s});
    std::sort(alphabet.begin(), alphabet.end());
    int next_id = 0;
    for (const auto& [cp, s] : alphabet) out.vocab[s] = next_id++;
    for (const auto& [a, b] : out.merges) {
        const std::string merged = a + b;
        if (!out.vocab.count(merged)) out.vocab[merged] = next_id++;
    }
    out.vocab["<s>"] = next_id++;
    return out;
}

void write_tokenizer(const fs::path& dir, const TrainedBpe& bpe) {
    // id order in the JSON for readability; parsing is order-insensitive
    std::vector<std::pair<int, std::string>> by_id;
    for (const auto& [tok, id] : bpe.vocab) by_id.push_back({id, tok});
    std::sort(by_id.begin(), by_id.end());
    ordered_json vj = ordered_json::object();
    for (const auto& [id, tok] : by_id) vj[tok] = id;
    std::ofstream vout(dir / "vocab.json");
    vout << vj.dump(1) << "\n";

    std::ofstream mout(dir / "merges.txt");
    mout << "#version: 0.2\n";
    for (const auto& [a, b] : bpe.merges) mout << a << " " << b << "\n";
}

SAEModel make_sae(int d_model, int latents, uint64_t seed) {
    Rng rng(seed);
    SAEModel sae;
    const auto d = static_cast<size_t>(d_model);
    const auto D = static_cast<size_t>(latents);
    sae.enc_weight = Tensor({D, d});
    sae.enc_weight.data = rng.gaussian_vector(D * d, 0.0f, 0.1f);
    sae.enc_bias = Tensor({D});
    std::fill(sae.enc_bias.data.begin(), sae.enc_bias.data.end(), 0.01f);
    sae.dec_weight = Tensor({D, d});
    sae.dec_weight.data = rng.gaussian_vector(D * d, 0.0f, 0.1f);
    sae.dec_bias = Tensor({d});
    return sae;
}

std::string synth_response(int pattern, int layer, const std::vector<std::string>& tokens) {
    ordered_json item;
    item["layer"] = layer;
    item["tokens"] = tokens;
    item["justification"] = "tokens align with the target concept";
    switch (pattern) {
        case 0:
            return "```json\n[]\n```";
        case 1:
            return "[]";
        case 2: {
            ordered_json arr = ordered_json::array({item});
            return "Scanning the layer readouts for usable evidence.\n```json\n" + arr.dump(2) +
                   "\n```\nNothing else stood out.";
        }
        default: {
            ordered_json second = item;
            second["justification"] = "same signal, weaker";
            ordered_json arr = ordered_json::array({item, second});
            return arr.dump();
        }
    }
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::path("assets");
    try {
        fs::create_directories(root / "toy");
        fs::create_directories(root / "fixtures");
        fs::create_directories(root / "configs");

        const auto entries = load_corpus((root / "corpus" / "seed.jsonl").string());
        std::printf("corpus: %zu entries\n", entries.size());

        // tokenizer training text: prompts plus heavily repeated answers so
        // answer words end up as single tokens
        std::string text;
        for (int rep = 0; rep < 3; ++rep) {
            for (const auto& e : entries) {
                text += e.prompt_plus + "\n" + e.prompt_minus + "\n";
            }
        }
        for (const auto& e : entries) {
            auto push = [&](const std::string& answer) {
                for (int i = 0; i < 30; ++i) text += answer;
                text += "\n";
            };
            push(e.y_plus);
            push(e.y_minus);
            for (const auto& a : e.y_plus_set) push(a);
            for (const auto& a : e.y_minus_set) push(a);
        }
        for (int i = 0; i < 30; ++i) text += " New York New Delhi";
        text += "\nHello Hello Hello\n";

        const TrainedBpe bpe = train_bpe(text, 420);
        write_tokenizer(root / "toy", bpe);
        const Tokenizer tok =
            Tokenizer::load((root / "toy" / "vocab.json").string(), (root / "toy" / "merges.txt").string());
        std::printf("tokenizer: %d tokens, %zu merges\n", tok.vocab_size(), bpe.merges.size());

        ModelConfig config;
        config.n_layers = 4;
        config.d_model = 64;
        config.n_heads = 4;
        config.n_kv_heads = 2;
        config.d_head = 16;
        config.vocab_size = tok.vocab_size();
        config.norm_kind = NormKind::RmsNorm;
        config.positional_kind = PositionalKind::Rotary;
        config.activation = ActivationKind::Silu;
        config.mlp_hidden = 128;
        config.bos_token = "<s>";
        config.validate();

        save_weights((root / "toy" / "model.safetensors").string(), seeded_init(config, 1), config);
        save_weights((root / "toy" / "model_alt.safetensors").string(), seeded_init(config, 7),
                     config);
        std::printf("toy checkpoints written (seeds 1 and 7)\n");

        for (int layer = 1; layer <= config.n_layers; ++layer) {
            save_sae((root / "toy" / ("sae_layer" + std::to_string(layer) + ".safetensors")).string(),
                     make_sae(config.d_model, 128, 100 + static_cast<uint64_t>(layer)));
        }

        {
            std::ofstream out(root / "configs" / "gpt2-124m.json");
            ordered_json j;
            j["n_layers"] = 12;
            j["d_model"] = 768;
            j["n_heads"] = 12;
            j["n_kv_heads"] = 12;
            j["d_head"] = 64;
            j["vocab_size"] = 50257;
            j["norm_kind"] = "layernorm";
            j["positional_kind"] = "learned-absolute";
            j["activation"] = "gelu";
            j["mlp_hidden"] = 3072;
            j["eps"] = 1e-5;
            j["tie_embeddings"] = true;
            j["attn_bias"] = true;
            j["mlp_bias"] = true;
            j["bos_token"] = "<|endoftext|>";
            out << j.dump(2) << "\n";
        }

        // sanity: every entry's answers resolve and Y spans locate
        Model model(config, load_weights((root / "toy" / "model.safetensors").string(), config));
        for (const auto& e : entries) {
            const int div = first_divergence_position(tok, e.y_plus, e.y_minus);
            const auto ta = tok.encode(e.y_plus);
            const auto tb = tok.encode(e.y_minus);
            if (static_cast<size_t>(div) >= ta.size() || static_cast<size_t>(div) >= tb.size()) {
                throw DataError("entry " + e.id + " has a prefix-degenerate answer pair");
            }
            locate_y_span(e, tok, config, Polarity::Positive);
            locate_y_span(e, tok, config, Polarity::Negative);
        }
        std::printf("corpus sanity checks passed\n");

        // offline annotation fixtures over the default layer range
        const int begin = config.n_layers / 3 + 1;
        const int end = std::max(begin, (2 * config.n_layers) / 3);
        for (const auto mode : {EvidenceMode::PromotedMatchesNotY, EvidenceMode::DemotedMatchesY}) {
            const std::string name = mode == EvidenceMode::PromotedMatchesNotY
                                         ? "annotate_promoted.jsonl"
                                         : "annotate_demoted.jsonl";
            const fs::path fixture_path = root / "fixtures" / name;
            std::ofstream(fixture_path.string(), std::ios::trunc);
            int idx = 0;
            for (const auto& e : entries) {
                const auto tokens = encode_prompt(tok, config, e.prompt_minus);
                const auto readouts = lens_scan(model, tokens, begin - 1, end - 1, "AO", 10);
                const std::string request = build_annotation_prompt(e, readouts, tok, mode);
                std::vector<std::string> evidence_tokens;
                const auto& list = mode == EvidenceMode::PromotedMatchesNotY
                                       ? readouts[0].promoted
                                       : readouts[0].demoted;
                evidence_tokens.push_back(tok.token_string(list[0].first));
                if (list.size() > 1) evidence_tokens.push_back(tok.token_string(list[1].first));
                const std::string reply = synth_response(idx % 4, begin, evidence_tokens);
                fixture_append(fixture_path.string(), request_hash(request), reply);
                ++idx;
            }
            std::printf("fixtures written: %s\n", fixture_path.string().c_str());
        }

        // golden values for the tokenizer tests
        auto show = [&](const std::string& s) {
            std::printf("encode(%s) =", ordered_json(s).dump().c_str());
            for (int id : tok.encode(s)) std::printf(" %d", id);
            std::printf("\n");
        };
        show(" frog");
        show(" New York");
        show(" New Delhi");
        std::printf("divergence(New York, New Delhi) = %d\n",
                    first_divergence_position(tok, " New York", " New Delhi"));
        std::printf("bos id = %d\n", *tok.token_id("<s>"));
        std::printf("done\n");
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "asset generation failed: %s\n", e.what());
        return 1;
    }
}

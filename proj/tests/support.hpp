#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "neglab/corpus.hpp"
#include "neglab/model.hpp"
#include "neglab/rng.hpp"
#include "neglab/weights.hpp"

namespace testsup {

inline std::string assets_dir() { return NEGLAB_ASSETS_DIR; }
inline std::string asset(const std::string& rel) {
    return (std::filesystem::path(assets_dir()) / rel).string();
}

// The bundled 4-layer rmsnorm/rotary toy lab.
struct ToyLab {
    neglab::ModelConfig config;
    std::unique_ptr<neglab::Model> model;
    std::unique_ptr<neglab::Tokenizer> tokenizer;
    std::vector<neglab::DatasetEntry> corpus;
};

inline ToyLab load_toy_lab(bool with_corpus = true) {
    ToyLab lab;
    const neglab::TensorFile file = neglab::load_tensor_file(asset("toy/model.safetensors"));
    lab.config = neglab::ModelConfig::from_json_text(file.metadata.at("model_config"));
    lab.model = std::make_unique<neglab::Model>(lab.config,
                                                neglab::weights_from_file(file, lab.config));
    lab.tokenizer = std::make_unique<neglab::Tokenizer>(
        neglab::Tokenizer::load(asset("toy/vocab.json"), asset("toy/merges.txt")));
    if (with_corpus) lab.corpus = neglab::load_corpus(asset("corpus/seed.jsonl"));
    return lab;
}

// Small in-memory model, seeded weights, no file IO.
inline neglab::ModelConfig tiny_config(int n_layers = 2, int d_model = 16, int n_heads = 2,
                                       int vocab = 32, int n_kv_heads = 0) {
    neglab::ModelConfig c;
    c.n_layers = n_layers;
    c.d_model = d_model;
    c.n_heads = n_heads;
    c.n_kv_heads = n_kv_heads > 0 ? n_kv_heads : n_heads;
    c.d_head = d_model / n_heads;
    c.vocab_size = vocab;
    c.mlp_hidden = d_model * 2;
    return c;
}

inline neglab::Model tiny_model(const neglab::ModelConfig& c, uint64_t seed = 3) {
    return neglab::Model(c, neglab::seeded_init(c, seed));
}

// Random token prompts for property tests.
inline std::vector<int> random_prompt(neglab::Rng& rng, int vocab, size_t min_len = 2,
                                      size_t max_len = 12) {
    const size_t len = min_len + rng.below(static_cast<uint32_t>(max_len - min_len + 1));
    std::vector<int> out(len);
    for (auto& t : out) t = static_cast<int>(rng.below(static_cast<uint32_t>(vocab)));
    return out;
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, static_cast<double>(std::fabs(a[i] - b[i])));
    }
    return m;
}

}  // namespace testsup

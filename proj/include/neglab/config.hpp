#pragma once

#include <optional>
#include <string>

namespace neglab {

enum class NormKind { LayerNorm, RmsNorm };
enum class PositionalKind { LearnedAbsolute, Rotary };
enum class ActivationKind { Gelu, Silu };

struct ModelConfig {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int n_kv_heads = 0;
    int d_head = 0;
    int vocab_size = 0;
    NormKind norm_kind = NormKind::RmsNorm;
    PositionalKind positional_kind = PositionalKind::Rotary;
    ActivationKind activation = ActivationKind::Silu;
    int mlp_hidden = 0;
    float rope_base = 10000.0f;
    float eps = 1e-5f;
    bool tie_embeddings = false;
    bool attn_bias = false;
    bool mlp_bias = false;
    bool unembed_bias = false;
    std::optional<std::string> bos_token;

    void validate() const;

    static ModelConfig from_json_text(const std::string& text);
    static ModelConfig from_json_file(const std::string& path);
    std::string to_json_text() const;
};

}  // namespace neglab

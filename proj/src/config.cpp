#include "neglab/config.hpp"

#include <fstream>

#include "json.hpp"
#include "neglab/errors.hpp"

namespace neglab {

using ordered_json = nlohmann::ordered_json;

void ModelConfig::validate() const {
    if (n_layers < 1) throw ConfigError("model config: n_layers must be >= 1");
    if (vocab_size < 2) throw ConfigError("model config: vocab_size must be >= 2");
    if (n_heads < 1 || d_head < 1) throw ConfigError("model config: n_heads and d_head must be >= 1");
    if (n_heads * d_head != d_model) {
        throw ConfigError("model config: n_heads * d_head must equal d_model");
    }
    if (n_kv_heads < 1 || n_kv_heads > n_heads || n_heads % n_kv_heads != 0) {
        throw ConfigError("model config: n_kv_heads must divide n_heads");
    }
    if (mlp_hidden < 1) throw ConfigError("model config: mlp_hidden must be >= 1");
    if (eps <= 0.0f) throw ConfigError("model config: eps must be positive");
    if (positional_kind == PositionalKind::Rotary && d_head % 2 != 0) {
        throw ConfigError("model config: rotary positions need an even d_head");
    }
}

static std::string norm_name(NormKind k) {
    return k == NormKind::LayerNorm ? "layernorm" : "rmsnorm";
}
static std::string pos_name(PositionalKind k) {
    return k == PositionalKind::LearnedAbsolute ? "learned-absolute" : "rotary";
}
static std::string act_name(ActivationKind k) { return k == ActivationKind::Gelu ? "gelu" : "silu"; }

ModelConfig ModelConfig::from_json_text(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError("malformed model config JSON: " + std::string(e.what()));
    }
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.n_kv_heads = j.value("n_kv_heads", c.n_heads);
        c.d_head = j.value("d_head", c.n_heads > 0 ? c.d_model / c.n_heads : 0);
        c.vocab_size = j.at("vocab_size").get<int>();
        const std::string norm = j.value("norm_kind", "rmsnorm");
        if (norm == "layernorm") c.norm_kind = NormKind::LayerNorm;
        else if (norm == "rmsnorm") c.norm_kind = NormKind::RmsNorm;
        else throw ConfigError("model config: unknown norm_kind " + norm);
        const std::string pos = j.value("positional_kind", "rotary");
        if (pos == "learned-absolute") c.positional_kind = PositionalKind::LearnedAbsolute;
        else if (pos == "rotary") c.positional_kind = PositionalKind::Rotary;
        else throw ConfigError("model config: unknown positional_kind " + pos);
        const std::string act = j.value("activation", "silu");
        if (act == "gelu") c.activation = ActivationKind::Gelu;
        else if (act == "silu") c.activation = ActivationKind::Silu;
        else throw ConfigError("model config: unknown activation " + act);
        c.mlp_hidden = j.at("mlp_hidden").get<int>();
        c.rope_base = j.value("rope_base", 10000.0f);
        c.eps = j.value("eps", 1e-5f);
        c.tie_embeddings = j.value("tie_embeddings", false);
        c.attn_bias = j.value("attn_bias", false);
        c.mlp_bias = j.value("mlp_bias", false);
        c.unembed_bias = j.value("unembed_bias", false);
        if (j.contains("bos_token") && !j["bos_token"].is_null()) {
            c.bos_token = j["bos_token"].get<std::string>();
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("model config field error: " + std::string(e.what()));
    }
    c.validate();
    return c;
}

ModelConfig ModelConfig::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open model config: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

std::string ModelConfig::to_json_text() const {
    ordered_json j;
    j["n_layers"] = n_layers;
    j["d_model"] = d_model;
    j["n_heads"] = n_heads;
    j["n_kv_heads"] = n_kv_heads;
    j["d_head"] = d_head;
    j["vocab_size"] = vocab_size;
    j["norm_kind"] = norm_name(norm_kind);
    j["positional_kind"] = pos_name(positional_kind);
    j["activation"] = act_name(activation);
    j["mlp_hidden"] = mlp_hidden;
    j["rope_base"] = rope_base;
    j["eps"] = eps;
    j["tie_embeddings"] = tie_embeddings;
    j["attn_bias"] = attn_bias;
    j["mlp_bias"] = mlp_bias;
    j["unembed_bias"] = unembed_bias;
    if (bos_token) j["bos_token"] = *bos_token;
    return j.dump(2);
}

}  // namespace neglab
